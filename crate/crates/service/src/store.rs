//! Filesystem layout under the data directory:
//!
//! ```text
//! audit.log, audit.log.head      hash-chained audit trail
//! review.log                     review item snapshots, one JSON object per line
//! jobs.log                       job record snapshots, one JSON object per line
//! bundles/<doc_id>/rev-NNNN.plb  bundle revisions; 0 is the ingested original
//! results/<job_id>.json          task outputs
//! ```
//!
//! Logs are append-only. On open, the last snapshot of each key wins.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use planloop_core::docmodel::{load_bundle, save_bundle, ContentHash, DocumentBundle, ARCHIVE_EXTENSION};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::ServiceError;

pub const AUDIT_FILE: &str = "audit.log";
pub const REVIEW_FILE: &str = "review.log";
pub const JOBS_FILE: &str = "jobs.log";

/// Doc ids become directory names, so they are restricted to a safe set.
pub fn valid_doc_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && !id.starts_with('.') && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Committed revision numbers and any pending revision of one document.
pub type Revisions = (Vec<u32>, Option<u32>);

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Appends one JSON line and flushes it to disk.
fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<(), ServiceError> {
    let mut line = serde_json::to_vec(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| ServiceError::storage(path.display(), e))?;
    f.write_all(&line).map_err(|e| ServiceError::storage(path.display(), e))?;
    f.sync_data().map_err(|e| ServiceError::storage(path.display(), e))
}

/// Reads every line. A torn final line (no newline, not parseable) is cut
/// off; any other unreadable line is an error.
fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::storage(path.display(), e)),
    };
    let mut out = Vec::new();
    let mut offset = 0;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let complete = line.ends_with(b"\n");
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if body.iter().all(u8::is_ascii_whitespace) {
            offset += line.len();
            continue;
        }
        match serde_json::from_slice(body) {
            Ok(v) => out.push(v),
            Err(_) if !complete => {
                let f = OpenOptions::new().write(true).open(path).map_err(|e| ServiceError::storage(path.display(), e))?;
                f.set_len(offset as u64).map_err(|e| ServiceError::storage(path.display(), e))?;
                break;
            }
            Err(e) => return Err(ServiceError::storage(format!("{} at byte {offset}", path.display()), e)),
        }
        offset += line.len();
    }
    Ok(out)
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, ServiceError> {
        for dir in [root.to_path_buf(), root.join("bundles"), root.join("results")] {
            fs::create_dir_all(&dir).map_err(|e| ServiceError::storage(dir.display(), e))?;
        }
        Ok(Store { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn audit_path(&self) -> PathBuf {
        self.root.join(AUDIT_FILE)
    }

    pub fn append_review<T: Serialize>(&self, snapshot: &T) -> Result<(), ServiceError> {
        append_line(&self.root.join(REVIEW_FILE), snapshot)
    }

    pub fn read_review<T: DeserializeOwned>(&self) -> Result<Vec<T>, ServiceError> {
        read_lines(&self.root.join(REVIEW_FILE))
    }

    pub fn append_job<T: Serialize>(&self, snapshot: &T) -> Result<(), ServiceError> {
        append_line(&self.root.join(JOBS_FILE), snapshot)
    }

    pub fn read_jobs<T: DeserializeOwned>(&self) -> Result<Vec<T>, ServiceError> {
        read_lines(&self.root.join(JOBS_FILE))
    }

    fn doc_dir(&self, doc_id: &str) -> PathBuf {
        self.root.join("bundles").join(doc_id)
    }

    fn revision_path(&self, doc_id: &str, revision: u32) -> PathBuf {
        self.doc_dir(doc_id).join(format!("rev-{revision:04}.{ARCHIVE_EXTENSION}"))
    }

    fn pending_path(&self, doc_id: &str, revision: u32) -> PathBuf {
        self.doc_dir(doc_id).join(format!("rev-{revision:04}.pending"))
    }

    /// Writes a revision under a pending name. It becomes visible only after
    /// [`Store::promote`].
    pub fn stage_revision(&self, bundle: &DocumentBundle, revision: u32) -> Result<ContentHash, ServiceError> {
        let dir = self.doc_dir(&bundle.doc_id);
        fs::create_dir_all(&dir).map_err(|e| ServiceError::storage(dir.display(), e))?;
        let tmp = dir.join(format!("rev-{revision:04}.tmp.{ARCHIVE_EXTENSION}"));
        let hash = save_bundle(bundle, &tmp)?;
        File::open(&tmp).and_then(|f| f.sync_all()).map_err(|e| ServiceError::storage(tmp.display(), e))?;
        let pending = self.pending_path(&bundle.doc_id, revision);
        fs::rename(&tmp, &pending).map_err(|e| ServiceError::storage(pending.display(), e))?;
        Ok(hash)
    }

    pub fn promote(&self, doc_id: &str, revision: u32) -> Result<(), ServiceError> {
        let (from, to) = (self.pending_path(doc_id, revision), self.revision_path(doc_id, revision));
        fs::rename(&from, &to).map_err(|e| ServiceError::storage(to.display(), e))
    }

    pub fn discard_pending(&self, doc_id: &str, revision: u32) {
        let _ = fs::remove_file(self.pending_path(doc_id, revision));
    }

    pub fn load_revision(&self, doc_id: &str, revision: u32) -> Result<DocumentBundle, ServiceError> {
        Ok(load_bundle(&self.revision_path(doc_id, revision))?)
    }

    pub fn load_pending(&self, doc_id: &str, revision: u32) -> Result<Option<DocumentBundle>, ServiceError> {
        let p = self.pending_path(doc_id, revision);
        if !p.exists() {
            return Ok(None);
        }
        // Pending files are written with the archive layout.
        let bytes = fs::read(&p).map_err(|e| ServiceError::storage(p.display(), e))?;
        Ok(Some(DocumentBundle::from_canonical(&bytes)?))
    }

    /// Committed revisions and any pending revision number, per document.
    pub fn scan(&self) -> Result<BTreeMap<String, Revisions>, ServiceError> {
        let base = self.root.join("bundles");
        let mut out = BTreeMap::new();
        let io = |e: std::io::Error| ServiceError::storage(base.display(), e);
        for entry in fs::read_dir(&base).map_err(io)? {
            let entry = entry.map_err(io)?;
            let Some(doc_id) = entry.file_name().to_str().map(str::to_string) else { continue };
            if !entry.path().is_dir() || !valid_doc_id(&doc_id) {
                continue;
            }
            let (mut revs, mut pending) = (Vec::new(), None);
            for f in fs::read_dir(entry.path()).map_err(io)? {
                let name = f.map_err(io)?.file_name().to_string_lossy().into_owned();
                let Some(rest) = name.strip_prefix("rev-") else { continue };
                let Some((n, ext)) = rest.split_once('.') else { continue };
                let Ok(n) = n.parse::<u32>() else { continue };
                match ext {
                    e if e == ARCHIVE_EXTENSION => revs.push(n),
                    "pending" => pending = Some(n),
                    _ => {}
                }
            }
            revs.sort_unstable();
            if !revs.is_empty() || pending.is_some() {
                out.insert(doc_id, (revs, pending));
            }
        }
        Ok(out)
    }

    fn result_path(&self, job_id: &str) -> PathBuf {
        self.root.join("results").join(format!("{job_id}.json"))
    }

    pub fn write_result<T: Serialize>(&self, job_id: &str, value: &T) -> Result<String, ServiceError> {
        let path = self.result_path(job_id);
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
        fs::write(&tmp, bytes).map_err(|e| ServiceError::storage(tmp.display(), e))?;
        fs::rename(&tmp, &path).map_err(|e| ServiceError::storage(path.display(), e))?;
        Ok(format!("results/{job_id}.json"))
    }

    pub fn read_result<T: DeserializeOwned>(&self, job_id: &str) -> Result<Option<T>, ServiceError> {
        let path = self.result_path(job_id);
        match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map(Some).map_err(|e| ServiceError::storage(path.display(), e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ServiceError::storage(path.display(), e)),
        }
    }
}
