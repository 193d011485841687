//! Append-only, hash-chained audit log.
//!
//! Each event is one line of eight tab-separated fields:
//!
//! ```text
//! seq  timestamp  actor  action  payload_digest  prev_hash  event_hash  payload
//! ```
//!
//! `payload` is compact JSON with sorted keys and `payload_digest` is the
//! SHA-256 of those exact bytes. `event_hash` is the SHA-256 of the first six
//! fields joined by tabs, and `prev_hash` of event 0 is [`GENESIS_HASH`].
//! Verification works on the stored text, so any change to any byte of a
//! record breaks the chain at that record. A sidecar file (`<log>.head`)
//! stores the event count and latest hash so truncation is detectable.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::docmodel::ContentHash;

pub const GENESIS_HASH: ContentHash = ContentHash([0u8; 32]);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Actor {
    System,
    Operator(String),
}

impl Actor {
    pub fn operator(id: impl Into<String>) -> Self {
        Actor::Operator(id.into())
    }

    pub fn operator_id(&self) -> Option<&str> {
        match self {
            Actor::System => None,
            Actor::Operator(id) => Some(id),
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::System => f.write_str("system"),
            Actor::Operator(id) => write!(f, "operator:{id}"),
        }
    }
}

impl From<Actor> for String {
    fn from(a: Actor) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Actor {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        parse_actor(&s).ok_or_else(|| format!("invalid actor {s:?}"))
    }
}

fn valid_operator_id(id: &str) -> bool {
    !id.is_empty() && !id.chars().any(|c| c.is_control())
}

fn parse_actor(s: &str) -> Option<Actor> {
    if s == "system" {
        return Some(Actor::System);
    }
    let id = s.strip_prefix("operator:")?;
    valid_operator_id(id).then(|| Actor::Operator(id.to_string()))
}

fn valid_action(action: &str) -> bool {
    !action.is_empty() && action.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub actor: Actor,
    pub action: String,
    pub payload_digest: ContentHash,
    pub prev_hash: ContentHash,
    pub event_hash: ContentHash,
    pub payload: Value,
}

impl AuditEvent {
    pub fn doc_id(&self) -> Option<&str> {
        self.payload.get("doc_id").and_then(Value::as_str)
    }
}

fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn hash_header(seq: &str, timestamp: &str, actor: &str, action: &str, payload_digest: &str, prev_hash: &str) -> ContentHash {
    let mut h = Sha256::new();
    for (i, field) in [seq, timestamp, actor, action, payload_digest, prev_hash].iter().enumerate() {
        if i > 0 {
            h.update(b"\t");
        }
        h.update(field.as_bytes());
    }
    ContentHash(h.finalize().into())
}

/// Latest event count and hash, stored redundantly next to the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAnchor {
    pub count: u64,
    pub head_hash: ContentHash,
}

impl HeadAnchor {
    pub fn genesis() -> Self {
        HeadAnchor { count: 0, head_hash: GENESIS_HASH }
    }

    fn to_line(self) -> String {
        format!("{}\t{}\n", self.count, self.head_hash)
    }

    pub fn parse(text: &str) -> Option<Self> {
        let line = text.strip_suffix('\n')?;
        let (count, hash) = line.split_once('\t')?;
        Some(HeadAnchor { count: count.parse().ok()?, head_hash: ContentHash::from_hex(hash)? })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainBreak {
    pub seq: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    /// Every record recomputes and links to its predecessor.
    pub chain_valid: bool,
    pub events: u64,
    pub first_break: Option<ChainBreak>,
    /// `None` when no head anchor was available to compare against.
    pub head_matches: Option<bool>,
    /// The anchor records more events than the log holds.
    pub truncated: bool,
}

impl ChainReport {
    /// The chain verifies and agrees with its head anchor (when present).
    pub fn intact(&self) -> bool {
        self.chain_valid && self.head_matches != Some(false)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit storage failure at {path}: {source}")]
    Storage { path: PathBuf, source: io::Error },
    #[error("invalid audit action tag {0:?}")]
    InvalidAction(String),
    #[error("invalid operator id {0:?}")]
    InvalidActor(String),
    #[error("existing audit log does not verify: {0:?}")]
    Corrupt(ChainReport),
}

/// Verifies a serialized log. Works on the raw bytes so that any edit to a
/// stored record is detected at that record.
pub fn verify_chain_bytes(bytes: &[u8], head: Option<&HeadAnchor>) -> ChainReport {
    let mut prev = GENESIS_HASH;
    let mut count = 0u64;
    let mut first_break = None;
    let fail = |seq: u64, reason: &str| Some(ChainBreak { seq, reason: reason.to_string() });

    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        // The final record is unterminated; attribute the break to it below.
    }
    let mut rest = bytes;
    while !rest.is_empty() {
        let seq = count;
        let (line, tail, terminated) = match rest.iter().position(|&b| b == b'\n') {
            Some(i) => (&rest[..i], &rest[i + 1..], true),
            None => (rest, &rest[rest.len()..], false),
        };
        rest = tail;
        if !terminated {
            first_break = fail(seq, "record is not newline-terminated");
            break;
        }
        let Ok(line) = std::str::from_utf8(line) else {
            first_break = fail(seq, "record is not valid UTF-8");
            break;
        };
        match check_record(seq, line, &prev) {
            Ok(hash) => {
                prev = hash;
                count += 1;
            }
            Err(reason) => {
                first_break = fail(seq, &reason);
                break;
            }
        }
    }

    let chain_valid = first_break.is_none();
    let (head_matches, truncated) = match head {
        Some(anchor) if chain_valid => {
            let matches = anchor.count == count && anchor.head_hash == prev;
            (Some(matches), anchor.count > count)
        }
        Some(anchor) => (Some(false), anchor.count > count),
        None => (None, false),
    };
    ChainReport { chain_valid, events: count, first_break, head_matches, truncated }
}

fn check_record(seq: u64, line: &str, prev: &ContentHash) -> Result<ContentHash, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 fields, found {}", fields.len()));
    }
    let [seq_s, ts, actor, action, digest, prev_s, hash_s, payload] = fields[..] else { unreachable!() };
    if seq_s != seq.to_string() {
        return Err(format!("sequence number {seq_s:?} where {seq} was expected"));
    }
    let parsed_ts = DateTime::parse_from_rfc3339(ts).map_err(|_| "unparseable timestamp".to_string())?;
    if format_timestamp(&parsed_ts.with_timezone(&Utc)) != ts {
        return Err("timestamp is not in canonical form".into());
    }
    if parse_actor(actor).is_none() {
        return Err(format!("invalid actor {actor:?}"));
    }
    if !valid_action(action) {
        return Err(format!("invalid action {action:?}"));
    }
    if serde_json::from_str::<Value>(payload).is_err() {
        return Err("payload is not valid JSON".into());
    }
    if ContentHash::of_bytes(payload.as_bytes()).to_hex() != digest {
        return Err("payload digest mismatch".into());
    }
    if prev.to_hex() != prev_s {
        return Err("prev_hash does not link to the preceding event".into());
    }
    let recomputed = hash_header(seq_s, ts, actor, action, digest, prev_s);
    if recomputed.to_hex() != hash_s {
        return Err("event_hash does not recompute".into());
    }
    Ok(recomputed)
}

fn parse_record(line: &str) -> Option<AuditEvent> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return None;
    }
    Some(AuditEvent {
        seq: f[0].parse().ok()?,
        timestamp: DateTime::parse_from_rfc3339(f[1]).ok()?.with_timezone(&Utc),
        actor: parse_actor(f[2])?,
        action: f[3].to_string(),
        payload_digest: ContentHash::from_hex(f[4])?,
        prev_hash: ContentHash::from_hex(f[5])?,
        event_hash: ContentHash::from_hex(f[6])?,
        payload: serde_json::from_str(f[7]).ok()?,
    })
}

pub fn head_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".head");
    log_path.with_file_name(name)
}

/// Verifies a log file against its head sidecar (if one exists).
pub fn verify_file(path: &Path) -> io::Result<ChainReport> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    let head = match fs::read_to_string(head_path(path)) {
        Ok(text) => Some(HeadAnchor::parse(&text).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unreadable head anchor"))?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    Ok(verify_chain_bytes(&bytes, head.as_ref()))
}

/// Selects events; unset fields match everything. `seq_range` is inclusive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditFilter {
    pub doc_id: Option<String>,
    pub action: Option<String>,
    pub actor: Option<Actor>,
    pub seq_range: Option<(u64, u64)>,
}

impl AuditFilter {
    pub fn doc(doc_id: impl Into<String>) -> Self {
        AuditFilter { doc_id: Some(doc_id.into()), ..Default::default() }
    }

    pub fn matches(&self, e: &AuditEvent) -> bool {
        self.doc_id.as_deref().is_none_or(|d| e.doc_id() == Some(d))
            && self.action.as_deref().is_none_or(|a| e.action == a)
            && self.actor.as_ref().is_none_or(|a| &e.actor == a)
            && self.seq_range.is_none_or(|(lo, hi)| e.seq >= lo && e.seq <= hi)
    }
}

type Clock = Box<dyn Fn() -> DateTime<Utc> + Send + Sync>;

struct Storage {
    path: PathBuf,
    file: File,
}

struct Inner {
    events: Vec<AuditEvent>,
    lines: Vec<String>,
    head: HeadAnchor,
    storage: Option<Storage>,
}

/// The log. Appends are serialized through an internal lock, so an
/// `Arc<AuditLog>` can be shared by concurrent producers.
pub struct AuditLog {
    inner: Mutex<Inner>,
    clock: Clock,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.lock();
        f.debug_struct("AuditLog").field("events", &inner.events.len()).field("path", &inner.storage.as_ref().map(|s| &s.path)).finish()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        AuditLog {
            inner: Mutex::new(Inner { events: Vec::new(), lines: Vec::new(), head: HeadAnchor::genesis(), storage: None }),
            clock: Box::new(Utc::now),
        }
    }

    /// Opens (or creates) a file-backed log. An existing log must verify
    /// against its head anchor.
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let storage_err = |source| AuditError::Storage { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(storage_err)?;
        }
        let report = verify_file(path).map_err(storage_err)?;
        if !report.intact() {
            return Err(AuditError::Corrupt(report));
        }
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(storage_err(e)),
        };
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        let events: Vec<AuditEvent> = lines.iter().filter_map(|l| parse_record(l)).collect();
        let head = events.last().map_or(HeadAnchor::genesis(), |e| HeadAnchor { count: events.len() as u64, head_hash: e.event_hash });
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(storage_err)?;
        let log = AuditLog {
            inner: Mutex::new(Inner { events, lines, head, storage: Some(Storage { path: path.to_path_buf(), file }) }),
            clock: Box::new(Utc::now),
        };
        log.write_head(&log.lock())?;
        Ok(log)
    }

    /// Replaces the timestamp source (tests use a fixed clock).
    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn write_head(&self, inner: &Inner) -> Result<(), AuditError> {
        let Some(storage) = &inner.storage else { return Ok(()) };
        let path = head_path(&storage.path);
        let tmp = path.with_extension("head.tmp");
        let err = |source| AuditError::Storage { path: path.clone(), source };
        fs::write(&tmp, inner.head.to_line()).map_err(err)?;
        fs::rename(&tmp, &path).map_err(err)?;
        Ok(())
    }

    pub fn append(&self, actor: Actor, action: &str, payload: &Value) -> Result<AuditEvent, AuditError> {
        let mut events = self.append_batch(vec![(actor, action.to_string(), payload.clone())])?;
        Ok(events.pop().expect("one event appended"))
    }

    /// Appends several events atomically: either all are durable or none
    /// are.
    pub fn append_batch(&self, entries: Vec<(Actor, String, Value)>) -> Result<Vec<AuditEvent>, AuditError> {
        for (actor, action, _) in &entries {
            if !valid_action(action) {
                return Err(AuditError::InvalidAction(action.clone()));
            }
            if let Actor::Operator(id) = actor {
                if !valid_operator_id(id) {
                    return Err(AuditError::InvalidActor(id.clone()));
                }
            }
        }
        let mut inner = self.lock();
        let mut prev = inner.head.head_hash;
        let mut seq = inner.head.count;
        let mut new_events = Vec::with_capacity(entries.len());
        let mut new_lines = Vec::with_capacity(entries.len());
        for (actor, action, payload) in entries {
            let payload_text = serde_json::to_string(&payload).expect("JSON values serialize");
            let payload_digest = ContentHash::of_bytes(payload_text.as_bytes());
            let timestamp = (self.clock)();
            let ts = format_timestamp(&timestamp);
            let actor_s = actor.to_string();
            let seq_s = seq.to_string();
            let event_hash = hash_header(&seq_s, &ts, &actor_s, &action, &payload_digest.to_hex(), &prev.to_hex());
            new_lines.push(format!("{seq_s}\t{ts}\t{actor_s}\t{action}\t{payload_digest}\t{prev}\t{event_hash}\t{payload_text}"));
            new_events.push(AuditEvent {
                seq,
                timestamp: DateTime::parse_from_rfc3339(&ts).expect("canonical timestamp").with_timezone(&Utc),
                actor,
                action,
                payload_digest,
                prev_hash: prev,
                event_hash,
                payload,
            });
            prev = event_hash;
            seq += 1;
        }
        if let Some(storage) = inner.storage.as_mut() {
            let mut buf = String::new();
            for line in &new_lines {
                buf.push_str(line);
                buf.push('\n');
            }
            let before = storage.file.metadata().map(|m| m.len()).ok();
            let result = storage.file.write_all(buf.as_bytes()).and_then(|_| storage.file.sync_data());
            if let Err(source) = result {
                if let Some(len) = before {
                    let _ = storage.file.set_len(len);
                }
                return Err(AuditError::Storage { path: storage.path.clone(), source });
            }
        }
        inner.events.extend(new_events.iter().cloned());
        inner.lines.extend(new_lines);
        inner.head = HeadAnchor { count: seq, head_hash: prev };
        self.write_head(&inner)?;
        Ok(new_events)
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.lock().events.clone()
    }

    pub fn head(&self) -> HeadAnchor {
        self.lock().head
    }

    /// The log exactly as persisted.
    pub fn serialized(&self) -> Vec<u8> {
        let inner = self.lock();
        let mut out = Vec::new();
        for line in &inner.lines {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        out
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.lock().storage.as_ref().map(|s| s.path.clone())
    }

    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditEvent> {
        self.lock().events.iter().filter(|e| filter.matches(e)).cloned().collect()
    }

    /// Recomputes every hash and link, and compares against the head anchor.
    pub fn verify(&self) -> ChainReport {
        let head = self.head();
        verify_chain_bytes(&self.serialized(), Some(&head))
    }
}

/// Convenience wrapper matching the other module-level operations.
pub fn verify_chain(log: &AuditLog) -> ChainReport {
    log.verify()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn fixed_log() -> AuditLog {
        let t = DateTime::parse_from_rfc3339("2026-01-02T03:04:05Z").unwrap().with_timezone(&Utc);
        AuditLog::in_memory().with_clock(move || t)
    }

    #[test]
    fn first_append_chains_from_genesis() {
        let log = fixed_log();
        let e = log.append(Actor::System, "Ingested", &json!({"doc_id": "d1"})).unwrap();
        assert_eq!(e.seq, 0);
        assert_eq!(e.prev_hash, GENESIS_HASH);
    }

    #[test]
    fn second_event_links_to_first_and_identical_payloads_differ() {
        let log = fixed_log();
        let a = log.append(Actor::System, "Note", &json!({"x": 1})).unwrap();
        let b = log.append(Actor::System, "Note", &json!({"x": 1})).unwrap();
        assert_eq!(b.seq, 1);
        assert_eq!(b.prev_hash, a.event_hash);
        assert_eq!(a.payload_digest, b.payload_digest);
        assert_ne!(a.event_hash, b.event_hash);
        // Independent recomputation of event 1's hash.
        let header = format!("1\t2026-01-02T03:04:05.000000Z\tsystem\tNote\t{}\t{}", b.payload_digest, a.event_hash);
        assert_eq!(ContentHash::of_bytes(header.as_bytes()), b.event_hash);
    }

    #[test]
    fn untouched_log_verifies() {
        let log = fixed_log();
        for i in 0..100 {
            log.append(Actor::operator("op-1"), "Step", &json!({"i": i})).unwrap();
        }
        let r = log.verify();
        assert!(r.intact());
        assert_eq!(r.events, 100);
    }

    #[test]
    fn byte_flip_in_digest_breaks_at_that_event() {
        let log = fixed_log();
        for i in 0..100 {
            log.append(Actor::System, "Step", &json!({"i": i})).unwrap();
        }
        let mut bytes = log.serialized();
        let starts: Vec<usize> = std::iter::once(0).chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1)).collect();
        let line37 = starts[37];
        let tabs: Vec<usize> = bytes[line37..].iter().enumerate().filter(|(_, &b)| b == b'\t').map(|(i, _)| i).take(5).collect();
        let digest_pos = line37 + tabs[3] + 1;
        bytes[digest_pos] ^= 0x01;
        let r = verify_chain_bytes(&bytes, Some(&log.head()));
        assert!(!r.chain_valid);
        assert_eq!(r.first_break.unwrap().seq, 37);
    }

    #[test]
    fn truncation_is_flagged_by_head_anchor() {
        let log = fixed_log();
        for i in 0..10 {
            log.append(Actor::System, "Step", &json!({"i": i})).unwrap();
        }
        let bytes = log.serialized();
        let cut = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        let r = verify_chain_bytes(&bytes[..cut], Some(&log.head()));
        assert!(r.chain_valid);
        assert_eq!(r.head_matches, Some(false));
        assert!(r.truncated);
        assert!(!r.intact());
    }

    #[test]
    fn query_filters() {
        let log = fixed_log();
        for i in 0..8u64 {
            let doc = if i % 2 == 0 { "a" } else { "b" };
            log.append(Actor::System, "Step", &json!({"doc_id": doc, "i": i})).unwrap();
        }
        let a = log.query(&AuditFilter::doc("a"));
        assert_eq!(a.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert!(log.query(&AuditFilter::doc("zzz")).is_empty());
        let range = log.query(&AuditFilter { seq_range: Some((2, 5)), ..Default::default() });
        assert_eq!(range.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn rejects_bad_tags_and_actors() {
        let log = fixed_log();
        assert!(matches!(log.append(Actor::System, "bad tag", &json!({})), Err(AuditError::InvalidAction(_))));
        assert!(matches!(log.append(Actor::operator(""), "Ok", &json!({})), Err(AuditError::InvalidActor(_))));
        assert!(log.is_empty());
    }

    #[test]
    fn file_backed_log_round_trips_and_detects_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::open(&path).unwrap();
            log.append(Actor::System, "A", &json!({"doc_id": "d"})).unwrap();
            log.append(Actor::operator("alice"), "B", &json!({"doc_id": "d"})).unwrap();
        }
        let reopened = AuditLog::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        let e = reopened.append(Actor::System, "C", &json!({})).unwrap();
        assert_eq!(e.seq, 2);
        assert!(verify_file(&path).unwrap().intact());
        drop(reopened);

        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x04;
        fs::write(&path, &bytes).unwrap();
        let report = verify_file(&path).unwrap();
        assert_eq!(report.first_break.as_ref().map(|b| b.seq), Some(0));
        assert!(matches!(AuditLog::open(&path), Err(AuditError::Corrupt(_))));
    }
}
