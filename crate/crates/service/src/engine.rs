//! The service operations, independent of HTTP. The CLI drives the same
//! [`Engine`] in-process.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use planloop_core::audit::{verify_file, Actor, AuditEvent, AuditFilter, AuditLog, ChainReport};
use planloop_core::docmodel::{ContentHash, DocumentBundle, TextSpan};
use planloop_core::pii::{detect_pii_with_result, verify_value, PiiCandidate, PiiCategory, PiiLocation, VerifierStatus};
use planloop_core::pipeline::{
    encode_png_base64, run_task, AttemptRecord, CostRecord, HttpProvider, PipelineError, Provider, ScriptedProvider, Suggestion, TaskConfig, TaskKind, TaskResult, ENV_PROVIDER_URL,
};
use planloop_core::redaction::{apply_redactions, commit_redaction, RedactionPlan, ScrubReport};
use planloop_core::review::{next_state, priority_cmp, ReviewAction, ReviewItem, ReviewPayload, ReviewSession, ReviewState};
use planloop_core::roi::{bundled_scenario, compute_roi, RoiInputs, RoiOutputs};
use planloop_core::vischeck::{evaluate_rule_pack, Detection, RuleOutcome, RulePack};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ErrorBody, ServiceError};
use crate::store::{valid_doc_id, Store};

pub const ENV_DATA_DIR: &str = "PLANLOOP_DATA_DIR";
pub const ENV_MOCK_PROVIDER: &str = "PLANLOOP_MOCK_PROVIDER";
pub const DEFAULT_DATA_DIR: &str = "planloop-data";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderChoice {
    /// Fixtures read by [`ScriptedProvider::from_dir`].
    Mock(PathBuf),
    /// [`HttpProvider::from_env`].
    Http,
    None,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub provider: ProviderChoice,
    pub rule_pack: RulePack,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig { data_dir: data_dir.into(), provider: ProviderChoice::None, rule_pack: RulePack::site_plan_default() }
    }

    pub fn with_mock_provider(mut self, dir: impl Into<PathBuf>) -> Self {
        self.provider = ProviderChoice::Mock(dir.into());
        self
    }

    /// Data directory from `PLANLOOP_DATA_DIR`; provider from
    /// `PLANLOOP_MOCK_PROVIDER`, else HTTP when `PLANLOOP_PROVIDER_URL` is set.
    pub fn from_env() -> Self {
        let data_dir = std::env::var_os(ENV_DATA_DIR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let mut config = ServiceConfig::new(data_dir);
        if let Some(dir) = std::env::var_os(ENV_MOCK_PROVIDER) {
            config.provider = ProviderChoice::Mock(dir.into());
        } else if std::env::var_os(ENV_PROVIDER_URL).is_some() {
            config.provider = ProviderChoice::Http;
        }
        config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    /// Status only moves forward: queued, running, then done or failed.
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!((self, next), (JobStatus::Queued, JobStatus::Running | JobStatus::Failed) | (JobStatus::Running, JobStatus::Done | JobStatus::Failed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub doc_id: String,
    pub task_kind: TaskKind,
    pub status: JobStatus,
    pub operator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<String>,
    #[serde(default)]
    pub item_ids: Vec<String>,
    #[serde(default)]
    pub attempts: Vec<AttemptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

/// What a finished job wrote to `results/<job_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutput {
    pub job_id: String,
    pub revision: u32,
    pub task: TaskResult,
    #[serde(default)]
    pub candidates: Vec<PiiCandidate>,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub rule_outcomes: Vec<RuleOutcome>,
    pub item_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_kind: TaskKind,
    #[serde(default)]
    pub rule_ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReceipt {
    pub doc_id: String,
    pub revision: u32,
    pub content_hash: ContentHash,
    pub pages: usize,
    pub spans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub revision: u32,
    pub content_hash: ContentHash,
    pub pages: usize,
    pub items_by_state: BTreeMap<ReviewState, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingItem {
    pub item_id: String,
    pub state: ReviewState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitSummary {
    pub doc_id: String,
    pub revision: u32,
    pub final_hash: ContentHash,
    pub committed_items: Vec<String>,
    pub removed_runs: usize,
    pub widened_spans: Vec<String>,
    pub scrub_report: ScrubReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiiOverlay {
    pub item_id: String,
    pub category: PiiCategory,
    pub state: ReviewState,
    pub boxes: Vec<PiiLocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub doc_id: String,
    pub revision: u32,
    pub content_hash: ContentHash,
    pub page_index: u32,
    pub width: u32,
    pub height: u32,
    pub image_png_base64: String,
    pub spans: Vec<TextSpan>,
    pub detections: Vec<Detection>,
    pub rule_outcomes: Vec<RuleOutcome>,
    pub pii: Vec<PiiOverlay>,
}

#[derive(Debug, Clone, Copy)]
struct DocState {
    revision: u32,
    hash: ContentHash,
    pages: usize,
}

struct TaskConfigs {
    extraction: TaskConfig,
    pii: TaskConfig,
    visual: TaskConfig,
}

pub struct Engine {
    store: Store,
    audit: AuditLog,
    session: ReviewSession,
    provider: Option<Arc<dyn Provider>>,
    rule_pack: RulePack,
    configs: TaskConfigs,
    docs: RwLock<BTreeMap<String, DocState>>,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    next_job: AtomicU64,
    doc_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn require_operator(operator_id: &str) -> Result<&str, ServiceError> {
    let op = operator_id.trim();
    if op.is_empty() {
        return Err(ServiceError::MissingOperator);
    }
    Ok(op)
}

fn not_found(what: &'static str, id: &str) -> ServiceError {
    ServiceError::NotFound { what, id: id.to_string() }
}

/// Rebuilds one transition from its audit record.
fn action_from_event(e: &AuditEvent) -> Option<ReviewAction> {
    Some(match e.payload.get("action")?.as_str()? {
        "confirm" => ReviewAction::Confirm,
        "reject" => ReviewAction::Reject,
        "commit" => ReviewAction::Commit,
        "edit" => ReviewAction::Edit(e.payload.get("edited_value")?.as_str()?.to_string()),
        _ => return None,
    })
}

impl Engine {
    /// Opens the data directory and recovers state from its logs.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = Store::open(&config.data_dir)?;
        let audit = AuditLog::open(&store.audit_path())?;
        let provider: Option<Arc<dyn Provider>> = match &config.provider {
            ProviderChoice::Mock(dir) => {
                Some(Arc::new(ScriptedProvider::from_dir(dir).map_err(|e| ServiceError::BadRequest(format!("mock provider {}: {e}", dir.display())))?))
            }
            ProviderChoice::Http => Some(Arc::new(HttpProvider::from_env().map_err(|e| ServiceError::BadRequest(e.to_string()))?)),
            ProviderChoice::None => None,
        };
        let engine = Engine {
            store,
            audit,
            session: ReviewSession::new(),
            provider,
            rule_pack: config.rule_pack,
            configs: TaskConfigs {
                extraction: TaskConfig::bundled(TaskKind::Extraction),
                pii: TaskConfig::bundled(TaskKind::PiiDetection),
                visual: TaskConfig::bundled(TaskKind::VisualDetection),
            },
            docs: RwLock::new(BTreeMap::new()),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            doc_locks: Mutex::new(HashMap::new()),
        };
        engine.recover_documents()?;
        engine.recover_review()?;
        engine.recover_jobs()?;
        Ok(engine)
    }

    /// A staged revision is kept only if the audit log vouches for its hash.
    fn recover_documents(&self) -> Result<(), ServiceError> {
        let events = self.audit.events();
        let vouched = |doc_id: &str, revision: u32, hash: &ContentHash| {
            let (action, field) = if revision == 0 { ("Ingested", "content_hash") } else { ("FinalHash", "final_hash") };
            events.iter().any(|e| e.action == action && e.doc_id() == Some(doc_id) && e.payload.get(field).and_then(Value::as_str) == Some(hash.to_hex().as_str()))
        };
        let mut docs = self.docs.write().unwrap_or_else(|p| p.into_inner());
        for (doc_id, (revisions, pending)) in self.store.scan()? {
            let mut top = revisions.last().copied();
            if let Some(rev) = pending {
                match self.store.load_pending(&doc_id, rev)? {
                    Some(b) if top.is_none_or(|t| rev > t) && vouched(&doc_id, rev, &planloop_core::content_hash(&b)) => {
                        self.store.promote(&doc_id, rev)?;
                        top = Some(rev);
                    }
                    _ => self.store.discard_pending(&doc_id, rev),
                }
            }
            let Some(rev) = top else { continue };
            let bundle = self.store.load_revision(&doc_id, rev)?;
            docs.insert(doc_id, DocState { revision: rev, hash: planloop_core::content_hash(&bundle), pages: bundle.pages.len() });
        }
        Ok(())
    }

    /// Loads the last snapshot of every item, then replays any transition
    /// the audit log holds beyond it.
    fn recover_review(&self) -> Result<(), ServiceError> {
        let snapshots: Vec<ReviewItem> = self.store.read_review()?;
        let mut latest: BTreeMap<String, ReviewItem> = BTreeMap::new();
        for s in snapshots {
            latest.insert(s.item_id.clone(), s);
        }
        let mut transitions: BTreeMap<String, Vec<AuditEvent>> = BTreeMap::new();
        for e in self.audit.query(&AuditFilter { action: Some("ReviewTransition".into()), ..Default::default() }) {
            if let Some(id) = e.payload.get("item_id").and_then(Value::as_str) {
                transitions.entry(id.to_string()).or_default().push(e);
            }
        }
        for (id, item) in latest.iter_mut() {
            let logged = transitions.get(id).map_or(&[][..], Vec::as_slice);
            if logged.len() <= item.history.len() {
                continue;
            }
            for e in &logged[item.history.len()..] {
                let action = action_from_event(e).ok_or_else(|| ServiceError::Storage(format!("review log is behind the audit log for {id} and event {} cannot be replayed", e.seq)))?;
                let operator = e.actor.operator_id().unwrap_or_default().to_string();
                *item = item.apply(&action, &operator, e.timestamp).map_err(|err| ServiceError::Storage(format!("replaying event {} on {id}: {err}", e.seq)))?;
            }
            self.store.append_review(item)?;
        }
        self.session.upsert(latest.into_values());
        Ok(())
    }

    fn recover_jobs(&self) -> Result<(), ServiceError> {
        let snapshots: Vec<JobRecord> = self.store.read_jobs()?;
        let mut jobs = lock(&self.jobs);
        for j in snapshots {
            jobs.insert(j.job_id.clone(), j);
        }
        let max = jobs.keys().filter_map(|k| k.strip_prefix("job-").and_then(|n| n.parse::<u64>().ok())).max().unwrap_or(0);
        self.next_job.store(max + 1, Ordering::SeqCst);
        for j in jobs.values_mut().filter(|j| !j.status.is_finished()) {
            j.status = JobStatus::Failed;
            j.finished_at = Some(Utc::now());
            j.error = Some(ErrorBody { code: "interrupted".into(), message: "the service stopped before the job finished".into(), details: Value::Null });
            self.store.append_job(j)?;
            self.audit.append(Actor::System, "JobInterrupted", &json!({ "doc_id": j.doc_id, "job_id": j.job_id }))?;
        }
        Ok(())
    }

    fn doc_lock(&self, doc_id: &str) -> Arc<Mutex<()>> {
        lock(&self.doc_locks).entry(doc_id.to_string()).or_default().clone()
    }

    fn doc_state(&self, doc_id: &str) -> Result<DocState, ServiceError> {
        self.docs.read().unwrap_or_else(|p| p.into_inner()).get(doc_id).copied().ok_or_else(|| not_found("document", doc_id))
    }

    fn current_bundle(&self, doc_id: &str) -> Result<(u32, DocumentBundle), ServiceError> {
        let state = self.doc_state(doc_id)?;
        Ok((state.revision, self.store.load_revision(doc_id, state.revision)?))
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn data_dir(&self) -> &std::path::Path {
        self.store.root()
    }

    pub fn rule_pack(&self) -> &RulePack {
        &self.rule_pack
    }

    pub fn has_provider(&self) -> bool {
        self.provider.is_some()
    }

    pub fn ingest(&self, bundle: &DocumentBundle, operator_id: &str) -> Result<IngestReceipt, ServiceError> {
        let op = require_operator(operator_id)?;
        if !valid_doc_id(&bundle.doc_id) {
            return Err(ServiceError::BadRequest(format!("doc_id {:?} must use letters, digits, '.', '-' or '_'", bundle.doc_id)));
        }
        bundle.validate()?;
        let doc_lock = self.doc_lock(&bundle.doc_id);
        let _guard = lock(&doc_lock);
        if self.doc_state(&bundle.doc_id).is_ok() {
            return Err(ServiceError::AlreadyExists(bundle.doc_id.clone()));
        }
        let hash = self.store.stage_revision(bundle, 0)?;
        let spans = bundle.spans().count();
        let payload = json!({ "doc_id": bundle.doc_id, "content_hash": hash.to_hex(), "pages": bundle.pages.len(), "spans": spans, "provenance": bundle.provenance });
        if let Err(e) = self.audit.append(Actor::operator(op), "Ingested", &payload) {
            self.store.discard_pending(&bundle.doc_id, 0);
            return Err(e.into());
        }
        self.store.promote(&bundle.doc_id, 0)?;
        self.docs.write().unwrap_or_else(|p| p.into_inner()).insert(bundle.doc_id.clone(), DocState { revision: 0, hash, pages: bundle.pages.len() });
        Ok(IngestReceipt { doc_id: bundle.doc_id.clone(), revision: 0, content_hash: hash, pages: bundle.pages.len(), spans })
    }

    pub fn documents(&self) -> Vec<DocumentSummary> {
        let ids: Vec<String> = self.docs.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        ids.iter().filter_map(|id| self.document(id).ok()).collect()
    }

    pub fn document(&self, doc_id: &str) -> Result<DocumentSummary, ServiceError> {
        let s = self.doc_state(doc_id)?;
        let mut items_by_state = BTreeMap::new();
        for i in self.session.items_for(doc_id) {
            *items_by_state.entry(i.state).or_insert(0) += 1;
        }
        Ok(DocumentSummary { doc_id: doc_id.to_string(), revision: s.revision, content_hash: s.hash, pages: s.pages, items_by_state })
    }

    pub fn bundle(&self, doc_id: &str) -> Result<DocumentBundle, ServiceError> {
        self.current_bundle(doc_id).map(|(_, b)| b)
    }

    pub fn bundle_revision(&self, doc_id: &str, revision: u32) -> Result<DocumentBundle, ServiceError> {
        let s = self.doc_state(doc_id)?;
        if revision > s.revision {
            return Err(not_found("revision", &format!("{doc_id}@{revision}")));
        }
        self.store.load_revision(doc_id, revision)
    }

    fn update_job(&self, job_id: &str, f: impl FnOnce(&mut JobRecord)) -> Result<JobRecord, ServiceError> {
        let mut jobs = lock(&self.jobs);
        let job = jobs.get_mut(job_id).ok_or_else(|| not_found("job", job_id))?;
        let before = job.status;
        let mut next = job.clone();
        f(&mut next);
        if next.status != before && !before.can_become(next.status) {
            return Err(ServiceError::Conflict { code: "job_state", message: format!("job {job_id} cannot go from {before:?} to {:?}", next.status), details: Value::Null });
        }
        self.store.append_job(&next)?;
        *job = next.clone();
        Ok(next)
    }

    /// Records a queued job. [`Engine::run_job`] executes it.
    pub fn create_job(&self, doc_id: &str, request: &TaskRequest, operator_id: &str) -> Result<JobRecord, ServiceError> {
        let op = require_operator(operator_id)?;
        self.doc_state(doc_id)?;
        if self.provider.is_none() {
            return Err(ServiceError::ProviderUnavailable);
        }
        if let Some(ids) = &request.rule_ids {
            if request.task_kind != TaskKind::VisualDetection {
                return Err(ServiceError::BadRequest("rule_ids apply only to visual_detection tasks".into()));
            }
            if let Some(bad) = ids.iter().find(|id| !self.rule_pack.rules.iter().any(|r| &r.rule_id == *id)) {
                return Err(ServiceError::BadRequest(format!("unknown rule {bad:?} in pack {}", self.rule_pack.pack_id)));
            }
        }
        let job_id = format!("job-{:06}", self.next_job.fetch_add(1, Ordering::SeqCst));
        let record = JobRecord {
            job_id: job_id.clone(),
            doc_id: doc_id.to_string(),
            task_kind: request.task_kind,
            status: JobStatus::Queued,
            operator_id: op.to_string(),
            rule_ids: request.rule_ids.clone(),
            result_ref: None,
            item_ids: Vec::new(),
            attempts: Vec::new(),
            cost: None,
            error: None,
            created_at: Utc::now(),
            started_at: None,
            finished_at: None,
        };
        self.audit.append(Actor::operator(op), "TaskRequested", &json!({ "doc_id": doc_id, "job_id": job_id, "task_kind": request.task_kind, "rule_ids": request.rule_ids }))?;
        self.store.append_job(&record)?;
        lock(&self.jobs).insert(job_id, record.clone());
        Ok(record)
    }

    /// Runs a queued job to completion. Pipeline failures finish the job as
    /// `failed`; only storage and audit problems are returned as errors.
    pub fn run_job(&self, job_id: &str) -> Result<JobRecord, ServiceError> {
        let job = self.update_job(job_id, |j| {
            j.status = JobStatus::Running;
            j.started_at = Some(Utc::now());
        })?;
        match self.execute(&job) {
            Ok((output, result_ref)) => self.update_job(job_id, |j| {
                j.status = JobStatus::Done;
                j.finished_at = Some(Utc::now());
                j.result_ref = Some(result_ref);
                j.item_ids = output.item_ids.clone();
                j.attempts = output.task.attempts_log.clone();
                j.cost = Some(output.task.cost.clone());
            }),
            Err(failure) => {
                let (error, attempts, cost) = match failure {
                    JobFailure::Pipeline(PipelineError::TaskFailed(f)) => {
                        let message = format!("task failed after {} attempt(s)", f.attempts.len());
                        (ErrorBody { code: "task_failed".into(), message, details: Value::Null }, f.attempts, Some(f.cost))
                    }
                    JobFailure::Pipeline(PipelineError::Audit(a)) => return Err(a.into()),
                    JobFailure::Pipeline(p) => (ServiceError::from(p).body(), Vec::new(), None),
                    JobFailure::Service(e @ (ServiceError::Storage(_) | ServiceError::Audit(_))) => return Err(e),
                    JobFailure::Service(e) => (e.body(), Vec::new(), None),
                };
                self.update_job(job_id, |j| {
                    j.status = JobStatus::Failed;
                    j.finished_at = Some(Utc::now());
                    j.error = Some(error);
                    j.attempts = attempts;
                    j.cost = cost;
                })
            }
        }
    }

    /// Creates and runs a job in the calling thread.
    pub fn run_task_direct(&self, doc_id: &str, request: &TaskRequest, operator_id: &str) -> Result<JobRecord, ServiceError> {
        let job = self.create_job(doc_id, request, operator_id)?;
        self.run_job(&job.job_id)
    }

    fn execute(&self, job: &JobRecord) -> Result<(JobOutput, String), JobFailure> {
        let (revision, bundle) = self.current_bundle(&job.doc_id)?;
        let provider = self.provider.clone().ok_or(ServiceError::ProviderUnavailable)?;
        let mut candidates = Vec::new();
        let mut detections = Vec::new();
        let mut rule_outcomes = Vec::new();
        let (task, payloads) = match job.task_kind {
            TaskKind::Extraction => {
                let task = run_task(&bundle, &self.configs.extraction, provider.as_ref(), &self.audit)?;
                let payloads = task.suggestions.iter().filter_map(|s| if let Suggestion::Field(f) = s { Some(ReviewPayload::Field(f.clone())) } else { None }).collect();
                (task, payloads)
            }
            TaskKind::PiiDetection => {
                let (task, found) = detect_pii_with_result(&bundle, &self.configs.pii, provider.as_ref(), &self.audit)?;
                candidates = found;
                (task, candidates.iter().cloned().map(ReviewPayload::Pii).collect())
            }
            TaskKind::VisualDetection => {
                let task = run_task(&bundle, &self.configs.visual, provider.as_ref(), &self.audit)?;
                detections = task.suggestions.iter().filter_map(|s| if let Suggestion::Detection(d) = s { Some(d.clone()) } else { None }).collect();
                let mut pack = self.rule_pack.clone();
                if let Some(ids) = &job.rule_ids {
                    pack.rules.retain(|r| ids.contains(&r.rule_id));
                }
                rule_outcomes = evaluate_rule_pack(&bundle, &pack, &detections)
                    .map_err(|e| ServiceError::Unprocessable { code: "rule_pack_failed", message: e.to_string(), details: Value::Null })?;
                (task, rule_outcomes.iter().cloned().map(ReviewPayload::Rule).collect())
            }
        };
        let doc_lock = self.doc_lock(&job.doc_id);
        let _guard = lock(&doc_lock);
        let items = self.session.add_suggestions(&job.doc_id, payloads);
        for item in &items {
            self.store.append_review(item)?;
        }
        let item_ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
        self.audit
            .append(Actor::System, "SuggestionsQueued", &json!({ "doc_id": job.doc_id, "job_id": job.job_id, "revision": revision, "item_ids": item_ids }))
            .map_err(ServiceError::from)?;
        let output = JobOutput { job_id: job.job_id.clone(), revision, task, candidates, detections, rule_outcomes, item_ids };
        let result_ref = self.store.write_result(&job.job_id, &output)?;
        Ok((output, result_ref))
    }

    pub fn job(&self, job_id: &str) -> Result<JobRecord, ServiceError> {
        lock(&self.jobs).get(job_id).cloned().ok_or_else(|| not_found("job", job_id))
    }

    pub fn jobs_for(&self, doc_id: &str) -> Result<Vec<JobRecord>, ServiceError> {
        self.doc_state(doc_id)?;
        Ok(lock(&self.jobs).values().filter(|j| j.doc_id == doc_id).cloned().collect())
    }

    pub fn job_output(&self, job_id: &str) -> Result<Option<JobOutput>, ServiceError> {
        self.job(job_id)?;
        self.store.read_result(job_id)
    }

    pub fn items(&self, doc_id: &str) -> Result<Vec<ReviewItem>, ServiceError> {
        self.doc_state(doc_id)?;
        Ok(self.session.items_for(doc_id))
    }

    /// Open items (not rejected or committed) in review priority order.
    pub fn queue(&self, doc_id: &str) -> Result<Vec<ReviewItem>, ServiceError> {
        let mut items: Vec<ReviewItem> = self.items(doc_id)?.into_iter().filter(|i| !i.state.is_terminal()).collect();
        items.sort_by(priority_cmp);
        Ok(items)
    }

    pub fn item(&self, item_id: &str) -> Result<ReviewItem, ServiceError> {
        self.session.get(item_id).ok_or_else(|| not_found("review item", item_id))
    }

    /// One operator transition. PII items reach `Committed` only through
    /// [`Engine::commit`], which performs the redaction.
    pub fn transition(&self, item_id: &str, action: &ReviewAction, operator_id: &str, expected: Option<ReviewState>) -> Result<ReviewItem, ServiceError> {
        let op = require_operator(operator_id)?;
        let item = self.item(item_id)?;
        let doc_lock = self.doc_lock(&item.doc_id);
        let _guard = lock(&doc_lock);
        let current = self.item(item_id)?;
        if matches!(action, ReviewAction::Commit) && matches!(current.payload, ReviewPayload::Pii(_)) && next_state(current.state, action).is_some() {
            return Err(ServiceError::Conflict {
                code: "redaction_required",
                message: format!("PII item {item_id} is committed by the document commit, which applies the redaction"),
                details: json!({ "item_id": item_id, "doc_id": current.doc_id }),
            });
        }
        let next = self.session.apply(item_id, action, op, expected, &self.audit)?;
        self.store.append_review(&next)?;
        Ok(next)
    }

    fn blocking_items(selected: &[ReviewItem], plan: &RedactionPlan) -> Vec<BlockingItem> {
        let mut out = Vec::new();
        for (item, planned) in selected.iter().zip(&plan.items) {
            let reason = if !matches!(item.state, ReviewState::Confirmed | ReviewState::Edited) {
                format!("item is {}; it must be confirmed or edited first", item.state)
            } else if planned.category.verifier_blocks_commit() && verify_value(planned.category, &planned.value) == VerifierStatus::Failed {
                "value fails format verification".to_string()
            } else if planned.locations.is_empty() {
                "value has no location in the document".to_string()
            } else {
                continue;
            };
            out.push(BlockingItem { item_id: item.item_id.clone(), state: item.state, reason });
        }
        out
    }

    /// Redacts and commits approved PII items of one document. Without
    /// `item_ids`, every open PII item is included, so any still `Suggested`
    /// blocks the commit.
    pub fn commit(&self, doc_id: &str, operator_id: &str, item_ids: Option<&[String]>) -> Result<CommitSummary, ServiceError> {
        let op = require_operator(operator_id)?;
        let doc_lock = self.doc_lock(doc_id);
        let _guard = lock(&doc_lock);
        let (revision, bundle) = self.current_bundle(doc_id)?;
        let all = self.session.items_for(doc_id);
        let is_pii = |i: &ReviewItem| matches!(i.payload, ReviewPayload::Pii(_));
        let selected: Vec<ReviewItem> = match item_ids {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    let item = all.iter().find(|i| &i.item_id == id).ok_or_else(|| not_found("review item", id))?;
                    if !is_pii(item) {
                        return Err(ServiceError::BadRequest(format!("item {id} is not a PII item")));
                    }
                    Ok(item.clone())
                })
                .collect::<Result<_, _>>()?,
            None => all.iter().filter(|i| is_pii(i) && !i.state.is_terminal()).cloned().collect(),
        };
        if selected.is_empty() {
            return Err(ServiceError::Unprocessable { code: "nothing_to_commit", message: format!("document {doc_id} has no PII items to commit"), details: Value::Null });
        }
        let plan = RedactionPlan::from_review(&bundle, &selected, op, Utc::now());
        let blocking = Self::blocking_items(&selected, &plan);
        if !blocking.is_empty() {
            return Err(ServiceError::Unprocessable { code: "commit_blocked", message: format!("{} item(s) block the commit", blocking.len()), details: json!({ "blocking": blocking }) });
        }
        // The new revision is on disk before the audit records it, so a crash
        // never leaves a vouched hash without its file.
        let next = revision + 1;
        let staged = apply_redactions(&bundle, &plan)?;
        let staged_hash = self.store.stage_revision(&staged.new_bundle, next)?;
        let result = match commit_redaction(&bundle, &plan, &self.session, &self.audit) {
            Ok(r) => r,
            Err(e) => {
                self.store.discard_pending(doc_id, next);
                return Err(e.into());
            }
        };
        if result.final_hash != staged_hash {
            self.store.stage_revision(&result.new_bundle, next)?;
        }
        self.store.promote(doc_id, next)?;
        self.docs.write().unwrap_or_else(|p| p.into_inner()).insert(doc_id.to_string(), DocState { revision: next, hash: result.final_hash, pages: result.new_bundle.pages.len() });
        let committed: Vec<String> = plan.items.iter().map(|p| p.item_id.clone()).collect();
        for id in &committed {
            self.store.append_review(&self.item(id)?)?;
        }
        Ok(CommitSummary {
            doc_id: doc_id.to_string(),
            revision: next,
            final_hash: result.final_hash,
            committed_items: committed,
            removed_runs: result.removed_texts.len(),
            widened_spans: result.widened_spans,
            scrub_report: result.scrub_report,
        })
    }

    fn latest_visual_output(&self, doc_id: &str) -> Result<Option<JobOutput>, ServiceError> {
        let latest = lock(&self.jobs).values().filter(|j| j.doc_id == doc_id && j.task_kind == TaskKind::VisualDetection && j.status == JobStatus::Done).map(|j| j.job_id.clone()).max();
        match latest {
            Some(id) => self.store.read_result(&id),
            None => Ok(None),
        }
    }

    pub fn preview(&self, doc_id: &str, page_index: u32) -> Result<Preview, ServiceError> {
        let (revision, bundle) = self.current_bundle(doc_id)?;
        let page = bundle.page(page_index).ok_or_else(|| not_found("page", &format!("{doc_id}/{page_index}")))?;
        let visual = self.latest_visual_output(doc_id)?;
        let detections = visual.as_ref().map(|v| v.detections.iter().filter(|d| d.page_index == page_index).cloned().collect()).unwrap_or_default();
        let rule_outcomes = visual.map(|v| v.rule_outcomes).unwrap_or_default();
        let pii = self
            .session
            .items_for(doc_id)
            .into_iter()
            .filter_map(|i| match &i.payload {
                ReviewPayload::Pii(c) => {
                    let boxes: Vec<PiiLocation> = c.locations.iter().filter(|l| l.page_index == page_index).cloned().collect();
                    (!boxes.is_empty()).then(|| PiiOverlay { item_id: i.item_id.clone(), category: c.category, state: i.state, boxes })
                }
                _ => None,
            })
            .collect();
        Ok(Preview {
            doc_id: doc_id.to_string(),
            revision,
            content_hash: planloop_core::content_hash(&bundle),
            page_index,
            width: page.width,
            height: page.height,
            image_png_base64: encode_png_base64(&page.image),
            spans: page.spans.clone(),
            detections,
            rule_outcomes,
            pii,
        })
    }

    pub fn raster_png(&self, doc_id: &str, page_index: u32) -> Result<Vec<u8>, ServiceError> {
        let (_, bundle) = self.current_bundle(doc_id)?;
        let page = bundle.page(page_index).ok_or_else(|| not_found("page", &format!("{doc_id}/{page_index}")))?;
        let mut out = std::io::Cursor::new(Vec::new());
        page.image.write_to(&mut out, image::ImageFormat::Png).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn audit_events(&self, doc_id: &str, action: Option<&str>) -> Result<Vec<AuditEvent>, ServiceError> {
        self.doc_state(doc_id)?;
        Ok(self.audit.query(&AuditFilter { doc_id: Some(doc_id.to_string()), action: action.map(str::to_string), ..Default::default() }))
    }

    /// Verifies the log file as it is on disk, not the in-memory copy.
    pub fn verify_audit(&self) -> Result<ChainReport, ServiceError> {
        let path = self.store.audit_path();
        verify_file(&path).map_err(|e| ServiceError::storage(path.display(), e))
    }

    /// Records an operator's assessment of the visual-check outcomes. Nothing
    /// else changes.
    pub fn assessment_note(&self, doc_id: &str, operator_id: &str, note: &str, rule_ids: &[String]) -> Result<AuditEvent, ServiceError> {
        let op = require_operator(operator_id)?;
        self.doc_state(doc_id)?;
        if note.trim().is_empty() {
            return Err(ServiceError::BadRequest("note must not be empty".into()));
        }
        let mut outcomes = BTreeMap::new();
        for item in self.session.items_for(doc_id) {
            if let ReviewPayload::Rule(r) = &item.payload {
                outcomes.insert(r.rule_id.clone(), json!({ "item_id": item.item_id, "satisfied": r.satisfied, "state": item.state }));
            }
        }
        if let Some(bad) = rule_ids.iter().find(|id| !outcomes.contains_key(*id)) {
            return Err(ServiceError::BadRequest(format!("document {doc_id} has no outcome for rule {bad:?}")));
        }
        if !rule_ids.is_empty() {
            outcomes.retain(|k, _| rule_ids.contains(k));
        }
        Ok(self.audit.append(Actor::operator(op), "AssessmentNote", &json!({ "doc_id": doc_id, "note": note.trim(), "outcomes": outcomes }))?)
    }

    pub fn roi(inputs: &RoiInputs) -> Result<RoiOutputs, ServiceError> {
        inputs.validate().map_err(|e| ServiceError::Unprocessable { code: "invalid_roi_inputs", message: e.to_string(), details: Value::Null })?;
        Ok(compute_roi(inputs))
    }

    pub fn roi_scenario(name: &str) -> Result<RoiInputs, ServiceError> {
        bundled_scenario(name).ok_or_else(|| not_found("scenario", name))
    }
}

enum JobFailure {
    Pipeline(PipelineError),
    Service(ServiceError),
}

impl From<PipelineError> for JobFailure {
    fn from(e: PipelineError) -> Self {
        JobFailure::Pipeline(e)
    }
}

impl From<ServiceError> for JobFailure {
    fn from(e: ServiceError) -> Self {
        JobFailure::Service(e)
    }
}
