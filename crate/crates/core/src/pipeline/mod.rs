//! Configurable pre-processing, provider call, and post-processing with a
//! single fallback retry, cost accounting, and audit recording.

mod config;
mod cost;
mod provider;
pub mod schema;

use std::collections::BTreeMap;

use image::{imageops, GrayImage};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{placeholders, render_template, ConfigError, FilterRule, Locator, ModelTier, PostAction, PreAction, ProviderPath, TaskConfig, TaskKind};
pub use cost::{account_cost, CostRecord};
pub use provider::{
    encode_png_base64, fixture_path, invoke, write_fixture, Fixture, HttpProvider, Provider, ProviderError, ProviderRequest, ProviderResponse, RecordedRequest,
    ScriptedProvider, DEFAULT_TIMEOUT, ENV_PROVIDER_KEY, ENV_PROVIDER_TIMEOUT, ENV_PROVIDER_URL,
};

use crate::audit::{Actor, AuditError, AuditLog};
use crate::docmodel::{BoundingBox, ContentHash, DocumentBundle};
use crate::extraction::{parse_suggestions, FieldStatus, FieldSuggestion};
use crate::pii::{ClaimedLocation, ClaimedPii, PiiCategory};
use crate::vischeck::{Detection, RegionSelector};

/// A task-kind specific proposal produced by a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Suggestion {
    Field(FieldSuggestion),
    Pii(ClaimedPii),
    Detection(Detection),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    TransportFailed,
    InvalidResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Primary,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u8,
    pub prompt_variant: PromptVariant,
    pub provider_path: String,
    pub outcome: AttemptOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub tool_calls: u64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub doc_id: String,
    pub task_kind: TaskKind,
    pub suggestions: Vec<Suggestion>,
    pub cost: CostRecord,
    pub attempts_log: Vec<AttemptRecord>,
    pub audit_refs: Vec<u64>,
    pub validated_output: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub doc_id: String,
    pub task_kind: TaskKind,
    pub attempts: Vec<AttemptRecord>,
    pub cost: CostRecord,
    pub audit_refs: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("input rejected: {0}")]
    Input(String),
    #[error("task failed after {} attempt(s)", .0.attempts.len())]
    TaskFailed(Box<TaskFailure>),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

struct Prepared {
    vars: BTreeMap<String, String>,
    images: Vec<GrayImage>,
}

fn page_text(bundle: &DocumentBundle) -> String {
    let mut out = String::new();
    for page in &bundle.pages {
        out.push_str(&format!("[page {}]\n", page.index));
        for s in &page.spans {
            out.push_str(&format!("{} [{},{},{},{}]: {}\n", s.span_id, s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h, s.text));
        }
    }
    out
}

fn task_fields(config: &TaskConfig) -> String {
    match config.task_kind {
        TaskKind::Extraction => config.metadata_schema.as_ref().map(|s| s.fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(", ")).unwrap_or_default(),
        TaskKind::PiiDetection => PiiCategory::ALL.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "),
        TaskKind::VisualDetection => "north_point, scale_bar, red_line".into(),
    }
}

fn run_pre_action(action: &PreAction, bundle: &DocumentBundle, config: &TaskConfig, prep: &mut Prepared) -> Result<Value, PipelineError> {
    let mut set = |k: &str, v: String| {
        prep.vars.insert(k.to_string(), v);
    };
    match action {
        PreAction::RenderPage { pages } => {
            let indices: Vec<u32> = pages.clone().unwrap_or_else(|| bundle.pages.iter().map(|p| p.index).collect());
            for &i in &indices {
                let page = bundle.page(i).ok_or_else(|| PipelineError::Input(format!("render_page: no page {i}")))?;
                prep.images.push(page.image.clone());
            }
            set("pages", indices.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
            set("page_count", indices.len().to_string());
            Ok(json!({"pages": indices}))
        }
        PreAction::CropRegionOfInterest { page, bbox, locator } => {
            let p = bundle.page(*page).ok_or_else(|| PipelineError::Input(format!("crop_region_of_interest: no page {page}")))?;
            let region = match (bbox, locator) {
                (Some(b), _) => b.clip(p.width, p.height).ok_or_else(|| PipelineError::Input("crop box lies outside the page".into()))?,
                (None, Some(l)) => {
                    let sel = match l {
                        Locator::TopBand => RegionSelector::TopBand,
                        Locator::TitleBlock => RegionSelector::TitleBlock,
                        Locator::FullPage => RegionSelector::All,
                    };
                    sel.region_on(p).expect("page-independent selectors cover every page")
                }
                (None, None) => return Err(PipelineError::Config("crop needs a bbox or locator".into())),
            };
            prep.images.push(imageops::crop_imm(&p.image, region.x, region.y, region.w, region.h).to_image());
            set("region", format!("page {page} at {},{},{},{}", region.x, region.y, region.w, region.h));
            Ok(json!({"page": page, "region": region}))
        }
        PreAction::BuildPrompt { template_id } => {
            set("doc_id", bundle.doc_id.clone());
            set("page_text", page_text(bundle));
            set("schema", config.response_schema.clone());
            set("task", config.task_kind.to_string());
            set("fields", task_fields(config));
            Ok(json!({"template_id": template_id}))
        }
    }
}

fn to_bbox(v: &Value) -> Option<BoundingBox> {
    let a: [u32; 4] = serde_json::from_value(v.clone()).ok()?;
    BoundingBox::new(a[0], a[1], a[2], a[3]).ok()
}

/// Converts a schema-valid response into suggestions.
fn normalize(config: &TaskConfig, value: &Value) -> Vec<Suggestion> {
    match config.task_kind {
        TaskKind::Extraction => {
            let schema = config.metadata_schema.as_ref().expect("validated extraction config has a schema");
            parse_suggestions(value, schema).into_iter().map(Suggestion::Field).collect()
        }
        TaskKind::PiiDetection => value["items"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|item| {
                let category = PiiCategory::parse(item["category"].as_str()?)?;
                let locations = item["locations"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|l| Some(ClaimedLocation { page: l["page"].as_u64()? as u32, bbox: to_bbox(&l["bbox"])? }))
                    .collect();
                Some(Suggestion::Pii(ClaimedPii { category, value: item["value"].as_str()?.to_string(), confidence: item["confidence"].as_f64()?, locations }))
            })
            .collect(),
        TaskKind::VisualDetection => value["detections"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|d| {
                Some(Suggestion::Detection(Detection {
                    label: d["label"].as_str()?.to_string(),
                    bbox: to_bbox(&d["bbox"])?,
                    score: d["score"].as_f64()?,
                    page_index: d["page"].as_u64()? as u32,
                }))
            })
            .collect(),
    }
}

/// Applies one heuristic filter. Metadata field suggestions are never
/// dropped, so every schema field still reaches review.
fn apply_filter(rule: FilterRule, min: Option<f64>, bundle: &DocumentBundle, items: Vec<Suggestion>) -> Vec<Suggestion> {
    items
        .into_iter()
        .filter_map(|s| match (rule, s) {
            (FilterRule::DropEmpty, Suggestion::Pii(p)) if p.category.is_text_bearing() && p.value.trim().is_empty() => None,
            (FilterRule::MinConfidence, Suggestion::Pii(p)) if p.confidence < min.unwrap_or(0.0) => None,
            (FilterRule::MinConfidence, Suggestion::Detection(d)) if d.score < min.unwrap_or(0.0) => None,
            (FilterRule::ClipToPage, Suggestion::Pii(mut p)) => {
                p.locations = p
                    .locations
                    .into_iter()
                    .filter_map(|l| {
                        let page = bundle.page(l.page)?;
                        Some(ClaimedLocation { page: l.page, bbox: l.bbox.clip(page.width, page.height)? })
                    })
                    .collect();
                Some(Suggestion::Pii(p))
            }
            (FilterRule::ClipToPage, Suggestion::Detection(mut d)) => {
                let page = bundle.page(d.page_index)?;
                d.bbox = d.bbox.clip(page.width, page.height)?;
                Some(Suggestion::Detection(d))
            }
            (_, s) => Some(s),
        })
        .collect()
}

fn suggestion_summary(items: &[Suggestion]) -> Value {
    let unparseable = items.iter().filter(|s| matches!(s, Suggestion::Field(f) if f.status != FieldStatus::Normalized)).count();
    json!({"count": items.len(), "flagged_fields": unparseable})
}

/// Runs one task on one document. The provider is called once; if that
/// attempt fails at the transport level or returns an invalid response and
/// retry is enabled, exactly one more attempt is made with the fallback
/// prompt. Every step is appended to `audit`.
pub fn run_task(bundle: &DocumentBundle, config: &TaskConfig, provider: &dyn Provider, audit: &AuditLog) -> Result<TaskResult, PipelineError> {
    config.validate()?;
    let doc_id = bundle.doc_id.clone();
    let mut refs = Vec::new();
    let mut log = |action: &str, payload: Value| -> Result<(), AuditError> {
        let mut payload = payload;
        payload["doc_id"] = json!(doc_id);
        payload["task_kind"] = json!(config.task_kind);
        refs.push(audit.append(Actor::System, action, &payload)?.seq);
        Ok(())
    };

    log("TaskStarted", json!({"provider_path": config.provider_path.id(), "max_attempts": config.max_attempts()}))?;
    let mut prep = Prepared { vars: BTreeMap::new(), images: Vec::new() };
    for (i, action) in config.pre_actions.iter().enumerate() {
        let detail = run_pre_action(action, bundle, config, &mut prep)?;
        log("PreAction", json!({"index": i, "action": action.name(), "produced": action.produces(), "detail": detail}))?;
    }

    let mut attempts: Vec<AttemptRecord> = Vec::new();
    let mut cost = CostRecord::zero(&config.provider_path);
    for attempt in 1..=config.max_attempts() {
        let (variant, template, path) = if attempt == 1 {
            (PromptVariant::Primary, &config.prompt_template, &config.provider_path)
        } else {
            (PromptVariant::Fallback, config.fallback_prompt_template.as_ref().expect("validated: retry has a fallback"), config.fallback_path())
        };
        let prompt = render_template(template, &prep.vars);
        log(
            "ProviderRequest",
            json!({
                "attempt": attempt,
                "prompt_variant": variant,
                "prompt": prompt,
                "prompt_sha256": ContentHash::of_bytes(prompt.as_bytes()).to_hex(),
                "images": prep.images.len(),
                "schema": config.response_schema,
                "provider_path": path.id(),
                "model_tier": path.model_tier,
            }),
        )?;
        let request = ProviderRequest {
            task_kind: config.task_kind,
            doc_id: bundle.doc_id.clone(),
            attempt,
            prompt,
            images: prep.images.clone(),
            schema: config.response_schema.clone(),
            model_tier: path.model_tier,
        };
        let mut record = AttemptRecord {
            attempt,
            prompt_variant: variant,
            provider_path: path.id(),
            outcome: AttemptOutcome::TransportFailed,
            diagnostic: None,
            input_tokens: 0,
            output_tokens: 0,
            tool_calls: 0,
            latency_ms: 0,
        };
        let mut attempt_cost = CostRecord { attempts: 1, ..CostRecord::zero(path) };
        let accepted = match invoke(provider, &request) {
            Err(e) => {
                record.diagnostic = Some(e.to_string());
                None
            }
            Ok(resp) => {
                record.input_tokens = resp.input_tokens;
                record.output_tokens = resp.output_tokens;
                record.tool_calls = resp.tool_calls;
                record.latency_ms = resp.latency_ms;
                attempt_cost = account_cost(std::slice::from_ref(&resp), path);
                match schema::validate_response(&config.response_schema, &resp.raw_text) {
                    Ok(v) => {
                        record.outcome = AttemptOutcome::Accepted;
                        Some(v)
                    }
                    Err(why) => {
                        record.outcome = AttemptOutcome::InvalidResponse;
                        record.diagnostic = Some(why);
                        None
                    }
                }
            }
        };
        cost = cost.combine(&attempt_cost);
        log("AttemptOutcome", serde_json::to_value(&record).expect("records serialize"))?;
        attempts.push(record);

        let Some(value) = accepted else { continue };
        let mut items: Option<Vec<Suggestion>> = None;
        for action in &config.post_actions {
            let before = items.as_ref().map_or(0, Vec::len);
            match action {
                PostAction::SchemaValidate { .. } => {}
                PostAction::Normalize { .. } => items = Some(normalize(config, &value)),
                PostAction::HeuristicFilter { rule, min_confidence } => {
                    let current = items.take().unwrap_or_else(|| normalize(config, &value));
                    items = Some(apply_filter(*rule, *min_confidence, bundle, current));
                }
            }
            let after = items.as_ref().map_or(0, Vec::len);
            log("PostAction", json!({"attempt": attempt, "action": action.name(), "before": before, "after": after}))?;
        }
        let suggestions = items.unwrap_or_else(|| normalize(config, &value));
        log(
            "TaskCompleted",
            json!({"attempts": attempts.len(), "suggestions": suggestion_summary(&suggestions), "cost": cost, "schema": config.response_schema}),
        )?;
        return Ok(TaskResult { doc_id: bundle.doc_id.clone(), task_kind: config.task_kind, suggestions, cost, attempts_log: attempts, audit_refs: refs, validated_output: value });
    }

    log("TaskFailed", json!({"attempts": attempts, "cost": cost}))?;
    Err(PipelineError::TaskFailed(Box::new(TaskFailure { doc_id: bundle.doc_id.clone(), task_kind: config.task_kind, attempts, cost, audit_refs: refs })))
}
