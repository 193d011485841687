//! JSON API under `/api/v1`. Errors use the envelope
//! `{"error": {"code", "message", "details"}}`.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use planloop_core::docmodel::DocumentBundle;
use planloop_core::review::{ReviewAction, ReviewState};
use planloop_core::roi::RoiInputs;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::engine::{Engine, TaskRequest};
use crate::error::ServiceError;

pub const BODY_LIMIT: usize = 64 * 1024 * 1024;

type AppState = Arc<Engine>;
type ApiResult = Result<Response, ServiceError>;

/// `Json` with rejections reported in the service envelope.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ServiceError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(ServiceError::BadRequest(e.body_text())),
        }
    }
}

async fn blocking<T, F>(engine: &AppState, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    let engine = Arc::clone(engine);
    tokio::task::spawn_blocking(move || f(&engine)).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn ok<T: serde::Serialize>(status: StatusCode, v: T) -> ApiResult {
    Ok((status, Json(v)).into_response())
}

fn page_index(raw: &str) -> Result<u32, ServiceError> {
    raw.parse().map_err(|_| ServiceError::BadRequest(format!("page {raw:?} is not a page index")))
}

pub fn router(engine: Arc<Engine>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/documents", post(ingest).get(list_documents))
        .route("/documents/{doc_id}", get(get_document))
        .route("/documents/{doc_id}/tasks", post(create_task))
        .route("/documents/{doc_id}/jobs", get(list_jobs))
        .route("/documents/{doc_id}/items", get(list_items))
        .route("/documents/{doc_id}/queue", get(queue))
        .route("/documents/{doc_id}/commit", post(commit))
        .route("/documents/{doc_id}/pages/{page}/preview", get(preview))
        .route("/documents/{doc_id}/pages/{page}/raster", get(raster))
        .route("/documents/{doc_id}/audit", get(doc_audit))
        .route("/documents/{doc_id}/assessment-notes", post(assessment_note))
        .route("/jobs/{job_id}", get(get_job))
        .route("/items/{item_id}", get(get_item))
        .route("/items/{item_id}/transitions", post(transition))
        .route("/audit/verify", get(verify_audit))
        .route("/rule-packs/default", get(rule_pack))
        .route("/roi", post(roi))
        .route("/roi/scenarios/{name}", get(roi_scenario))
        .method_not_allowed_fallback(|| async { ServiceError::MethodNotAllowed });
    Router::new()
        .nest("/api/v1", api)
        .fallback(|uri: Uri| async move { ServiceError::NotFound { what: "route", id: uri.path().to_string() } })
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(engine)
}

async fn health(State(e): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "provider": e.has_provider() }))
}

#[derive(Deserialize)]
struct IngestBody {
    #[serde(default)]
    operator_id: String,
    archive_base64: String,
}

async fn ingest(State(e): State<AppState>, ApiJson(body): ApiJson<IngestBody>) -> ApiResult {
    let bytes = base64::engine::general_purpose::STANDARD.decode(body.archive_base64.trim()).map_err(|err| ServiceError::BadRequest(format!("archive_base64: {err}")))?;
    let receipt = blocking(&e, move |e| {
        let bundle = DocumentBundle::from_canonical(&bytes)?;
        e.ingest(&bundle, &body.operator_id)
    })
    .await?;
    ok(StatusCode::CREATED, receipt)
}

async fn list_documents(State(e): State<AppState>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, |e| Ok(e.documents())).await?)
}

async fn get_document(State(e): State<AppState>, Path(doc_id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.document(&doc_id)).await?)
}

#[derive(Deserialize)]
struct TaskBody {
    #[serde(default)]
    operator_id: String,
    #[serde(flatten)]
    request: TaskRequest,
    #[serde(default)]
    direct: bool,
}

/// Queues a job and runs it on the blocking pool. With `direct` the response
/// waits for the finished job.
async fn create_task(State(e): State<AppState>, Path(doc_id): Path<String>, ApiJson(body): ApiJson<TaskBody>) -> ApiResult {
    let job = blocking(&e, move |e| e.create_job(&doc_id, &body.request, &body.operator_id)).await?;
    let job_id = job.job_id.clone();
    if body.direct {
        return ok(StatusCode::OK, blocking(&e, move |e| e.run_job(&job_id)).await?);
    }
    let engine = Arc::clone(&e);
    tokio::task::spawn_blocking(move || {
        let _ = engine.run_job(&job_id);
    });
    ok(StatusCode::ACCEPTED, job)
}

async fn list_jobs(State(e): State<AppState>, Path(doc_id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.jobs_for(&doc_id)).await?)
}

async fn get_job(State(e): State<AppState>, Path(job_id): Path<String>) -> ApiResult {
    let (job, output) = blocking(&e, move |e| Ok((e.job(&job_id)?, e.job_output(&job_id)?))).await?;
    let mut v = serde_json::to_value(job).map_err(|err| ServiceError::Internal(err.to_string()))?;
    v["output"] = serde_json::to_value(output).map_err(|err| ServiceError::Internal(err.to_string()))?;
    ok(StatusCode::OK, v)
}

async fn list_items(State(e): State<AppState>, Path(doc_id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.items(&doc_id)).await?)
}

async fn queue(State(e): State<AppState>, Path(doc_id): Path<String>) -> ApiResult {
    let items = blocking(&e, move |e| e.queue(&doc_id)).await?;
    let order: Vec<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    ok(StatusCode::OK, json!({ "order": order, "items": items }))
}

async fn get_item(State(e): State<AppState>, Path(item_id): Path<String>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.item(&item_id)).await?)
}

#[derive(Deserialize)]
struct TransitionBody {
    #[serde(default)]
    operator_id: String,
    action: String,
    #[serde(default)]
    value: Option<String>,
    #[serde(default)]
    expected_state: Option<ReviewState>,
}

fn parse_action(name: &str, value: Option<String>) -> Result<ReviewAction, ServiceError> {
    match (name, value) {
        ("confirm", None) => Ok(ReviewAction::Confirm),
        ("reject", None) => Ok(ReviewAction::Reject),
        ("commit", None) => Ok(ReviewAction::Commit),
        ("edit", Some(v)) => Ok(ReviewAction::Edit(v)),
        ("edit", None) => Err(ServiceError::BadRequest("edit requires a value".into())),
        ("confirm" | "reject" | "commit", Some(_)) => Err(ServiceError::BadRequest(format!("{name} takes no value"))),
        _ => Err(ServiceError::BadRequest(format!("unknown action {name:?}; expected confirm, reject, edit or commit"))),
    }
}

async fn transition(State(e): State<AppState>, Path(item_id): Path<String>, ApiJson(body): ApiJson<TransitionBody>) -> ApiResult {
    let action = parse_action(&body.action, body.value)?;
    ok(StatusCode::OK, blocking(&e, move |e| e.transition(&item_id, &action, &body.operator_id, body.expected_state)).await?)
}

#[derive(Deserialize)]
struct CommitBody {
    #[serde(default)]
    operator_id: String,
    #[serde(default)]
    item_ids: Option<Vec<String>>,
}

async fn commit(State(e): State<AppState>, Path(doc_id): Path<String>, ApiJson(body): ApiJson<CommitBody>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.commit(&doc_id, &body.operator_id, body.item_ids.as_deref())).await?)
}

async fn preview(State(e): State<AppState>, Path((doc_id, page)): Path<(String, String)>) -> ApiResult {
    let page = page_index(&page)?;
    ok(StatusCode::OK, blocking(&e, move |e| e.preview(&doc_id, page)).await?)
}

async fn raster(State(e): State<AppState>, Path((doc_id, page)): Path<(String, String)>) -> ApiResult {
    let page = page_index(&page)?;
    let png = blocking(&e, move |e| e.raster_png(&doc_id, page)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct AuditQuery {
    action: Option<String>,
}

async fn doc_audit(State(e): State<AppState>, Path(doc_id): Path<String>, Query(q): Query<AuditQuery>) -> ApiResult {
    ok(StatusCode::OK, blocking(&e, move |e| e.audit_events(&doc_id, q.action.as_deref())).await?)
}

async fn verify_audit(State(e): State<AppState>) -> ApiResult {
    let report = blocking(&e, |e| e.verify_audit()).await?;
    let intact = report.intact();
    ok(StatusCode::OK, json!({ "intact": intact, "report": report }))
}

#[derive(Deserialize)]
struct NoteBody {
    #[serde(default)]
    operator_id: String,
    note: String,
    #[serde(default)]
    rule_ids: Vec<String>,
}

async fn assessment_note(State(e): State<AppState>, Path(doc_id): Path<String>, ApiJson(body): ApiJson<NoteBody>) -> ApiResult {
    ok(StatusCode::CREATED, blocking(&e, move |e| e.assessment_note(&doc_id, &body.operator_id, &body.note, &body.rule_ids)).await?)
}

async fn rule_pack(State(e): State<AppState>) -> ApiResult {
    ok(StatusCode::OK, e.rule_pack().clone())
}

async fn roi(ApiJson(inputs): ApiJson<RoiInputs>) -> ApiResult {
    ok(StatusCode::OK, Engine::roi(&inputs)?)
}

async fn roi_scenario(Path(name): Path<String>) -> ApiResult {
    let inputs = Engine::roi_scenario(&name)?;
    let outputs = Engine::roi(&inputs)?;
    ok(StatusCode::OK, json!({ "scenario": name, "inputs": inputs, "outputs": outputs }))
}

/// Serves the API on `listener` until the process stops.
pub async fn serve(engine: Arc<Engine>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).await
}
