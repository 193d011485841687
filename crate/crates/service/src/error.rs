use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use planloop_core::audit::AuditError;
use planloop_core::docmodel::BundleError;
use planloop_core::pipeline::PipelineError;
use planloop_core::redaction::RedactionError;
use planloop_core::review::ReviewError;
use serde::Serialize;
use serde_json::{json, Value};

/// Every failure the service reports. Each maps to an HTTP status and a
/// stable machine-readable code.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("operator_id is required for this operation")]
    MissingOperator,
    #[error("{what} {id:?} not found")]
    NotFound { what: &'static str, id: String },
    #[error("document {0:?} already exists")]
    AlreadyExists(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String, details: Value },
    #[error("{message}")]
    Unprocessable { code: &'static str, message: String, details: Value },
    #[error("method not allowed on this route")]
    MethodNotAllowed,
    #[error("no provider is configured")]
    ProviderUnavailable,
    #[error("storage failure: {0}")]
    Storage(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) | ServiceError::MissingOperator => StatusCode::BAD_REQUEST,
            ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
            ServiceError::MethodNotAllowed => StatusCode::METHOD_NOT_ALLOWED,
            ServiceError::AlreadyExists(_) | ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::ProviderUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Storage(_) | ServiceError::Audit(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::MissingOperator => "missing_operator",
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::MethodNotAllowed => "method_not_allowed",
            ServiceError::AlreadyExists(_) => "already_exists",
            ServiceError::Conflict { code, .. } | ServiceError::Unprocessable { code, .. } => code,
            ServiceError::ProviderUnavailable => "provider_unavailable",
            ServiceError::Storage(_) => "storage_error",
            ServiceError::Audit(_) => "audit_error",
            ServiceError::Internal(_) => "internal_error",
        }
    }

    pub fn body(&self) -> ErrorBody {
        let details = match self {
            ServiceError::Conflict { details, .. } | ServiceError::Unprocessable { details, .. } => details.clone(),
            _ => Value::Null,
        };
        ErrorBody { code: self.code().into(), message: self.to_string(), details }
    }

    pub(crate) fn storage(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        ServiceError::Storage(format!("{context}: {e}"))
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.body() }))).into_response()
    }
}

impl From<ReviewError> for ServiceError {
    fn from(e: ReviewError) -> Self {
        let message = e.to_string();
        match e {
            ReviewError::IllegalTransition { item_id, from, action } => {
                ServiceError::Conflict { code: "illegal_transition", message, details: json!({ "item_id": item_id, "from": from, "action": action }) }
            }
            ReviewError::StaleState { item_id, expected, actual } => {
                ServiceError::Conflict { code: "stale_state", message, details: json!({ "item_id": item_id, "expected": expected, "actual": actual }) }
            }
            ReviewError::MissingOperator => ServiceError::MissingOperator,
            ReviewError::EmptyEdit(_) => ServiceError::BadRequest(message),
            ReviewError::UnknownItem(id) => ServiceError::NotFound { what: "review item", id },
            ReviewError::Audit(a) => ServiceError::Audit(a),
        }
    }
}

impl From<RedactionError> for ServiceError {
    fn from(e: RedactionError) -> Self {
        let message = e.to_string();
        match e {
            RedactionError::CommitRejected { item_id, reason } => {
                ServiceError::Unprocessable { code: "commit_blocked", message, details: json!({ "blocking": [{ "item_id": item_id, "reason": reason }] }) }
            }
            RedactionError::ScrubFailed(report) => ServiceError::Unprocessable { code: "scrub_failed", message, details: json!({ "scrub_report": report }) },
            RedactionError::UnresolvableLocation { candidate_id, page_index } => {
                ServiceError::Unprocessable { code: "unresolved_location", message, details: json!({ "candidate_id": candidate_id, "page_index": page_index }) }
            }
            RedactionError::Review(r) => r.into(),
            RedactionError::Audit(a) => ServiceError::Audit(a),
        }
    }
}

impl From<BundleError> for ServiceError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Io { .. } => ServiceError::Storage(e.to_string()),
            other => ServiceError::Unprocessable { code: "invalid_bundle", message: other.to_string(), details: Value::Null },
        }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Audit(a) => ServiceError::Audit(a),
            PipelineError::Config(m) => ServiceError::Unprocessable { code: "invalid_task_config", message: m, details: Value::Null },
            other => ServiceError::Unprocessable { code: "task_failed", message: other.to_string(), details: Value::Null },
        }
    }
}
