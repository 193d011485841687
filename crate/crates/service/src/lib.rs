//! Persistence, job handling and the HTTP API for the redaction and review
//! workflow in `planloop-core`.

mod engine;
mod error;
pub mod http;
mod store;

pub use engine::{
    BlockingItem, CommitSummary, DocumentSummary, Engine, IngestReceipt, JobOutput, JobRecord, JobStatus, PiiOverlay, Preview, ProviderChoice, ServiceConfig, TaskRequest, DEFAULT_DATA_DIR,
    ENV_DATA_DIR, ENV_MOCK_PROVIDER,
};
pub use error::{ErrorBody, ServiceError};
pub use http::{router, serve};
pub use planloop_core;
pub use store::valid_doc_id;
