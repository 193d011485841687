//! Document intelligence for statutory planning documents.
//!
//! Every stage proposes; nothing is committed without a human transition in
//! [`review`]. Proposals come from a configurable [`pipeline`] around a
//! vision-language provider, redactions are applied with true content
//! removal by [`redaction`], and each step is recorded in the hash-chained
//! [`audit`] log.

pub mod audit;
pub mod docmodel;
pub mod evalharness;
pub mod extraction;
pub mod money;
pub mod pii;
pub mod pipeline;
pub mod redaction;
pub mod review;
pub mod roi;
pub mod vischeck;

pub use docmodel::{content_hash, find_text_occurrences, load_bundle, save_bundle, BoundingBox, ContentHash, DocumentBundle, Page, HitPiece, TextHit, TextSpan};
pub use audit::{verify_chain, Actor, AuditError, AuditEvent, AuditLog, ChainReport};
pub use extraction::{FieldSuggestion, MetadataSchema};
pub use pii::{PiiCandidate, PiiCategory, PiiLocation};
pub use pipeline::{run_task, CostRecord, Provider, ScriptedProvider, TaskConfig, TaskKind, TaskResult};
pub use redaction::{apply_redactions, commit_redaction, scrub_verify, RedactionPlan, RedactionResult};
pub use review::{ReviewAction, ReviewItem, ReviewSession, ReviewState};
pub use roi::{compute_roi, RoiInputs, RoiOutputs};
pub use vischeck::{Detection, RulePack};
