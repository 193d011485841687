//! Metrics, a classical baseline, a synthetic corpus and the comparison
//! runner.

pub mod baseline;
pub mod compare;
pub mod corpus;
pub mod fixtures;
pub mod metrics;

pub use baseline::{baseline_ner, FieldPrediction, Predictions};
pub use compare::{baseline_predictions, classical_detections, run_comparison, run_comparison_with_baseline, run_comparison_with_provider, DocPredictions, score, ComparisonConfigs, ComparisonRow, ComparisonTable, EvalError, MetricReport};
pub use corpus::{generate_synthetic_corpus, GoldAnnotation, SyntheticCorpus};
pub use fixtures::{generate_fixtures, DocFixtures, FixtureSet};
pub use metrics::{average_precision, iou, map_at_50, recall_by_category, span_f1, GoldBox, MapReport, PiiRecord, PrF1, RecallReport, ScoredBox, SpanCounts};
