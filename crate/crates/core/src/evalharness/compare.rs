//! Baseline versus pipeline comparison over a corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{baseline_ner, FieldPrediction, Predictions};
use super::corpus::{GoldAnnotation, SyntheticCorpus, NORTH_LABEL};
use super::fixtures::FixtureSet;
use super::metrics::{map_at_50, recall_by_category, GoldBox, MapReport, PrF1, RecallReport, ScoredBox, SpanCounts};
use crate::audit::AuditLog;
use crate::docmodel::{DocumentBundle, DocumentText};
use crate::pii::{detect_pii, PiiCategory};
use crate::pipeline::{run_task, PipelineError, Suggestion, TaskConfig, TaskKind};
use crate::vischeck::{builtin_north_arrow, detect_red_lines, detect_template, Detection, VisError, RED_LINE_LABEL};

pub const NER_FIELDS: [&str; 2] = ["Title", "Date"];
pub const PII_ROWS: [PiiCategory; 2] = [PiiCategory::Names, PiiCategory::Addresses];
pub const MAP_LABELS: [&str; 2] = [NORTH_LABEL, RED_LINE_LABEL];
pub const NORTH_THRESHOLD: f64 = 0.7;
pub const RED_LINE_MIN_LENGTH: u32 = 40;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no fixture for document {0}")]
    MissingFixture(String),
    #[error("pipeline failed on {doc_id}: {source}")]
    Pipeline { doc_id: String, source: PipelineError },
    #[error("detector failed on {doc_id}: {source}")]
    Vision { doc_id: String, source: VisError },
    #[error("malformed span in gold for {0}")]
    MalformedGold(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ner_f1: BTreeMap<String, PrF1>,
    pub pii_recall: RecallReport,
    pub detection_map: MapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub target: String,
    pub baseline: f64,
    pub proposed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seed: u64,
    pub n_docs: usize,
    pub corruption_per_mille: u32,
    pub rows: Vec<ComparisonRow>,
    pub baseline: MetricReport,
    pub proposed: MetricReport,
}

/// Task configurations used on the proposed side.
#[derive(Debug, Clone)]
pub struct ComparisonConfigs {
    pub extraction: TaskConfig,
    pub pii: TaskConfig,
    pub visual: TaskConfig,
}

impl ComparisonConfigs {
    pub fn bundled() -> Self {
        ComparisonConfigs { extraction: TaskConfig::bundled(TaskKind::Extraction), pii: TaskConfig::bundled(TaskKind::PiiDetection), visual: TaskConfig::bundled(TaskKind::VisualDetection) }
    }
}

/// One side's predictions for one document.
#[derive(Debug, Clone, Default)]
pub struct DocPredictions {
    pub ner: Predictions,
    pub detections: Vec<Detection>,
}

/// The template matcher and red-line proxy over every page.
pub fn classical_detections(bundle: &DocumentBundle) -> Result<Vec<Detection>, VisError> {
    let arrow = builtin_north_arrow();
    let mut out = Vec::new();
    for page in &bundle.pages {
        out.extend(detect_template(page, &arrow, NORTH_LABEL, NORTH_THRESHOLD)?);
        out.extend(detect_red_lines(page, RED_LINE_MIN_LENGTH));
    }
    Ok(out)
}

fn baseline_doc(bundle: &DocumentBundle) -> Result<DocPredictions, EvalError> {
    let detections = classical_detections(bundle).map_err(|source| EvalError::Vision { doc_id: bundle.doc_id.clone(), source })?;
    Ok(DocPredictions { ner: baseline_ner(bundle), detections })
}

fn proposed_doc(bundle: &DocumentBundle, configs: &ComparisonConfigs, provider: &dyn crate::pipeline::Provider) -> Result<DocPredictions, EvalError> {
    let audit = AuditLog::in_memory();
    let fail = |source| EvalError::Pipeline { doc_id: bundle.doc_id.clone(), source };
    let text = DocumentText::of(bundle);
    let extraction = run_task(bundle, &configs.extraction, provider, &audit).map_err(fail)?;
    let mut ner = Predictions::default();
    for s in extraction.suggestions {
        if let Suggestion::Field(f) = s {
            let span = text.locate(&f.raw_value, &f.source_spans);
            ner.fields.push(FieldPrediction { field_name: f.field_name, value: f.value, span });
        }
    }
    for c in detect_pii(bundle, &configs.pii, provider, &audit).map_err(fail)? {
        ner.pii.push(super::metrics::PiiRecord { category: c.category, value: c.value, locations: c.locations });
    }
    let visual = run_task(bundle, &configs.visual, provider, &audit).map_err(fail)?;
    let detections = visual
        .suggestions
        .into_iter()
        .filter_map(|s| match s {
            Suggestion::Detection(d) => Some(d),
            _ => None,
        })
        .collect();
    Ok(DocPredictions { ner, detections })
}

/// Scores per-document predictions against gold.
pub fn score(gold: &[GoldAnnotation], preds: &[DocPredictions]) -> Result<MetricReport, EvalError> {
    let mut ner_f1 = BTreeMap::new();
    for field in NER_FIELDS {
        let mut counts = SpanCounts::default();
        for (g, p) in gold.iter().zip(preds) {
            let gold_spans = g.field_spans.get(field).cloned().unwrap_or_default();
            let fields: Vec<&FieldPrediction> = p.ner.fields.iter().filter(|f| f.field_name == field).collect();
            let placed: Vec<_> = fields.iter().filter_map(|f| f.span).collect();
            let unplaced = fields.len() - placed.len();
            counts.add(&gold_spans, &placed, unplaced).map_err(|_| EvalError::MalformedGold(g.doc_id.clone()))?;
        }
        ner_f1.insert(field.to_string(), counts.score());
    }
    // Recall is computed per document so matches never cross documents.
    let mut pooled: BTreeMap<PiiCategory, (usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(preds) {
        for (cat, (m, n)) in recall_by_category(&g.pii_items, &p.ner.pii).counts {
            let e = pooled.entry(cat).or_default();
            e.0 += m;
            e.1 += n;
        }
    }
    let pii_recall = super::metrics::recall_from_counts(pooled);
    let mut gold_boxes = Vec::new();
    let mut pred_boxes = Vec::new();
    for (g, p) in gold.iter().zip(preds) {
        for (label, boxes) in &g.symbol_boxes {
            gold_boxes.extend(boxes.iter().map(|(page, b)| GoldBox { doc_id: g.doc_id.clone(), page_index: *page, label: label.clone(), bbox: *b }));
        }
        pred_boxes.extend(p.detections.iter().map(|d| ScoredBox { doc_id: g.doc_id.clone(), page_index: d.page_index, label: d.label.clone(), bbox: d.bbox, score: d.score }));
    }
    let detection_map = map_at_50(&gold_boxes, &pred_boxes, &MAP_LABELS);
    Ok(MetricReport { ner_f1, pii_recall, detection_map })
}

fn rows(baseline: &MetricReport, proposed: &MetricReport) -> Vec<ComparisonRow> {
    let mut out = Vec::new();
    for f in NER_FIELDS {
        out.push(ComparisonRow { metric: "ner_f1".into(), target: f.into(), baseline: baseline.ner_f1[f].f1, proposed: proposed.ner_f1[f].f1 });
    }
    for c in PII_ROWS {
        let get = |r: &MetricReport| r.pii_recall.per_category.get(&c).copied().unwrap_or(0.0);
        out.push(ComparisonRow { metric: "pii_recall".into(), target: c.as_str().into(), baseline: get(baseline), proposed: get(proposed) });
    }
    for l in MAP_LABELS {
        let get = |r: &MetricReport| r.detection_map.per_label.get(l).copied().unwrap_or(0.0);
        out.push(ComparisonRow { metric: "map_50".into(), target: l.into(), baseline: get(baseline), proposed: get(proposed) });
    }
    out
}

/// Baseline predictions for every document.
pub fn baseline_predictions(corpus: &SyntheticCorpus) -> Result<Vec<DocPredictions>, EvalError> {
    corpus.docs.par_iter().map(baseline_doc).collect()
}

/// Runs the baseline and the mock-backed pipeline over every document and
/// tabulates NER F1 (Title, Date), PII recall (Names, Addresses) and mAP@.5
/// (north_point, red_line).
pub fn run_comparison(corpus: &SyntheticCorpus, fixtures: &FixtureSet, configs: &ComparisonConfigs) -> Result<ComparisonTable, EvalError> {
    run_comparison_with_baseline(corpus, &baseline_predictions(corpus)?, fixtures, configs)
}

/// [`run_comparison`] with precomputed baseline predictions, which do not
/// depend on the fixtures.
pub fn run_comparison_with_baseline(corpus: &SyntheticCorpus, base: &[DocPredictions], fixtures: &FixtureSet, configs: &ComparisonConfigs) -> Result<ComparisonTable, EvalError> {
    if let Some(missing) = corpus.docs.iter().find(|d| !fixtures.docs.contains_key(&d.doc_id)) {
        return Err(EvalError::MissingFixture(missing.doc_id.clone()));
    }
    run_comparison_with_provider(corpus, base, &fixtures.provider(), fixtures.corruption_per_mille, configs)
}

/// Runs the proposed side against any provider, for example fixtures read
/// back from disk. `corruption_per_mille` is only reported.
pub fn run_comparison_with_provider(
    corpus: &SyntheticCorpus,
    base: &[DocPredictions],
    provider: &dyn crate::pipeline::Provider,
    corruption_per_mille: u32,
    configs: &ComparisonConfigs,
) -> Result<ComparisonTable, EvalError> {
    let prop: Vec<DocPredictions> = corpus.docs.par_iter().map(|d| proposed_doc(d, configs, provider)).collect::<Result<_, EvalError>>()?;
    let baseline = score(&corpus.gold, base)?;
    let proposed = score(&corpus.gold, &prop)?;
    Ok(ComparisonTable { seed: corpus.seed, n_docs: corpus.docs.len(), corruption_per_mille, rows: rows(&baseline, &proposed), baseline, proposed })
}

impl ComparisonTable {
    /// Tab-separated report with four decimals per value.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed={} n_docs={} corruption={}.{:03}", self.seed, self.n_docs, self.corruption_per_mille / 1000, self.corruption_per_mille % 1000);
        s.push_str("metric\ttarget\tbaseline\tproposed\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}", r.metric, r.target, r.baseline, r.proposed);
        }
        s
    }
}
