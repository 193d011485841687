use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::docmodel::BoundingBox;
use crate::pii::{normalized_value, PiiCategory, PiiLocation};

/// Half-open character interval.
pub type CharSpan = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("malformed span [{0}, {1})")]
pub struct MalformedSpan(pub usize, pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a denominator was zero and the affected value defaulted to 0.
    pub undefined: bool,
}

impl PrF1 {
    pub fn from_counts(tp: usize, n_gold: usize, n_pred: usize) -> PrF1 {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, n_pred);
        let recall = ratio(tp, n_gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        PrF1 { precision, recall, f1, undefined: n_pred == 0 || n_gold == 0 }
    }
}

fn check(spans: &[CharSpan]) -> Result<BTreeSet<CharSpan>, MalformedSpan> {
    spans.iter().map(|&(s, e)| if s < e { Ok((s, e)) } else { Err(MalformedSpan(s, e)) }).collect()
}

/// Exact-match span precision, recall and F1 over span sets.
pub fn span_f1(gold: &[CharSpan], pred: &[CharSpan]) -> Result<PrF1, MalformedSpan> {
    let g = check(gold)?;
    let p = check(pred)?;
    Ok(PrF1::from_counts(g.intersection(&p).count(), g.len(), p.len()))
}

/// Running span counts for corpus-level F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub tp: usize,
    pub gold: usize,
    pub pred: usize,
}

impl SpanCounts {
    /// Adds one document. `unplaced_pred` counts predictions that could not
    /// be mapped to a span and so cannot match.
    pub fn add(&mut self, gold: &[CharSpan], pred: &[CharSpan], unplaced_pred: usize) -> Result<(), MalformedSpan> {
        let g = check(gold)?;
        let p = check(pred)?;
        self.tp += g.intersection(&p).count();
        self.gold += g.len();
        self.pred += p.len() + unplaced_pred;
        Ok(())
    }

    pub fn score(&self) -> PrF1 {
        PrF1::from_counts(self.tp, self.gold, self.pred)
    }
}

/// A PII item as annotated or predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiiRecord {
    pub category: PiiCategory,
    pub value: String,
    pub locations: Vec<PiiLocation>,
}

/// Whether `pred` counts as finding `gold`.
pub fn pii_matches(gold: &PiiRecord, pred: &PiiRecord) -> bool {
    if gold.category != pred.category {
        return false;
    }
    let (gv, pv) = (normalized_value(gold.category, &gold.value), normalized_value(pred.category, &pred.value));
    if !gv.is_empty() && gv == pv {
        return true;
    }
    gold.locations.iter().any(|g| pred.locations.iter().any(|p| p.page_index == g.page_index && g.bbox.iou(&p.bbox) >= 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Categories with at least one gold item.
    pub per_category: BTreeMap<PiiCategory, f64>,
    pub counts: BTreeMap<PiiCategory, (usize, usize)>,
    pub micro: Option<f64>,
    pub macro_avg: Option<f64>,
}

/// Recall per category: the share of gold items matched by some prediction.
pub fn recall_by_category(gold: &[PiiRecord], pred: &[PiiRecord]) -> RecallReport {
    let mut counts: BTreeMap<PiiCategory, (usize, usize)> = BTreeMap::new();
    for g in gold {
        let c = counts.entry(g.category).or_default();
        c.1 += 1;
        if pred.iter().any(|p| pii_matches(g, p)) {
            c.0 += 1;
        }
    }
    recall_from_counts(counts)
}

pub fn recall_from_counts(counts: BTreeMap<PiiCategory, (usize, usize)>) -> RecallReport {
    let per_category: BTreeMap<PiiCategory, f64> = counts.iter().filter(|(_, c)| c.1 > 0).map(|(k, &(m, n))| (*k, m as f64 / n as f64)).collect();
    let (m, n) = counts.values().fold((0, 0), |(a, b), &(m, n)| (a + m, b + n));
    let micro = (n > 0).then(|| m as f64 / n as f64);
    let macro_avg = (!per_category.is_empty()).then(|| per_category.values().sum::<f64>() / per_category.len() as f64);
    RecallReport { per_category, counts, micro, macro_avg }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldBox {
    pub doc_id: String,
    pub page_index: u32,
    pub label: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub doc_id: String,
    pub page_index: u32,
    pub label: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_label: BTreeMap<String, f64>,
    /// Labels with neither gold boxes nor predictions.
    pub excluded: Vec<String>,
    pub mean: Option<f64>,
}

/// Score-descending order; equal scores are ordered by document, page,
/// x, y, w, h.
pub fn detection_order(a: &ScoredBox, b: &ScoredBox) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
        .then(a.page_index.cmp(&b.page_index))
        .then((a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h).cmp(&(b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)))
}

/// All-points interpolated average precision from TP flags in rank order.
pub fn average_precision(tp_flags: &[bool], n_gold: usize) -> f64 {
    if n_gold == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / n_gold as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope from the right.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Average precision at IoU 0.5 per label and the mean over labels. Each
/// prediction is matched greedily, in [`detection_order`], to the unmatched
/// gold box of the same document, page and label with the highest IoU.
pub fn map_at_50(gold: &[GoldBox], pred: &[ScoredBox], labels: &[&str]) -> MapReport {
    let mut per_label = BTreeMap::new();
    let mut excluded = Vec::new();
    for &label in labels {
        let golds: Vec<&GoldBox> = gold.iter().filter(|g| g.label == label).collect();
        let mut preds: Vec<&ScoredBox> = pred.iter().filter(|p| p.label == label).collect();
        if golds.is_empty() && preds.is_empty() {
            excluded.push(label.to_string());
            continue;
        }
        preds.sort_by(|a, b| detection_order(a, b));
        let mut used = vec![false; golds.len()];
        let flags: Vec<bool> = preds
            .iter()
            .map(|p| {
                let best = golds
                    .iter()
                    .enumerate()
                    .filter(|(i, g)| !used[*i] && g.doc_id == p.doc_id && g.page_index == p.page_index)
                    .map(|(i, g)| (i, g.bbox.iou(&p.bbox)))
                    .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((i, v)),
                    });
                match best {
                    Some((i, v)) if v >= 0.5 => {
                        used[i] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_label.insert(label.to_string(), average_precision(&flags, golds.len()));
    }
    let mean = (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    MapReport { per_label, excluded, mean }
}
