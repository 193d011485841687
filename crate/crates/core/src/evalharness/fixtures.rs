//! Scripted provider responses derived from gold, with optional corruption
//! to emulate model error.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde_json::{json, Map, Value};

use super::corpus::{chance, doc_rng, GoldAnnotation, SyntheticCorpus};
use crate::pipeline::{write_fixture, Fixture, ScriptedProvider, TaskKind};

/// Token usage attached to every synthetic response.
pub const FIXTURE_INPUT_TOKENS: u64 = 5500;
pub const FIXTURE_OUTPUT_TOKENS: u64 = 1200;
pub const FIXTURE_TOOL_CALLS: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct DocFixtures {
    pub extraction: Fixture,
    pub pii: Fixture,
    pub visual: Fixture,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixtureSet {
    pub corruption_per_mille: u32,
    pub docs: BTreeMap<String, DocFixtures>,
}

fn respond(body: Value) -> Fixture {
    Fixture::respond(body.to_string(), FIXTURE_INPUT_TOKENS, FIXTURE_OUTPUT_TOKENS, FIXTURE_TOOL_CALLS)
}

/// A written value that no longer reads out of the document: the last word
/// is dropped, or for one-word values a character is appended.
fn corrupt_text(raw: &str) -> String {
    match raw.rsplit_once(' ') {
        Some((head, _)) if !head.trim().is_empty() => head.to_string(),
        _ => format!("{raw}0"),
    }
}

fn confidence(rng: &mut impl Rng) -> f64 {
    rng.random_range(600..=990u32) as f64 / 1000.0
}

fn doc_fixtures(seed: u64, index: usize, gold: &GoldAnnotation, per_mille: u32) -> DocFixtures {
    let mut rng = doc_rng(seed, index, 1);
    let mut fields = Map::new();
    for (name, (raw, span_id)) in &gold.field_raw {
        let value = if chance(&mut rng, per_mille) { corrupt_text(raw) } else { raw.clone() };
        fields.insert(name.clone(), json!({ "value": value, "confidence": confidence(&mut rng), "source_spans": [span_id] }));
    }
    let mut items = Vec::new();
    for item in &gold.pii_items {
        let missed = chance(&mut rng, per_mille);
        let conf = confidence(&mut rng);
        if !missed {
            items.push(json!({ "category": item.category, "value": item.value, "confidence": conf }));
        }
    }
    let mut dets = Vec::new();
    for (label, boxes) in &gold.symbol_boxes {
        for (page, b) in boxes {
            let mut b = *b;
            let mut score = rng.random_range(850..=990u32) as f64 / 1000.0;
            if chance(&mut rng, per_mille) {
                b.x = b.x.saturating_sub(b.w);
                b.y = b.y.saturating_sub(b.h / 2);
                score = rng.random_range(500..=800u32) as f64 / 1000.0;
            }
            dets.push(json!({ "label": label, "page": page, "bbox": [b.x, b.y, b.w, b.h], "score": score }));
        }
    }
    DocFixtures { extraction: respond(Value::Object(fields)), pii: respond(json!({ "items": items })), visual: respond(json!({ "detections": dets })) }
}

/// Fixtures for every corpus document. At `per_mille = 0` each response is
/// the gold answer; otherwise each field value, PII item and symbol box is
/// independently corrupted with that probability.
pub fn generate_fixtures(corpus: &SyntheticCorpus, per_mille: u32) -> FixtureSet {
    let docs = corpus.gold.iter().enumerate().map(|(i, g)| (g.doc_id.clone(), doc_fixtures(corpus.seed, i, g, per_mille))).collect();
    FixtureSet { corruption_per_mille: per_mille, docs }
}

impl FixtureSet {
    pub fn provider(&self) -> ScriptedProvider {
        let mut p = ScriptedProvider::new();
        for (doc, f) in &self.docs {
            p = p
                .with_doc(doc, TaskKind::Extraction, 1, f.extraction.clone())
                .with_doc(doc, TaskKind::PiiDetection, 1, f.pii.clone())
                .with_doc(doc, TaskKind::VisualDetection, 1, f.visual.clone());
        }
        p
    }

    /// Writes the set in the layout read by [`ScriptedProvider::from_dir`].
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        for (doc, f) in &self.docs {
            write_fixture(dir, Some(doc), TaskKind::Extraction, 1, &f.extraction)?;
            write_fixture(dir, Some(doc), TaskKind::PiiDetection, 1, &f.pii)?;
            write_fixture(dir, Some(doc), TaskKind::VisualDetection, 1, &f.visual)?;
        }
        Ok(())
    }
}
