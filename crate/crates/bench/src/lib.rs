//! Deterministic inputs for the benchmarks.

use chrono::{TimeZone, Utc};
use planloop_core::audit::{Actor, AuditLog, HeadAnchor};
use planloop_core::evalharness::metrics::CharSpan;
use planloop_core::evalharness::{generate_synthetic_corpus, GoldBox, ScoredBox};
use planloop_core::pii::{anchor_locations, PiiCandidate, VerifierStatus};
use planloop_core::redaction::RedactionPlan;
use planloop_core::review::{ReviewAction, ReviewPayload, ReviewSession};
use planloop_core::vischeck::Detection;
use planloop_core::{BoundingBox, DocumentBundle, Page};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn boxed(r: &mut impl Rng, extent: u32) -> BoundingBox {
    let (x, y) = (r.random_range(0..extent), r.random_range(0..extent));
    BoundingBox::new(x, y, r.random_range(4..40), r.random_range(4..40)).unwrap()
}

/// Sorted, non-overlapping character spans.
pub fn spans(seed: u64, n: usize) -> Vec<CharSpan> {
    let mut r = rng(seed);
    let mut at = 0;
    (0..n)
        .map(|_| {
            at += r.random_range(1..20);
            let s = (at, at + r.random_range(1..12));
            at = s.1;
            s
        })
        .collect()
}

/// Gold boxes and noisy scored predictions over `docs` documents.
pub fn detection_case(seed: u64, docs: usize, per_doc: usize) -> (Vec<GoldBox>, Vec<ScoredBox>) {
    let mut r = rng(seed);
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for d in 0..docs {
        let doc_id = format!("doc-{d}");
        for _ in 0..per_doc {
            let label = if r.random_bool(0.5) { "north_point" } else { "red_line" };
            let bbox = boxed(&mut r, 400);
            gold.push(GoldBox { doc_id: doc_id.clone(), page_index: 0, label: label.into(), bbox });
            let shifted = BoundingBox::new(bbox.x + r.random_range(0..4), bbox.y, bbox.w, bbox.h).unwrap();
            pred.push(ScoredBox { doc_id: doc_id.clone(), page_index: 0, label: label.into(), bbox: shifted, score: r.random() });
            if r.random_bool(0.3) {
                pred.push(ScoredBox { doc_id: doc_id.clone(), page_index: 0, label: label.into(), bbox: boxed(&mut r, 400), score: r.random() });
            }
        }
    }
    (gold, pred)
}

/// Clustered detections, so suppression has work to do.
pub fn nms_case(seed: u64, n: usize) -> Vec<Detection> {
    let mut r = rng(seed);
    let centres: Vec<BoundingBox> = (0..(n / 8).max(1)).map(|_| boxed(&mut r, 1000)).collect();
    (0..n)
        .map(|i| {
            let c = centres[i % centres.len()];
            let bbox = BoundingBox::new(c.x + r.random_range(0..6), c.y + r.random_range(0..6), c.w, c.h).unwrap();
            Detection { label: "north_point".into(), bbox, score: r.random(), page_index: 0 }
        })
        .collect()
}

/// The first page of one synthetic document.
pub fn corpus_page(seed: u64) -> Page {
    generate_synthetic_corpus(seed, 1).unwrap().docs.remove(0).pages.remove(0)
}

/// A persisted-format audit log of `n` events and its head anchor.
pub fn audit_log(n: usize) -> (Vec<u8>, HeadAnchor) {
    let tick = std::sync::atomic::AtomicI64::new(0);
    let log = AuditLog::in_memory().with_clock(move || Utc.timestamp_opt(1_700_000_000 + tick.fetch_add(1, std::sync::atomic::Ordering::SeqCst), 0).unwrap());
    for i in 0..n {
        let actor = if i % 3 == 0 { Actor::System } else { Actor::operator(format!("officer-{}", i % 5)) };
        log.append(actor, "ReviewTransition", &json!({ "doc_id": format!("doc-{}", i % 7), "item_id": format!("item-{i}"), "from": "Suggested", "to": "Confirmed" })).unwrap();
    }
    (log.serialized(), log.head())
}

/// A synthetic document and a plan covering all of its planted PII.
pub fn redaction_case(seed: u64) -> (DocumentBundle, RedactionPlan) {
    let corpus = generate_synthetic_corpus(seed, 1).unwrap();
    let bundle = corpus.docs[0].clone();
    let session = ReviewSession::new();
    let audit = AuditLog::in_memory();
    let payloads = corpus.gold[0]
        .pii_items
        .iter()
        .enumerate()
        .map(|(i, p)| {
            ReviewPayload::Pii(PiiCandidate {
                candidate_id: format!("pii-{:04}", i + 1),
                category: p.category,
                value: p.value.clone(),
                locations: anchor_locations(&bundle, &p.value),
                confidence: 0.9,
                verifier_status: VerifierStatus::NotApplicable,
            })
        })
        .collect();
    for item in session.add_suggestions(&bundle.doc_id, payloads) {
        session.apply(&item.item_id, &ReviewAction::Confirm, "bench", None, &audit).unwrap();
    }
    let plan = RedactionPlan::from_review(&bundle, &session.items_for(&bundle.doc_id), "bench", Utc.timestamp_opt(1_700_000_000, 0).unwrap());
    (bundle, plan)
}
