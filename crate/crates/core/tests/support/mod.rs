//! Independent oracles and seeded instance generators shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use image::{GrayImage, Luma};
use num_rational::Ratio;
use planloop_core::audit::{Actor, AuditLog, HeadAnchor};
use planloop_core::docmodel::{find_text_occurrences, BoundingBox, DocumentBundle, Page, TextSpan};
use planloop_core::evalharness::metrics::CharSpan;
use planloop_core::evalharness::{GoldBox, PiiRecord, ScoredBox};
use planloop_core::pii::{anchor_locations, normalized_value, PiiCategory, PiiLocation};
use planloop_core::redaction::{PlanItem, RedactionPlan};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub type Q = Ratio<i128>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixed_time(offset_secs: i64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 3, 12, 9, 0, 0).unwrap() + Duration::seconds(offset_secs)
}

// ---------------------------------------------------------------- metrics

pub fn brute_span_counts(gold: &[CharSpan], pred: &[CharSpan]) -> (usize, usize, usize) {
    let mut g: Vec<CharSpan> = Vec::new();
    for s in gold {
        if !g.contains(s) {
            g.push(*s);
        }
    }
    let mut p: Vec<CharSpan> = Vec::new();
    for s in pred {
        if !p.contains(s) {
            p.push(*s);
        }
    }
    let tp = p.iter().filter(|s| g.contains(s)).count();
    (tp, g.len(), p.len())
}

/// Precision, recall and F1 as exact fractions; zero denominators give 0.
pub fn brute_prf(tp: usize, n_gold: usize, n_pred: usize) -> (Q, Q, Q) {
    let frac = |a: usize, b: usize| if b == 0 { Q::from_integer(0) } else { Q::new(a as i128, b as i128) };
    let (p, r) = (frac(tp, n_pred), frac(tp, n_gold));
    let f = if p + r == Q::from_integer(0) { Q::from_integer(0) } else { Q::from_integer(2) * p * r / (p + r) };
    (p, r, f)
}

/// Pixel-counted overlap and union areas.
pub fn brute_areas(a: &BoundingBox, b: &BoundingBox) -> (i128, i128) {
    let (mut inter, mut uni) = (0i128, 0i128);
    let x1 = a.right().max(b.right());
    let y1 = a.bottom().max(b.bottom());
    for y in a.y.min(b.y)..y1 {
        for x in a.x.min(b.x)..x1 {
            let ia = x >= a.x && x < a.right() && y >= a.y && y < a.bottom();
            let ib = x >= b.x && x < b.right() && y >= b.y && y < b.bottom();
            inter += (ia && ib) as i128;
            uni += (ia || ib) as i128;
        }
    }
    (inter, uni)
}

pub fn brute_iou(a: &BoundingBox, b: &BoundingBox) -> Q {
    let (i, u) = brute_areas(a, b);
    if u == 0 {
        Q::from_integer(0)
    } else {
        Q::new(i, u)
    }
}

pub fn brute_pii_match(g: &PiiRecord, p: &PiiRecord) -> bool {
    if g.category != p.category {
        return false;
    }
    let gv = normalized_value(g.category, &g.value);
    if !gv.is_empty() && gv == normalized_value(p.category, &p.value) {
        return true;
    }
    for gl in &g.locations {
        for pl in &p.locations {
            if gl.page_index == pl.page_index && brute_iou(&gl.bbox, &pl.bbox) >= Q::new(1, 2) {
                return true;
            }
        }
    }
    false
}

pub struct BruteRecall {
    pub per_category: BTreeMap<PiiCategory, Q>,
    pub micro: Option<Q>,
    pub macro_avg: Option<Q>,
}

pub fn brute_recall(gold: &[PiiRecord], pred: &[PiiRecord]) -> BruteRecall {
    let mut per_category = BTreeMap::new();
    let (mut found_all, mut total_all) = (0i128, 0i128);
    for cat in PiiCategory::ALL {
        let golds: Vec<&PiiRecord> = gold.iter().filter(|g| g.category == cat).collect();
        if golds.is_empty() {
            continue;
        }
        let found = golds.iter().filter(|g| pred.iter().any(|p| brute_pii_match(g, p))).count() as i128;
        found_all += found;
        total_all += golds.len() as i128;
        per_category.insert(cat, Q::new(found, golds.len() as i128));
    }
    let micro = (total_all > 0).then(|| Q::new(found_all, total_all));
    let macro_avg = (!per_category.is_empty()).then(|| per_category.values().sum::<Q>() / Q::from_integer(per_category.len() as i128));
    BruteRecall { per_category, micro, macro_avg }
}

/// Average precision per label with every quantity kept as an exact
/// fraction: each true positive contributes `1/G` times the best precision
/// at that rank or any later one.
pub fn brute_map(gold: &[GoldBox], pred: &[ScoredBox], labels: &[&str]) -> (BTreeMap<String, Q>, Option<Q>) {
    let mut per_label = BTreeMap::new();
    for &label in labels {
        let golds: Vec<&GoldBox> = gold.iter().filter(|g| g.label == label).collect();
        let mut preds: Vec<&ScoredBox> = pred.iter().filter(|p| p.label == label).collect();
        if golds.is_empty() && preds.is_empty() {
            continue;
        }
        preds.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then_with(|| (&a.doc_id, a.page_index, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h).cmp(&(&b.doc_id, b.page_index, b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)))
        });
        let mut taken = vec![false; golds.len()];
        let mut flags = Vec::new();
        for p in &preds {
            let mut best: Option<(usize, Q)> = None;
            for (i, g) in golds.iter().enumerate() {
                if taken[i] || g.doc_id != p.doc_id || g.page_index != p.page_index {
                    continue;
                }
                let v = brute_iou(&g.bbox, &p.bbox);
                if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                    best = Some((i, v));
                }
            }
            let hit = match best {
                Some((i, v)) if v >= Q::new(1, 2) => {
                    taken[i] = true;
                    true
                }
                _ => false,
            };
            flags.push(hit);
        }
        let n_gold = golds.len() as i128;
        let mut ap = Q::from_integer(0);
        if n_gold > 0 {
            let precisions: Vec<Q> = (0..flags.len()).map(|k| Q::new(flags[..=k].iter().filter(|&&f| f).count() as i128, k as i128 + 1)).collect();
            for k in 0..flags.len() {
                if flags[k] {
                    let envelope = precisions[k..].iter().max().copied().unwrap();
                    ap += envelope / Q::from_integer(n_gold);
                }
            }
        }
        per_label.insert(label.to_string(), ap);
    }
    let mean = (!per_label.is_empty()).then(|| per_label.values().sum::<Q>() / Q::from_integer(per_label.len() as i128));
    (per_label, mean)
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

pub fn close(a: f64, q: Q) -> bool {
    (a - to_f64(q)).abs() <= 1e-12
}

// ------------------------------------------------------ random instances

pub fn random_spans(r: &mut impl Rng) -> Vec<CharSpan> {
    (0..r.random_range(0..=10))
        .map(|_| {
            let s = r.random_range(0..15);
            (s, s + r.random_range(1..=5))
        })
        .collect()
}

pub fn random_box(r: &mut impl Rng, extent: u32) -> BoundingBox {
    BoundingBox { x: r.random_range(0..extent), y: r.random_range(0..extent), w: r.random_range(1..=extent / 2), h: r.random_range(1..=extent / 2) }
}

const RECALL_CATEGORIES: [PiiCategory; 3] = [PiiCategory::Names, PiiCategory::Emails, PiiCategory::Signatures];
const VALUE_POOL: [&str; 5] = ["John Smith", "john smith", "a@b.co", "A@B.CO", ""];

pub fn random_pii_records(r: &mut impl Rng) -> Vec<PiiRecord> {
    (0..r.random_range(0..=10))
        .map(|_| {
            let category = *RECALL_CATEGORIES.choose(r).unwrap();
            let value = if category == PiiCategory::Signatures { String::new() } else { VALUE_POOL.choose(r).unwrap().to_string() };
            let locations = (0..r.random_range(0..=2)).map(|_| PiiLocation { page_index: r.random_range(0..2), bbox: random_box(r, 16), span_id: None }).collect();
            PiiRecord { category, value, locations }
        })
        .collect()
}

pub fn random_detection_instance(r: &mut impl Rng) -> (Vec<GoldBox>, Vec<ScoredBox>) {
    let labels = ["a", "b"];
    let docs = ["d1", "d2"];
    let gold: Vec<GoldBox> = (0..r.random_range(0..=10))
        .map(|_| GoldBox { doc_id: docs.choose(r).unwrap().to_string(), page_index: 0, label: labels.choose(r).unwrap().to_string(), bbox: random_box(r, 16) })
        .collect();
    let pred = (0..r.random_range(0..=10))
        .map(|_| {
            // Predictions are often jittered copies of gold boxes so that
            // both hits and misses occur.
            let bbox = match gold.choose(r) {
                Some(g) if r.random_bool(0.6) => BoundingBox { x: g.bbox.x + r.random_range(0..=1), y: g.bbox.y, w: g.bbox.w, h: g.bbox.h + r.random_range(0..=1) },
                _ => random_box(r, 16),
            };
            let label = labels.choose(r).unwrap().to_string();
            let doc_id = docs.choose(r).unwrap().to_string();
            ScoredBox { doc_id, page_index: 0, label, bbox, score: r.random_range(1..=5) as f64 / 5.0 }
        })
        .collect();
    (gold, pred)
}

// ------------------------------------------------------------- redaction

const ALPHABET: [char; 4] = ['a', 'b', 'c', ' '];

fn random_word(r: &mut impl Rng, len: usize) -> String {
    let mut s: String = (0..len).map(|_| *ALPHABET.choose(r).unwrap()).collect();
    // Spans start and end on ink.
    let fix = |c: char| if c == ' ' { 'a' } else { c };
    let mut chars: Vec<char> = s.chars().collect();
    chars[0] = fix(chars[0]);
    let last = chars.len() - 1;
    chars[last] = fix(chars[last]);
    s = chars.into_iter().collect();
    s
}

/// A one-page bundle of short spans over a small alphabet, inked as grey
/// bars, so that values repeat and straddle adjacent spans.
pub fn random_bundle(r: &mut impl Rng, doc_id: &str) -> DocumentBundle {
    let (w, h) = (420u32, 140u32);
    let mut page = Page::blank(0, w, h);
    let mut n = 0;
    for line in 0..r.random_range(2..=5u32) {
        let y = 8 + line * 26;
        let mut x = r.random_range(0..20u32);
        for _ in 0..r.random_range(1..=4) {
            let len = r.random_range(1..=8usize);
            // Some spans are narrower than their character count.
            let char_w = if r.random_bool(0.1) { 0 } else { r.random_range(4..=10u32) };
            let span_w = if char_w == 0 { (len as u32 / 2).max(1) } else { char_w * len as u32 };
            if x + span_w >= w {
                break;
            }
            n += 1;
            page.spans.push(TextSpan { span_id: format!("s{n}"), text: random_word(r, len), page_index: 0, bbox: BoundingBox { x, y, w: span_w, h: 14 } });
            x += span_w + r.random_range(0..=12u32);
        }
    }
    ink(&mut page.image, &page.spans);
    DocumentBundle { doc_id: doc_id.to_string(), pages: vec![page], metadata: BTreeMap::new(), provenance: "random".into() }
}

fn ink(img: &mut GrayImage, spans: &[TextSpan]) {
    for s in spans {
        for y in s.bbox.y + 2..s.bbox.bottom() - 2 {
            for x in s.bbox.x..s.bbox.right() {
                img.put_pixel(x, y, Luma([60]));
            }
        }
    }
}

fn random_value(r: &mut impl Rng, bundle: &DocumentBundle) -> String {
    let spans = &bundle.pages[0].spans;
    let s = spans.choose(r).unwrap();
    let chars: Vec<char> = s.text.chars().collect();
    let next = spans.iter().find(|t| t.bbox.y == s.bbox.y && t.bbox.x > s.bbox.x);
    match next {
        Some(t) if r.random_bool(0.4) => {
            let a = r.random_range(0..chars.len());
            let tail: String = chars[a..].iter().collect();
            let tc: Vec<char> = t.text.chars().collect();
            let head: String = tc[..r.random_range(1..=tc.len())].iter().collect();
            let sep = if r.random_bool(0.5) { " " } else { "" };
            format!("{tail}{sep}{head}")
        }
        _ => {
            let a = r.random_range(0..chars.len());
            let b = r.random_range(a + 1..=chars.len());
            chars[a..b].iter().collect()
        }
    }
}

/// A seeded bundle and a plan of one to three anchored values.
pub fn random_pair(seed: u64) -> (DocumentBundle, RedactionPlan) {
    let mut r = rng(seed);
    let bundle = random_bundle(&mut r, &format!("rnd-{seed}"));
    let mut items = Vec::new();
    for k in 0..r.random_range(1..=3) {
        let mut value = random_value(&mut r, &bundle);
        if value.trim().is_empty() {
            value = bundle.pages[0].spans[0].text.clone();
        }
        let locations = anchor_locations(&bundle, &value);
        assert!(!locations.is_empty(), "value {value:?} taken from the bundle must anchor");
        items.push(PlanItem { item_id: format!("{}:{:04}", bundle.doc_id, k + 1), candidate_id: format!("pii-{:04}", k + 1), category: PiiCategory::Names, value, locations });
    }
    let plan = RedactionPlan { doc_id: bundle.doc_id.clone(), items, operator_id: "officer".into(), created_at: fixed_time(0) };
    (bundle, plan)
}

/// Residue at the plan's sites found without the library's own scrub:
/// readable occurrences of a value whose spans touch a site, surviving
/// spans inside a site, and unblackened pixels.
pub fn independent_residue(bundle: &DocumentBundle, plan: &RedactionPlan) -> Vec<String> {
    let mut out = Vec::new();
    for item in &plan.items {
        let hits = find_text_occurrences(bundle, &item.value).unwrap();
        for loc in &item.locations {
            let page = bundle.page(loc.page_index).unwrap();
            for hit in hits.iter().filter(|h| h.page_index == loc.page_index) {
                let touches = hit.covered.iter().any(|piece| bundle.find_span(&piece.span_id).is_some_and(|s| s.bbox.intersects(&loc.bbox)));
                if touches {
                    out.push(format!("{:?} readable at {}", item.value, loc.bbox));
                }
            }
            for s in page.spans.iter().filter(|s| s.bbox.intersects(&loc.bbox)) {
                out.push(format!("span {} survives inside {}", s.span_id, loc.bbox));
            }
            for y in loc.bbox.y..loc.bbox.bottom() {
                for x in loc.bbox.x..loc.bbox.right() {
                    if page.image.get_pixel(x, y).0[0] != 0 {
                        out.push(format!("pixel ({x},{y}) not black"));
                    }
                }
            }
        }
    }
    out
}

// ----------------------------------------------------------------- audit

/// A 100-event in-memory log with a deterministic clock.
pub fn hundred_event_log(seed: u64) -> (Vec<u8>, HeadAnchor) {
    let mut r = rng(seed);
    let tick = std::sync::atomic::AtomicI64::new(0);
    let log = AuditLog::in_memory().with_clock(move || fixed_time(tick.fetch_add(1, std::sync::atomic::Ordering::SeqCst)));
    for i in 0..100 {
        let actor = if r.random_bool(0.5) { Actor::System } else { Actor::operator(format!("officer-{}", r.random_range(1..=3))) };
        let action = ["Ingested", "ReviewTransition", "ProviderRequest", "FinalHash"].choose(&mut r).unwrap();
        let payload = json!({"doc_id": format!("doc-{}", i % 7), "n": r.random_range(0..1000), "note": "é ✓ \"quoted\" \\ tab"});
        log.append(actor, action, &payload).unwrap();
    }
    (log.serialized(), log.head())
}

// -------------------------------------------------------------- verifiers

pub const VERIFIER_CORPORA: [(&str, &str); 3] = [
    ("email", include_str!("../data/verifier/emails.tsv")),
    ("phone", include_str!("../data/verifier/phones.tsv")),
    ("postcode", include_str!("../data/verifier/postcodes.tsv")),
];

/// `(expected_valid, value)` rows of a corpus file.
pub fn corpus_rows(text: &str) -> Vec<(bool, &str)> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (label, value) = l.split_once('\t').expect("rows are label<TAB>value");
            match label {
                "valid" => (true, value),
                "invalid" => (false, value),
                other => panic!("unknown label {other:?}"),
            }
        })
        .collect()
}

pub fn verifier_accepts(kind: &str, value: &str) -> bool {
    match kind {
        "email" => planloop_core::pii::is_valid_email(value),
        "phone" => planloop_core::pii::normalize_uk_phone(value).is_some(),
        "postcode" => planloop_core::pii::is_valid_postcode(value),
        other => panic!("unknown verifier {other}"),
    }
}

// ---------------------------------------------------------------- review

use planloop_core::review::{ReviewAction, ReviewError, ReviewItem, ReviewPayload, ReviewSession, ReviewState};

/// One input symbol of the review model: an action and who issues it.
#[derive(Debug, Clone)]
pub struct Symbol {
    pub action: ReviewAction,
    pub operator: &'static str,
}

pub fn review_alphabet() -> Vec<Symbol> {
    let s = |action, operator| Symbol { action, operator };
    vec![
        s(ReviewAction::Confirm, "officer"),
        s(ReviewAction::Reject, "officer"),
        s(ReviewAction::Edit("2024-03-12".into()), "officer"),
        s(ReviewAction::Edit("  ".into()), "officer"),
        s(ReviewAction::Commit, "officer"),
        s(ReviewAction::Confirm, ""),
        s(ReviewAction::Commit, " "),
    ]
}

#[derive(Debug, Default)]
pub struct EnumerationReport {
    pub sequences: usize,
    pub committed: usize,
    pub violations: Vec<String>,
}

fn sample_field() -> ReviewPayload {
    use planloop_core::extraction::{FieldStatus, FieldSuggestion};
    ReviewPayload::Field(FieldSuggestion { field_name: "Date".into(), value: "2024-03-21".into(), raw_value: "21/03/2024".into(), confidence: 0.97, source_spans: vec!["s1".into()], status: FieldStatus::Normalized })
}

/// Runs every action string up to `max_len` through a live session (commits
/// go through the batch-commit path) and checks that a `Committed` item
/// always has an operator's approval before the commit, that every accepted
/// transition wrote exactly one audit event, and that history replays to
/// the current state.
pub fn enumerate_review_sequences(max_len: usize) -> EnumerationReport {
    let alphabet = review_alphabet();
    let mut report = EnumerationReport::default();
    let mut stack: Vec<Vec<usize>> = vec![vec![]];
    while let Some(seq) = stack.pop() {
        if seq.len() < max_len {
            for k in 0..alphabet.len() {
                let mut next = seq.clone();
                next.push(k);
                stack.push(next);
            }
        }
        report.sequences += 1;
        let session = ReviewSession::new();
        let audit = AuditLog::in_memory();
        let id = session.add_suggestions("doc", vec![sample_field()])[0].item_id.clone();
        let mut accepted = 0usize;
        for &k in &seq {
            let sym = &alphabet[k];
            let outcome: Result<ReviewItem, ReviewError> = match sym.action {
                ReviewAction::Commit => session.commit_with(std::slice::from_ref(&id), sym.operator, &audit, |_| Ok::<_, ReviewError>((vec![], ()))).map(|(_, mut v)| v.remove(0)),
                _ => session.apply(&id, &sym.action, sym.operator, None, &audit),
            };
            if outcome.is_ok() {
                accepted += 1;
            }
        }
        let item = session.get(&id).unwrap();
        let label = || format!("{:?}", seq.iter().map(|&k| (&alphabet[k].action, alphabet[k].operator)).collect::<Vec<_>>());
        if audit.len() != accepted || item.history.len() != accepted {
            report.violations.push(format!("{}: {accepted} accepted, {} events", label(), audit.len()));
        }
        if item.replay() != (item.state, item.edited_value.clone()) {
            report.violations.push(format!("{}: replay disagrees", label()));
        }
        if item.history.iter().any(|h| h.operator.trim().is_empty()) {
            report.violations.push(format!("{}: anonymous transition", label()));
        }
        if item.state == ReviewState::Committed {
            report.committed += 1;
            let last = item.history.last().unwrap();
            let approved = item.history[..item.history.len() - 1].iter().any(|h| matches!(h.action, ReviewAction::Confirm | ReviewAction::Edit(_)));
            if !approved || !matches!(last.from, ReviewState::Confirmed | ReviewState::Edited) {
                report.violations.push(format!("{}: committed without approval", label()));
            }
        }
    }
    report
}
