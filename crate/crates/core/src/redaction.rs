//! True-removal redaction: text is deleted from the span layer, pixels are
//! blackened, and the result is re-checked before anything is committed.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use image::Luma;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{Actor, AuditError, AuditLog};
use crate::docmodel::{content_hash, find_text_occurrences, BoundingBox, ContentHash, DocumentBundle, TextSpan};
use crate::pii::{anchor_locations, verify_value, PiiCategory, PiiLocation, VerifierStatus};
use crate::review::{ReviewError, ReviewItem, ReviewPayload, ReviewSession, ReviewState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    pub item_id: String,
    pub candidate_id: String,
    pub category: PiiCategory,
    pub value: String,
    pub locations: Vec<PiiLocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedactionPlan {
    pub doc_id: String,
    pub items: Vec<PlanItem>,
    pub operator_id: String,
    pub created_at: DateTime<Utc>,
}

fn sha256_hex(s: &str) -> String {
    ContentHash::of_bytes(s.as_bytes()).to_hex()
}

impl RedactionPlan {
    /// Builds a plan from approved PII review items. Items in any other state
    /// are still listed so that commit can refuse them by name.
    pub fn from_review(bundle: &DocumentBundle, items: &[ReviewItem], operator_id: &str, created_at: DateTime<Utc>) -> RedactionPlan {
        let mut plan_items = Vec::new();
        for item in items {
            let ReviewPayload::Pii(c) = &item.payload else { continue };
            let mut locations: BTreeSet<PiiLocation> = c.locations.iter().cloned().collect();
            let value = match &item.edited_value {
                Some(v) => {
                    if c.category.is_text_bearing() {
                        locations.extend(anchor_locations(bundle, v));
                    }
                    v.clone()
                }
                None => c.value.clone(),
            };
            plan_items.push(PlanItem { item_id: item.item_id.clone(), candidate_id: c.candidate_id.clone(), category: c.category, value, locations: locations.into_iter().collect() });
        }
        RedactionPlan { doc_id: bundle.doc_id.clone(), items: plan_items, operator_id: operator_id.to_string(), created_at }
    }

    /// The plan as written to the audit log: values appear only as digests.
    pub fn audit_view(&self) -> Value {
        json!({
            "doc_id": self.doc_id,
            "operator_id": self.operator_id,
            "created_at": self.created_at.to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            "items": self.items.iter().map(|i| json!({
                "item_id": i.item_id,
                "candidate_id": i.candidate_id,
                "category": i.category,
                "value_sha256": sha256_hex(&i.value),
                "locations": i.locations,
            })).collect::<Vec<_>>(),
        })
    }

    pub fn digest(&self) -> ContentHash {
        ContentHash::of_bytes(self.audit_view().to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Residue {
    /// A span still overlaps the redacted box.
    SpanAtSite { span_id: String },
    /// The redacted value still reads out at the site, possibly across
    /// adjacent spans.
    ValueAtSite { span_ids: Vec<String> },
    /// A pixel inside the box is not black.
    Pixel { x: u32, y: u32, value: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubResidue {
    pub candidate_id: String,
    pub location: PiiLocation,
    pub residue: Residue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubReport {
    pub clean: bool,
    pub sites_checked: usize,
    pub residues: Vec<ScrubResidue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedactionResult {
    pub new_bundle: DocumentBundle,
    pub removed_texts: Vec<String>,
    pub widened_spans: Vec<String>,
    pub final_hash: ContentHash,
    pub scrub_report: ScrubReport,
}

#[derive(Debug, thiserror::Error)]
pub enum RedactionError {
    #[error("location of {candidate_id} on page {page_index} cannot be resolved")]
    UnresolvableLocation { candidate_id: String, page_index: u32 },
    #[error("scrub verification failed with {} residue(s)", .0.residues.len())]
    ScrubFailed(ScrubReport),
    #[error("commit rejected for {item_id}: {reason}")]
    CommitRejected { item_id: String, reason: String },
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

fn sites(plan: &RedactionPlan) -> impl Iterator<Item = (&PlanItem, &PiiLocation)> {
    plan.items.iter().flat_map(|i| i.locations.iter().map(move |l| (i, l)))
}

/// The id a fragment or span descends from.
fn origin_id(span_id: &str) -> &str {
    span_id.split_once('~').map_or(span_id, |(a, _)| a)
}

/// Retained runs of `span` after removing every character whose pixel
/// interval overlaps one of `boxes`. Returns the fragments and the removed
/// text runs, or `None` when the span has to go as a whole.
fn split_span(span: &TextSpan, boxes: &[BoundingBox]) -> Option<(Vec<TextSpan>, Vec<String>)> {
    let chars: Vec<char> = span.text.chars().collect();
    let n = chars.len() as u64;
    let (x, w) = (span.bbox.x as u64, span.bbox.w as u64);
    if n == 0 || w < n {
        return None;
    }
    let removed: Vec<bool> = (0..n)
        .map(|i| {
            let (lo, hi) = (x * n + w * i, x * n + w * (i + 1));
            boxes.iter().any(|b| lo < (b.x as u64 + b.w as u64) * n && (b.x as u64) * n < hi)
        })
        .collect();
    let mut fragments = Vec::new();
    let mut removed_runs = Vec::new();
    let mut i = 0usize;
    while i < chars.len() {
        let keep = !removed[i];
        let start = i;
        while i < chars.len() && removed[i] != keep {
            i += 1;
        }
        let text: String = chars[start..i].iter().collect();
        if !keep {
            removed_runs.push(text);
            continue;
        }
        let left = (x * n + w * start as u64).div_ceil(n);
        let right = (x * n + w * i as u64) / n;
        if right <= left || text.trim().is_empty() {
            continue;
        }
        let id = format!("{}~{}", span.span_id, fragments.len() + 1);
        fragments.push(TextSpan { span_id: id, text, page_index: span.page_index, bbox: BoundingBox { x: left as u32, y: span.bbox.y, w: (right - left) as u32, h: span.bbox.h } });
    }
    Some((fragments, removed_runs))
}

fn check_resolvable(bundle: &DocumentBundle, plan: &RedactionPlan) -> Result<(), RedactionError> {
    for (item, loc) in sites(plan) {
        let ok = bundle.page(loc.page_index).is_some_and(|p| loc.bbox.fits_within(p.width, p.height));
        if !ok {
            return Err(RedactionError::UnresolvableLocation { candidate_id: item.candidate_id.clone(), page_index: loc.page_index });
        }
    }
    Ok(())
}

/// One removal pass. Spans in `whole` are dropped entirely.
fn remove_once(bundle: &DocumentBundle, plan: &RedactionPlan, whole: &BTreeSet<String>) -> (DocumentBundle, Vec<String>) {
    let mut out = bundle.clone();
    let mut removed_texts = Vec::new();
    for page in &mut out.pages {
        let boxes: Vec<BoundingBox> = sites(plan).filter(|(_, l)| l.page_index == page.index).map(|(_, l)| l.bbox).collect();
        let mut spans = Vec::new();
        for span in std::mem::take(&mut page.spans) {
            let touching: Vec<BoundingBox> = boxes.iter().filter(|b| b.intersects(&span.bbox)).copied().collect();
            if whole.contains(&span.span_id) {
                removed_texts.push(span.text);
                continue;
            }
            if touching.is_empty() {
                spans.push(span);
                continue;
            }
            match split_span(&span, &touching) {
                Some((fragments, runs)) => {
                    spans.extend(fragments);
                    removed_texts.extend(runs);
                }
                None => removed_texts.push(span.text),
            }
        }
        let taken: BTreeSet<String> = spans.iter().map(|s| s.span_id.clone()).collect();
        // Fragment ids must not shadow pre-existing ids.
        for s in &mut spans {
            if s.span_id.contains('~') && bundle.find_span(&s.span_id).is_some() {
                let mut id = s.span_id.clone();
                while taken.contains(&id) || bundle.find_span(&id).is_some() {
                    id.push('~');
                }
                s.span_id = id;
            }
        }
        page.spans = spans;
        for b in &boxes {
            for yy in b.y..b.bottom() {
                for xx in b.x..b.right() {
                    page.image.put_pixel(xx, yy, Luma([0]));
                }
            }
        }
    }
    (out, removed_texts)
}

/// Re-checks every redacted site of `plan` in `bundle`.
pub fn scrub_verify(bundle: &DocumentBundle, plan: &RedactionPlan) -> ScrubReport {
    let mut residues = Vec::new();
    let mut sites_checked = 0;
    let mut hits_cache: BTreeMap<&str, Vec<crate::docmodel::TextHit>> = BTreeMap::new();
    for (item, loc) in sites(plan) {
        sites_checked += 1;
        let push = |residues: &mut Vec<ScrubResidue>, residue| residues.push(ScrubResidue { candidate_id: item.candidate_id.clone(), location: loc.clone(), residue });
        let Some(page) = bundle.page(loc.page_index) else { continue };
        for span in page.spans.iter().filter(|s| s.bbox.intersects(&loc.bbox)) {
            push(&mut residues, Residue::SpanAtSite { span_id: span.span_id.clone() });
        }
        if item.category.is_text_bearing() && !item.value.is_empty() {
            let hits = hits_cache.entry(item.value.as_str()).or_insert_with(|| find_text_occurrences(bundle, &item.value).unwrap_or_default());
            for hit in hits.iter().filter(|h| h.page_index == loc.page_index) {
                let ids = hit.covered_ids();
                let hull = ids.iter().filter_map(|id| bundle.find_span(id)).map(|s| s.bbox).reduce(|a, b| a.union(&b));
                if hull.is_some_and(|h| h.intersects(&loc.bbox)) {
                    push(&mut residues, Residue::ValueAtSite { span_ids: ids.iter().map(|s| s.to_string()).collect() });
                }
            }
        }
        if let Some(b) = loc.bbox.clip(page.width, page.height) {
            'px: for yy in b.y..b.bottom() {
                for xx in b.x..b.right() {
                    let v = page.image.get_pixel(xx, yy).0[0];
                    if v != 0 {
                        push(&mut residues, Residue::Pixel { x: xx, y: yy, value: v });
                        break 'px;
                    }
                }
            }
        }
    }
    ScrubReport { clean: residues.is_empty(), sites_checked, residues }
}

/// Removes the plan's content from a copy of `bundle`. Characters are
/// mapped to pixels proportionally; when the value still reads out at a
/// site, the spans involved are removed whole and the pass is repeated.
pub fn apply_redactions(bundle: &DocumentBundle, plan: &RedactionPlan) -> Result<RedactionResult, RedactionError> {
    check_resolvable(bundle, plan)?;
    let mut whole: BTreeSet<String> = BTreeSet::new();
    loop {
        let (new_bundle, removed_texts) = remove_once(bundle, plan, &whole);
        let report = scrub_verify(&new_bundle, plan);
        if report.clean {
            let final_hash = content_hash(&new_bundle);
            return Ok(RedactionResult { new_bundle, removed_texts, widened_spans: whole.into_iter().collect(), final_hash, scrub_report: report });
        }
        let before = whole.len();
        for r in &report.residues {
            let ids: Vec<&str> = match &r.residue {
                Residue::SpanAtSite { span_id } => vec![span_id],
                Residue::ValueAtSite { span_ids } => span_ids.iter().map(String::as_str).collect(),
                Residue::Pixel { .. } => vec![],
            };
            whole.extend(ids.into_iter().map(|id| origin_id(id).to_string()));
        }
        if whole.len() == before {
            return Err(RedactionError::ScrubFailed(report));
        }
    }
}

/// Blackens pixels and leaves the text layer untouched. This is what an
/// overlay-only redaction looks like; scrub verification must reject it.
pub fn overlay_only(bundle: &DocumentBundle, plan: &RedactionPlan) -> DocumentBundle {
    let mut out = bundle.clone();
    for (_, loc) in sites(plan) {
        let Some(page) = out.pages.iter_mut().find(|p| p.index == loc.page_index) else { continue };
        if let Some(b) = loc.bbox.clip(page.width, page.height) {
            for yy in b.y..b.bottom() {
                for xx in b.x..b.right() {
                    page.image.put_pixel(xx, yy, Luma([0]));
                }
            }
        }
    }
    out
}

fn precheck(plan: &RedactionPlan, items: &[ReviewItem]) -> Result<(), RedactionError> {
    if plan.items.is_empty() {
        return Err(RedactionError::CommitRejected { item_id: String::new(), reason: "plan is empty".into() });
    }
    for (p, r) in plan.items.iter().zip(items) {
        if !matches!(r.state, ReviewState::Confirmed | ReviewState::Edited) {
            return Err(RedactionError::CommitRejected { item_id: p.item_id.clone(), reason: format!("review state is {}", r.state) });
        }
        if p.category.verifier_blocks_commit() && verify_value(p.category, &p.value) != VerifierStatus::Passed {
            return Err(RedactionError::CommitRejected { item_id: p.item_id.clone(), reason: format!("{} value fails format verification", p.category) });
        }
        if p.locations.is_empty() {
            return Err(RedactionError::CommitRejected { item_id: p.item_id.clone(), reason: "no locations".into() });
        }
    }
    Ok(())
}

/// Applies `plan`, verifies the scrub and records the plan, the applied
/// coordinates, the scrub result and the final hash in one atomic audit
/// batch together with the `Committed` transitions. On any failure nothing
/// is committed.
pub fn commit_redaction(bundle: &DocumentBundle, plan: &RedactionPlan, session: &ReviewSession, audit: &AuditLog) -> Result<RedactionResult, RedactionError> {
    // Refuse early with a specific reason before the session's generic check.
    let current: Vec<ReviewItem> = plan
        .items
        .iter()
        .map(|p| session.get(&p.item_id).ok_or_else(|| RedactionError::CommitRejected { item_id: p.item_id.clone(), reason: "unknown review item".into() }))
        .collect::<Result<_, _>>()?;
    precheck(plan, &current)?;
    let ids: Vec<String> = plan.items.iter().map(|p| p.item_id.clone()).collect();
    let doc_id = bundle.doc_id.clone();
    let (result, _) = session.commit_with(&ids, &plan.operator_id, audit, |items| {
        precheck(plan, items)?;
        let result = match apply_redactions(bundle, plan) {
            Ok(r) => r,
            Err(RedactionError::ScrubFailed(report)) => {
                audit.append(Actor::System, "ScrubFailed", &json!({ "doc_id": doc_id, "plan_digest": plan.digest().to_hex(), "residues": report.residues.len() }))?;
                return Err(RedactionError::ScrubFailed(report));
            }
            Err(e) => return Err(e),
        };
        let coordinates: Vec<Value> = sites(plan).map(|(i, l)| json!({ "candidate_id": i.candidate_id, "page_index": l.page_index, "bbox": l.bbox })).collect();
        let events = vec![
            (Actor::operator(plan.operator_id.clone()), "PlanIssued".to_string(), json!({ "doc_id": doc_id, "plan_digest": plan.digest().to_hex(), "plan": plan.audit_view() })),
            (Actor::System, "RedactionApplied".to_string(), json!({ "doc_id": doc_id, "coordinates": coordinates, "removed_runs": result.removed_texts.len(), "widened_spans": result.widened_spans })),
            (Actor::System, "ScrubPassed".to_string(), json!({ "doc_id": doc_id, "sites_checked": result.scrub_report.sites_checked })),
            (Actor::System, "FinalHash".to_string(), json!({ "doc_id": doc_id, "final_hash": result.final_hash.to_hex() })),
        ];
        Ok((events, result))
    })?;
    Ok(result)
}
