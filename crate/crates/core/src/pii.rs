//! PII candidates: anchoring provider claims to bundle text, deterministic
//! format verifiers, and de-duplication.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audit::{Actor, AuditLog};
use crate::docmodel::{find_text_occurrences, BoundingBox, ContentHash, DocumentBundle, HitPiece};
use crate::pipeline::{run_task, PipelineError, Provider, Suggestion, TaskConfig, TaskKind, TaskResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PiiCategory {
    Names,
    Addresses,
    Emails,
    Phones,
    Signatures,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 5] = [PiiCategory::Names, PiiCategory::Addresses, PiiCategory::Emails, PiiCategory::Phones, PiiCategory::Signatures];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiCategory::Names => "Names",
            PiiCategory::Addresses => "Addresses",
            PiiCategory::Emails => "Emails",
            PiiCategory::Phones => "Phones",
            PiiCategory::Signatures => "Signatures",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        PiiCategory::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn is_text_bearing(self) -> bool {
        self != PiiCategory::Signatures
    }

    /// Categories whose verifier failure blocks a redaction commit.
    pub fn verifier_blocks_commit(self) -> bool {
        matches!(self, PiiCategory::Emails | PiiCategory::Phones)
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierStatus {
    NotApplicable,
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PiiLocation {
    pub page_index: u32,
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiiCandidate {
    pub candidate_id: String,
    pub category: PiiCategory,
    pub value: String,
    pub locations: Vec<PiiLocation>,
    pub confidence: f64,
    pub verifier_status: VerifierStatus,
}

/// A location as claimed by the provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimedLocation {
    pub page: u32,
    pub bbox: BoundingBox,
}

/// A PII item as claimed by the provider, before anchoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimedPii {
    pub category: PiiCategory,
    pub value: String,
    pub confidence: f64,
    #[serde(default)]
    pub locations: Vec<ClaimedLocation>,
}

static EMAIL: LazyLock<Regex> = LazyLock::new(|| {
    let atext = r"[A-Za-z0-9!#$%&'*+/=?^_`{|}~\-]+";
    let label = r"[A-Za-z0-9](?:[A-Za-z0-9\-]{0,61}[A-Za-z0-9])?";
    Regex::new(&format!(r"^{atext}(?:\.{atext})*@(?:{label}\.)+[A-Za-z]{{2,63}}$")).unwrap()
});

/// Mailbox grammar: dot-atom local part, dotted hostname with an alphabetic
/// top-level label.
pub fn is_valid_email(s: &str) -> bool {
    let Some((local, _)) = s.rsplit_once('@') else { return false };
    local.len() <= 64 && s.len() <= 254 && EMAIL.is_match(s)
}

/// Normalizes a UK phone number to its national (trunk `0`) digit string.
pub fn normalize_uk_phone(s: &str) -> Option<String> {
    let s = s.trim();
    let s = s.replace("(0)", "");
    if !s.chars().all(|c| c.is_ascii_digit() || matches!(c, ' ' | '-' | '.' | '(' | ')' | '+')) {
        return None;
    }
    if s.matches('+').count() > 1 || (s.contains('+') && !s.starts_with('+')) {
        return None;
    }
    let digits: String = s.chars().filter(|c| c.is_ascii_digit()).collect();
    let national = if s.starts_with('+') {
        format!("0{}", digits.strip_prefix("44")?)
    } else if let Some(rest) = digits.strip_prefix("0044") {
        format!("0{rest}")
    } else {
        digits
    };
    let after_trunk = national.strip_prefix('0')?;
    let ok = (9..=10).contains(&after_trunk.len()) && !after_trunk.starts_with('0');
    ok.then_some(national)
}

/// Outward code (A9, A9A, A99, AA9, AA9A, AA99) and inward code (digit plus
/// two letters other than C, I, K, M, O, V), or the single GIR 0AA code.
const POSTCODE_GRAMMAR: &str = r"(?:(?:[A-PR-UWYZ][0-9][0-9A-HJKPSTUW]?|[A-PR-UWYZ][A-HK-Y][0-9][0-9ABEHMNPRVWXY]?) ?[0-9][ABD-HJLNP-UW-Z]{2}|GIR ?0AA)";

static POSTCODE: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!(r"\b{POSTCODE_GRAMMAR}\b")).unwrap());
static POSTCODE_EXACT: LazyLock<Regex> = LazyLock::new(|| Regex::new(&format!(r"^{POSTCODE_GRAMMAR}$")).unwrap());

/// Whole-string UK postcode check; case and surrounding space are ignored.
pub fn is_valid_postcode(s: &str) -> bool {
    POSTCODE_EXACT.is_match(&s.trim().to_ascii_uppercase())
}

static STREET_SUFFIXES: LazyLock<Vec<String>> = LazyLock::new(|| {
    include_str!("../config/street_suffixes.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
});

static STREET: LazyLock<Regex> = LazyLock::new(|| {
    let suffixes = STREET_SUFFIXES.iter().map(|s| regex::escape(s)).collect::<Vec<_>>().join("|");
    Regex::new(&format!(r"(?i)\b\d{{1,4}}[a-z]?,?\s+(?:[a-z][a-z'\-]*\s+){{1,4}}(?:{suffixes})\b")).unwrap()
});

pub fn street_suffixes() -> &'static [String] {
    &STREET_SUFFIXES
}

/// Finds UK postcodes in free text.
pub fn find_postcodes(text: &str) -> Vec<std::ops::Range<usize>> {
    POSTCODE.find_iter(text).map(|m| m.range()).collect()
}

/// Finds "number + street name + lexicon suffix" patterns in free text.
pub fn find_street_addresses(text: &str) -> Vec<std::ops::Range<usize>> {
    STREET.find_iter(text).map(|m| m.range()).collect()
}

pub fn is_plausible_address(s: &str) -> bool {
    POSTCODE.is_match(s) || STREET.is_match(s)
}

/// Deterministic format check for a candidate value.
pub fn verify_value(category: PiiCategory, value: &str) -> VerifierStatus {
    let pass = |ok: bool| if ok { VerifierStatus::Passed } else { VerifierStatus::Failed };
    match category {
        PiiCategory::Emails => pass(is_valid_email(value.trim())),
        PiiCategory::Phones => pass(normalize_uk_phone(value).is_some()),
        PiiCategory::Addresses => pass(is_plausible_address(value)),
        PiiCategory::Names | PiiCategory::Signatures => VerifierStatus::NotApplicable,
    }
}

pub fn verify_format(candidate: &PiiCandidate) -> VerifierStatus {
    verify_value(candidate.category, &candidate.value)
}

/// Value key used to decide whether two candidates name the same thing.
pub fn normalized_value(category: PiiCategory, value: &str) -> String {
    match category {
        PiiCategory::Emails => value.trim().to_lowercase(),
        PiiCategory::Phones => normalize_uk_phone(value).unwrap_or_else(|| value.chars().filter(char::is_ascii_digit).collect()),
        PiiCategory::Signatures => String::new(),
        _ => value.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
    }
}

/// Sub-box of a span covering characters `[start, end)` under a uniform
/// character pitch, widened outward to whole pixels.
pub fn piece_bbox(span_bbox: &BoundingBox, n_chars: usize, piece: &HitPiece) -> BoundingBox {
    let (w, n) = (span_bbox.w as u64, n_chars.max(1) as u64);
    let left = w * piece.start as u64 / n;
    let right = (w * piece.end as u64).div_ceil(n);
    BoundingBox { x: span_bbox.x + left as u32, y: span_bbox.y, w: (right - left).max(1) as u32, h: span_bbox.h }
}

/// Every place `value` occurs in the bundle, one location per covered span.
pub fn anchor_locations(bundle: &DocumentBundle, value: &str) -> Vec<PiiLocation> {
    let Ok(hits) = find_text_occurrences(bundle, value) else { return Vec::new() };
    let mut out = BTreeSet::new();
    for hit in hits {
        for piece in &hit.covered {
            let Some(span) = bundle.find_span(&piece.span_id) else { continue };
            let bbox = piece_bbox(&span.bbox, span.text.chars().count(), piece);
            out.insert(PiiLocation { page_index: hit.page_index, bbox, span_id: Some(piece.span_id.clone()) });
        }
    }
    out.into_iter().collect()
}

fn value_digest(value: &str) -> String {
    ContentHash::of_bytes(value.as_bytes()).to_hex()
}

/// Turns claims into candidates. Text claims take their locations from the
/// bundle text itself; claims that cannot be anchored are dropped and one
/// `HallucinationFiltered` event is written per dropped claim.
pub fn anchor_claims(bundle: &DocumentBundle, claims: &[ClaimedPii], audit: &AuditLog) -> Result<Vec<PiiCandidate>, crate::audit::AuditError> {
    let mut out = Vec::new();
    for claim in claims {
        let locations = if claim.category.is_text_bearing() {
            if claim.value.trim().is_empty() {
                Vec::new()
            } else {
                anchor_locations(bundle, &claim.value)
            }
        } else {
            claim
                .locations
                .iter()
                .filter_map(|l| {
                    let page = bundle.page(l.page)?;
                    let bbox = l.bbox.clip(page.width, page.height)?;
                    Some(PiiLocation { page_index: l.page, bbox, span_id: None })
                })
                .collect()
        };
        if locations.is_empty() {
            audit.append(
                Actor::System,
                "HallucinationFiltered",
                &json!({
                    "doc_id": bundle.doc_id,
                    "category": claim.category,
                    "value_sha256": value_digest(&claim.value),
                    "reason": if claim.category.is_text_bearing() { "value not found in document text" } else { "no location within the document" },
                }),
            )?;
            continue;
        }
        let value = if claim.category.is_text_bearing() { claim.value.clone() } else { String::new() };
        let mut candidate = PiiCandidate {
            candidate_id: String::new(),
            category: claim.category,
            value,
            locations,
            confidence: claim.confidence.clamp(0.0, 1.0),
            verifier_status: VerifierStatus::NotApplicable,
        };
        candidate.verifier_status = verify_format(&candidate);
        out.push(candidate);
    }
    Ok(out)
}

fn assign_ids(candidates: &mut [PiiCandidate]) {
    for (i, c) in candidates.iter_mut().enumerate() {
        c.candidate_id = format!("pii-{:04}", i + 1);
    }
}

fn overlapping(a: &PiiCandidate, b: &PiiCandidate) -> bool {
    a.locations.iter().any(|la| b.locations.iter().any(|lb| la.page_index == lb.page_index && la.bbox.iou(&lb.bbox) > 0.5))
}

/// Merges candidates with the same category and normalized value whose
/// locations overlap (IoU > 0.5 on some pair). Merged candidates keep the
/// maximum confidence and the union of locations.
pub fn dedupe(candidates: &[PiiCandidate]) -> Vec<PiiCandidate> {
    let n = candidates.len();
    let keys: Vec<(PiiCategory, String)> = candidates.iter().map(|c| (c.category, normalized_value(c.category, &c.value))).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if keys[i] == keys[j] && overlapping(&candidates[i], &candidates[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    let mut merged: Vec<PiiCandidate> = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let rep = g.iter().copied().min_by(|&a, &b| candidates[a].candidate_id.cmp(&candidates[b].candidate_id).then(a.cmp(&b))).unwrap();
            let mut out = candidates[rep].clone();
            out.confidence = g.iter().map(|&i| candidates[i].confidence).fold(0.0, f64::max);
            let locs: BTreeSet<PiiLocation> = g.iter().flat_map(|&i| candidates[i].locations.iter().cloned()).collect();
            out.locations = locs.into_iter().collect();
            out
        })
        .collect();
    merged.sort_by(|a, b| a.candidate_id.cmp(&b.candidate_id).then_with(|| a.locations.cmp(&b.locations)));
    merged
}

/// Runs the PII task and turns its claims into anchored, verified,
/// de-duplicated candidates.
pub fn detect_pii(bundle: &DocumentBundle, config: &TaskConfig, provider: &dyn Provider, audit: &AuditLog) -> Result<Vec<PiiCandidate>, PipelineError> {
    detect_pii_with_result(bundle, config, provider, audit).map(|(_, c)| c)
}

/// [`detect_pii`] that also returns the underlying task result (cost,
/// attempts and the raw claims).
pub fn detect_pii_with_result(bundle: &DocumentBundle, config: &TaskConfig, provider: &dyn Provider, audit: &AuditLog) -> Result<(TaskResult, Vec<PiiCandidate>), PipelineError> {
    if config.task_kind != TaskKind::PiiDetection {
        return Err(PipelineError::Config(format!("detect_pii needs a pii_detection config, got {}", config.task_kind)));
    }
    let result = run_task(bundle, config, provider, audit)?;
    let claims: Vec<ClaimedPii> = result
        .suggestions
        .iter()
        .filter_map(|s| match s {
            Suggestion::Pii(c) => Some(c.clone()),
            _ => None,
        })
        .collect();
    let mut candidates = anchor_claims(bundle, &claims, audit)?;
    assign_ids(&mut candidates);
    let mut candidates = dedupe(&candidates);
    assign_ids(&mut candidates);
    Ok((result, candidates))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn email_grammar() {
        assert!(is_valid_email("john@example.com"));
        assert!(is_valid_email("j.o-h+n@mail.example.co.uk"));
        assert!(!is_valid_email("john@@example.com"));
        assert!(!is_valid_email("john.@example.com"));
        assert!(!is_valid_email("john@example"));
        assert!(!is_valid_email("john@-example.com"));
    }

    #[test]
    fn phone_grammar() {
        assert_eq!(normalize_uk_phone("+44 20 7946 0958").as_deref(), Some("02079460958"));
        assert_eq!(normalize_uk_phone("+44 (0)20 7946 0958").as_deref(), Some("02079460958"));
        assert_eq!(normalize_uk_phone("01632 960 001").as_deref(), Some("01632960001"));
        assert!(normalize_uk_phone("12345").is_none());
        assert!(normalize_uk_phone("+1 212 555 0100").is_none());
        assert!(normalize_uk_phone("020 7946 095x").is_none());
    }

    #[test]
    fn address_grammar() {
        assert!(is_plausible_address("10 Downing Street, SW1A 2AA"));
        assert!(is_plausible_address("Flat 2, M1 1AE"));
        assert!(is_plausible_address("221b Baker Street"));
        assert!(!is_plausible_address("Downing Street"));
        assert!(!is_plausible_address("the rear garden"));
    }

    #[test]
    fn piece_boxes_cover_the_characters() {
        let b = BoundingBox::new(100, 10, 100, 20).unwrap();
        let p = HitPiece { span_id: "s".into(), start: 5, end: 10 };
        assert_eq!(piece_bbox(&b, 10, &p), BoundingBox::new(150, 10, 50, 20).unwrap());
        let p = HitPiece { span_id: "s".into(), start: 1, end: 2 };
        assert_eq!(piece_bbox(&b, 3, &p), BoundingBox::new(133, 10, 34, 20).unwrap());
    }
}
