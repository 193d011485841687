//! Rule and lexicon tagger used as the comparison baseline.

use std::sync::LazyLock;

use regex::Regex;

use super::metrics::{CharSpan, PiiRecord};
use crate::docmodel::{DocumentBundle, DocumentText, TextSpan};
use crate::extraction::normalize_date;
use crate::pii::{anchor_locations, find_postcodes, find_street_addresses, is_valid_email, normalize_uk_phone, PiiCategory};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPrediction {
    pub field_name: String,
    pub value: String,
    pub span: Option<CharSpan>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub fields: Vec<FieldPrediction>,
    pub pii: Vec<PiiRecord>,
}

const MONTH: &str = r"(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Sept|Oct|Nov|Dec)[a-z]*\.?";

static DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)\b(?:\d{{4}}-\d{{1,2}}-\d{{1,2}}|\d{{1,2}}[/.\-]\d{{1,2}}[/.\-]\d{{4}}|\d{{1,2}}(?:st|nd|rd|th)?[ \-]{MONTH}[ \-]\d{{4}}|{MONTH} \d{{1,2}}(?:st|nd|rd|th)?,? \d{{4}})\b"
    ))
    .unwrap()
});
static EMAIL_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[^\s@,;:<>()\[\]]+@[^\s@,;:<>()\[\]]+").unwrap());
static PHONE_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:\+44\s?(?:\(0\)\s?)?|\b0)\d[\d ]{7,11}\d\b").unwrap());
static HONORIFIC_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(?:Mr|Mrs|Ms|Miss|Dr)\.? ((?:[A-Z][a-z'\-]+)(?: [A-Z][a-zA-Z'\-]+){1,2})\b").unwrap());

fn reading_order(bundle: &DocumentBundle) -> Vec<&TextSpan> {
    let mut spans: Vec<&TextSpan> = bundle.spans().collect();
    spans.sort_by_key(|s| (s.page_index, s.bbox.y, s.bbox.x));
    spans
}

fn char_span(text: &DocumentText, span: &TextSpan, byte_range: std::ops::Range<usize>) -> Option<CharSpan> {
    let (start, _) = text.span_range(&span.span_id)?;
    let a = span.text[..byte_range.start].chars().count();
    let b = a + span.text[byte_range].chars().count();
    Some((start + a, start + b))
}

fn record(bundle: &DocumentBundle, category: PiiCategory, value: &str) -> PiiRecord {
    PiiRecord { category, value: value.to_string(), locations: anchor_locations(bundle, value) }
}

fn push_unique(out: &mut Vec<PiiRecord>, r: PiiRecord) {
    if !out.iter().any(|o| o.category == r.category && o.value == r.value) {
        out.push(r);
    }
}

/// Title: the widest span whose centre lies in the top fifth of the first
/// page. Date: the first date-shaped string in reading order. PII: the
/// verifier grammars run as scanners, street lexicon plus postcode for
/// addresses, and honorific-led capitalized words for names.
pub fn baseline_ner(bundle: &DocumentBundle) -> Predictions {
    let text = DocumentText::of(bundle);
    let mut out = Predictions::default();
    if let Some(page) = bundle.pages.first() {
        let band = page.height as u64;
        let title = page
            .spans
            .iter()
            .filter(|s| (2 * s.bbox.y as u64 + s.bbox.h as u64) * 5 < 2 * band)
            .max_by(|a, b| a.bbox.w.cmp(&b.bbox.w).then(b.bbox.y.cmp(&a.bbox.y)).then(b.bbox.x.cmp(&a.bbox.x)));
        if let Some(t) = title {
            out.fields.push(FieldPrediction { field_name: "Title".into(), value: t.text.clone(), span: char_span(&text, t, 0..t.text.len()) });
        }
    }
    'date: for span in reading_order(bundle) {
        for m in DATE.find_iter(&span.text) {
            if let Ok(v) = normalize_date(m.as_str()) {
                out.fields.push(FieldPrediction { field_name: "Date".into(), value: v, span: char_span(&text, span, m.range()) });
                break 'date;
            }
        }
    }
    for span in reading_order(bundle) {
        let t = &span.text;
        for m in EMAIL_TOKEN.find_iter(t) {
            let v = m.as_str().trim_end_matches('.');
            if is_valid_email(v) {
                push_unique(&mut out.pii, record(bundle, PiiCategory::Emails, v));
            }
        }
        for m in PHONE_TOKEN.find_iter(t) {
            if normalize_uk_phone(m.as_str()).is_some() {
                push_unique(&mut out.pii, record(bundle, PiiCategory::Phones, m.as_str().trim()));
            }
        }
        let streets = find_street_addresses(t);
        for pc in find_postcodes(t) {
            let start = streets.iter().filter(|s| s.end <= pc.start).map(|s| s.start).min().unwrap_or(pc.start);
            push_unique(&mut out.pii, record(bundle, PiiCategory::Addresses, &t[start..pc.end]));
        }
        for s in streets.iter().filter(|s| find_postcodes(&t[s.end..]).is_empty()) {
            push_unique(&mut out.pii, record(bundle, PiiCategory::Addresses, &t[s.clone()]));
        }
        for c in HONORIFIC_NAME.captures_iter(t) {
            push_unique(&mut out.pii, record(bundle, PiiCategory::Names, &c[1]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::docmodel::{BoundingBox, Page};
    use std::collections::BTreeMap;

    fn bundle(lines: &[(&str, u32)]) -> DocumentBundle {
        let mut page = Page::blank(0, 1000, 800);
        for (i, (text, y)) in lines.iter().enumerate() {
            page.spans.push(TextSpan { span_id: format!("s{i}"), text: text.to_string(), page_index: 0, bbox: BoundingBox { x: 40, y: *y, w: 10 * text.len() as u32, h: 16 } });
        }
        DocumentBundle { doc_id: "d".into(), pages: vec![page], metadata: BTreeMap::new(), provenance: "t".into() }
    }

    #[test]
    fn finds_each_kind() {
        let b = bundle(&[("Rear Extension at the Old Barn", 40), ("Email: jo@example.com", 300), ("Applicant: Mr John Smith", 330), ("Site Address: 12 Mill Lane, Bristol BS1 4ST", 360), ("Date: 12 March 2024", 700)]);
        let p = baseline_ner(&b);
        let get = |n: &str| p.fields.iter().find(|f| f.field_name == n).unwrap();
        assert_eq!(get("Title").value, "Rear Extension at the Old Barn");
        assert_eq!(get("Date").value, "2024-03-12");
        let vals: Vec<(PiiCategory, &str)> = p.pii.iter().map(|r| (r.category, r.value.as_str())).collect();
        assert!(vals.contains(&(PiiCategory::Emails, "jo@example.com")));
        assert!(vals.contains(&(PiiCategory::Names, "John Smith")));
        assert!(vals.contains(&(PiiCategory::Addresses, "12 Mill Lane, Bristol BS1 4ST")));
        assert_eq!(vals.iter().filter(|v| v.0 == PiiCategory::Emails).count(), 1);
    }
}
