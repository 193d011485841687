//! Metadata field suggestions and value normalization.

use std::collections::HashSet;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    FreeText,
    Date,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub fields: Vec<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("duplicate metadata field {0:?}")]
    DuplicateField(String),
    #[error("metadata schema has no fields")]
    Empty,
}

impl MetadataSchema {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.fields.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateField(f.name.clone()));
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// The Title/Date/Scale schema used by the bundled configuration.
    pub fn planning_default() -> Self {
        MetadataSchema {
            fields: vec![
                FieldSpec { name: "Title".into(), kind: FieldKind::FreeText, required: true },
                FieldSpec { name: "Date".into(), kind: FieldKind::Date, required: true },
                FieldSpec { name: "Scale".into(), kind: FieldKind::Scale, required: false },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldStatus {
    Normalized,
    Unparseable,
    MissingRequired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSuggestion {
    pub field_name: String,
    pub value: String,
    pub raw_value: String,
    pub confidence: f64,
    pub source_spans: Vec<String>,
    pub status: FieldStatus,
}

/// Highest confidence an unparseable value may carry.
pub const UNPARSEABLE_CONFIDENCE_CAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable {kind:?} value {text:?}")]
pub struct Unparseable {
    pub kind: FieldKind,
    pub text: String,
}

fn month_number(name: &str) -> Option<u32> {
    const MONTHS: [&str; 12] = ["january", "february", "march", "april", "may", "june", "july", "august", "september", "october", "november", "december"];
    let name = name.trim_end_matches('.');
    if name == "sept" {
        return Some(9);
    }
    MONTHS.iter().position(|m| *m == name || (name.len() == 3 && m.starts_with(name))).map(|i| i as u32 + 1)
}

static ISO_DATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d{4})-(\d{1,2})-(\d{1,2})$").unwrap());
static NUMERIC_DATE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d{1,2})\s*[/.\-]\s*(\d{1,2})\s*[/.\-]\s*(\d{4})$").unwrap());
static DAY_MONTH_YEAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d{1,2})(?:st|nd|rd|th)?(?:\s+of)?[\s\-]+([a-z]+\.?)[\s,\-]+(\d{4})$").unwrap());
static MONTH_DAY_YEAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^([a-z]+\.?)\s+(\d{1,2})(?:st|nd|rd|th)?[\s,]+(\d{4})$").unwrap());

/// Normalizes a date to `YYYY-MM-DD`. All-numeric dates are read day-first.
pub fn normalize_date(text: &str) -> Result<String, Unparseable> {
    let fail = || Unparseable { kind: FieldKind::Date, text: text.to_string() };
    let t = text.trim().to_lowercase();
    let t = t.split_whitespace().collect::<Vec<_>>().join(" ");
    let num = |s: &str| s.parse::<u32>().ok();
    let (y, m, d) = if let Some(c) = ISO_DATE.captures(&t) {
        (num(&c[1]), num(&c[2]), num(&c[3]))
    } else if let Some(c) = NUMERIC_DATE.captures(&t) {
        (num(&c[3]), num(&c[2]), num(&c[1]))
    } else if let Some(c) = DAY_MONTH_YEAR.captures(&t) {
        (num(&c[3]), month_number(&c[2]), num(&c[1]))
    } else if let Some(c) = MONTH_DAY_YEAR.captures(&t) {
        (num(&c[3]), month_number(&c[1]), num(&c[2]))
    } else {
        return Err(fail());
    };
    let (Some(y), Some(m), Some(d)) = (y, m, d) else { return Err(fail()) };
    let date = NaiveDate::from_ymd_opt(y as i32, m, d).ok_or_else(fail)?;
    Ok(date.format("%Y-%m-%d").to_string())
}

static SCALE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^(?:scale\b\s*[:=\-]?\s*)?1\s*[:/]\s*(\d{1,3}(?:,\d{3})+|\d+)$").unwrap());

/// Normalizes a representative-fraction scale to `1:N`.
pub fn normalize_scale(text: &str) -> Result<String, Unparseable> {
    let fail = || Unparseable { kind: FieldKind::Scale, text: text.to_string() };
    let t = text.trim();
    let c = SCALE.captures(t).ok_or_else(fail)?;
    let n: u64 = c[1].replace(',', "").parse().map_err(|_| fail())?;
    if n == 0 {
        return Err(fail());
    }
    Ok(format!("1:{n}"))
}

fn normalize_free_text(text: &str) -> Option<String> {
    let v = text.split_whitespace().collect::<Vec<_>>().join(" ");
    (!v.is_empty()).then_some(v)
}

/// Normalizes one raw value according to its field kind.
pub fn normalize_field(kind: FieldKind, raw: &str) -> Result<String, Unparseable> {
    match kind {
        FieldKind::FreeText => normalize_free_text(raw).ok_or(Unparseable { kind, text: raw.to_string() }),
        FieldKind::Date => normalize_date(raw),
        FieldKind::Scale => normalize_scale(raw),
    }
}

struct RawField {
    value: String,
    confidence: f64,
    source_spans: Vec<String>,
}

fn read_raw_field(v: &Value) -> Option<RawField> {
    match v {
        Value::String(s) => Some(RawField { value: s.clone(), confidence: 1.0, source_spans: Vec::new() }),
        Value::Object(o) => {
            let value = o.get("value")?.as_str()?.to_string();
            let confidence = o.get("confidence").and_then(Value::as_f64).unwrap_or(1.0).clamp(0.0, 1.0);
            let source_spans = o
                .get("source_spans")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(|s| s.as_str().map(str::to_string)).collect())
                .unwrap_or_default();
            Some(RawField { value, confidence, source_spans })
        }
        _ => None,
    }
}

/// Converts schema-validated provider output into one suggestion per schema
/// field. Missing (or blank) required fields produce a zero-confidence
/// placeholder; missing optional fields are omitted.
pub fn parse_suggestions(raw: &Value, schema: &MetadataSchema) -> Vec<FieldSuggestion> {
    let mut out = Vec::new();
    for spec in &schema.fields {
        let field = raw.get(&spec.name).and_then(read_raw_field).filter(|f| !f.value.trim().is_empty());
        let Some(field) = field else {
            if spec.required {
                out.push(FieldSuggestion {
                    field_name: spec.name.clone(),
                    value: String::new(),
                    raw_value: String::new(),
                    confidence: 0.0,
                    source_spans: Vec::new(),
                    status: FieldStatus::MissingRequired,
                });
            }
            continue;
        };
        let suggestion = match normalize_field(spec.kind, &field.value) {
            Ok(value) => FieldSuggestion {
                field_name: spec.name.clone(),
                value,
                raw_value: field.value,
                confidence: field.confidence,
                source_spans: field.source_spans,
                status: FieldStatus::Normalized,
            },
            Err(_) => FieldSuggestion {
                field_name: spec.name.clone(),
                value: field.value.trim().to_string(),
                raw_value: field.value,
                confidence: field.confidence.min(UNPARSEABLE_CONFIDENCE_CAP),
                source_spans: field.source_spans,
                status: FieldStatus::Unparseable,
            },
        };
        out.push(suggestion);
    }
    out
}
