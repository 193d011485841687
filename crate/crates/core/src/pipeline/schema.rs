//! Response schemas. Validation is structural and hand-written per schema id.

use serde_json::{Map, Value};

use crate::pii::PiiCategory;

/// Strips a surrounding Markdown code fence, if present.
fn unfence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn is_unit_interval(v: &Value) -> bool {
    v.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f))
}

fn check_bbox(v: &Value, at: &str) -> Result<(), String> {
    let arr = v.as_array().ok_or_else(|| format!("{at}.bbox must be an array"))?;
    if arr.len() != 4 || !arr.iter().all(|n| n.as_u64().is_some_and(|n| n <= u32::MAX as u64)) {
        return Err(format!("{at}.bbox must be four non-negative integers"));
    }
    if arr[2].as_u64() == Some(0) || arr[3].as_u64() == Some(0) {
        return Err(format!("{at}.bbox must have positive width and height"));
    }
    Ok(())
}

fn check_metadata(obj: &Map<String, Value>) -> Result<(), String> {
    for (k, v) in obj {
        match v {
            Value::String(_) => {}
            Value::Object(f) => {
                if !f.get("value").is_some_and(Value::is_string) {
                    return Err(format!("field {k:?} needs a string value"));
                }
                if f.get("confidence").is_some_and(|c| !is_unit_interval(c)) {
                    return Err(format!("field {k:?} confidence outside [0,1]"));
                }
                if let Some(s) = f.get("source_spans") {
                    if !s.as_array().is_some_and(|a| a.iter().all(Value::is_string)) {
                        return Err(format!("field {k:?} source_spans must be strings"));
                    }
                }
            }
            _ => return Err(format!("field {k:?} must be a string or an object")),
        }
    }
    Ok(())
}

fn check_pii(obj: &Map<String, Value>) -> Result<(), String> {
    let items = obj.get("items").and_then(Value::as_array).ok_or("missing items array")?;
    for (i, item) in items.iter().enumerate() {
        let at = format!("items[{i}]");
        let cat = item.get("category").and_then(Value::as_str).ok_or(format!("{at}.category missing"))?;
        let cat = PiiCategory::parse(cat).ok_or(format!("{at}.category {cat:?} unknown"))?;
        if !item.get("value").is_some_and(Value::is_string) {
            return Err(format!("{at}.value must be a string"));
        }
        if !item.get("confidence").is_some_and(is_unit_interval) {
            return Err(format!("{at}.confidence must be in [0,1]"));
        }
        let locs = match item.get("locations") {
            None => &Vec::new(),
            Some(v) => v.as_array().ok_or(format!("{at}.locations must be an array"))?,
        };
        for (j, l) in locs.iter().enumerate() {
            let lat = format!("{at}.locations[{j}]");
            if !l.get("page").is_some_and(|p| p.as_u64().is_some_and(|p| p <= u32::MAX as u64)) {
                return Err(format!("{lat}.page must be a non-negative integer"));
            }
            check_bbox(l.get("bbox").unwrap_or(&Value::Null), &lat)?;
        }
        if cat == PiiCategory::Signatures && locs.is_empty() {
            return Err(format!("{at}: signatures need at least one location"));
        }
    }
    Ok(())
}

fn check_detections(obj: &Map<String, Value>) -> Result<(), String> {
    let dets = obj.get("detections").and_then(Value::as_array).ok_or("missing detections array")?;
    for (i, d) in dets.iter().enumerate() {
        let at = format!("detections[{i}]");
        if !d.get("label").and_then(Value::as_str).is_some_and(|l| !l.is_empty()) {
            return Err(format!("{at}.label must be a non-empty string"));
        }
        if !d.get("page").is_some_and(|p| p.as_u64().is_some_and(|p| p <= u32::MAX as u64)) {
            return Err(format!("{at}.page must be a non-negative integer"));
        }
        check_bbox(d.get("bbox").unwrap_or(&Value::Null), &at)?;
        if !d.get("score").is_some_and(is_unit_interval) {
            return Err(format!("{at}.score must be in [0,1]"));
        }
    }
    Ok(())
}

/// Parses and validates a provider's raw text against `schema_id`. Empty
/// text is invalid.
pub fn validate_response(schema_id: &str, raw_text: &str) -> Result<Value, String> {
    let body = unfence(raw_text);
    if body.is_empty() {
        return Err("empty response".into());
    }
    let value: Value = serde_json::from_str(body).map_err(|e| format!("not JSON: {e}"))?;
    let obj = value.as_object().ok_or("top level must be an object")?;
    match schema_id {
        "metadata/v1" => check_metadata(obj)?,
        "pii/v1" => check_pii(obj)?,
        "detections/v1" => check_detections(obj)?,
        other => return Err(format!("unknown schema {other:?}")),
    }
    Ok(value)
}
