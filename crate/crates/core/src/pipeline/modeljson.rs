//! Robust extraction of typed records from noisy model output.
//!
//! Models are asked for JSON arrays but wrap them in code fences, prose,
//! or both. The parser strips Markdown fence lines, then scans for the
//! first balanced top-level `[...]` (string- and escape-aware) that parses
//! as a JSON array, and validates each object against the expected schema.
//! Unknown extra fields are ignored.

use serde_json::Value;
use thiserror::Error;

use crate::promptkit::ElementKind;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON array found in model output")]
    NoArrayFound,
    #[error("object {index}: field {field:?} is missing or malformed")]
    SchemaViolation { index: usize, field: &'static str },
    #[error("extraction ids must be consecutive starting at 1")]
    NonConsecutiveIds,
}

/// Schema the model output is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseSchema {
    /// Extraction output: `{"id", "fact"}`, ids consecutive from 1.
    Extraction(ElementKind),
    /// Classification output: `{"id", "classification"}`.
    FavorabilityLabels,
    /// Inclusion output: `{"id", "included"}` with strict booleans.
    InclusionVerdicts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactItem {
    pub id: i64,
    pub fact: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningItem {
    pub id: i64,
    pub party: Option<String>,
    pub reasoning: String,
    pub legal_issue: Option<String>,
    pub cited_law: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelItem {
    pub id: i64,
    /// Raw label string; mapping to a favorability value happens at the
    /// classification step so unknown labels can carry their original text.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerdictItem {
    pub id: i64,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParsedResponse {
    Facts(Vec<FactItem>),
    Reasoning(Vec<ReasoningItem>),
    Labels(Vec<LabelItem>),
    Verdicts(Vec<VerdictItem>),
}

/// Parses one model reply against the expected schema.
pub fn parse_model_json(raw: &str, schema: ResponseSchema) -> Result<ParsedResponse, ParseError> {
    let array = first_json_array(raw).ok_or(ParseError::NoArrayFound)?;
    match schema {
        ResponseSchema::Extraction(ElementKind::Fact) => {
            let items = parse_items(&array, parse_fact)?;
            check_consecutive(items.iter().map(|f| f.id))?;
            Ok(ParsedResponse::Facts(items))
        }
        ResponseSchema::Extraction(ElementKind::Reasoning) => {
            let items = parse_items(&array, parse_reasoning)?;
            check_consecutive(items.iter().map(|r| r.id))?;
            Ok(ParsedResponse::Reasoning(items))
        }
        ResponseSchema::FavorabilityLabels => {
            Ok(ParsedResponse::Labels(parse_items(&array, parse_label)?))
        }
        ResponseSchema::InclusionVerdicts => {
            Ok(ParsedResponse::Verdicts(parse_items(&array, parse_verdict)?))
        }
    }
}

/// Finds the first balanced top-level JSON array in `raw` (after dropping
/// Markdown fence lines) that serde accepts.
pub(crate) fn first_json_array(raw: &str) -> Option<Vec<Value>> {
    let cleaned: String = raw
        .lines()
        .filter(|line| !line.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n");
    let bytes = cleaned.as_bytes();
    let mut start = 0;
    while let Some(offset) = cleaned[start..].find('[') {
        let open = start + offset;
        if let Some(end) = balanced_end(bytes, open) {
            if let Ok(Value::Array(items)) = serde_json::from_str(&cleaned[open..=end]) {
                return Some(items);
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the `]` closing the bracket at `open`, tracking strings and
/// escapes so brackets inside values do not count.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' => depth += 1,
            b']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_items<T>(
    array: &[Value],
    parse_one: impl Fn(usize, &Value) -> Result<T, ParseError>,
) -> Result<Vec<T>, ParseError> {
    array
        .iter()
        .enumerate()
        .map(|(index, value)| parse_one(index, value))
        .collect()
}

fn require_id(index: usize, value: &Value) -> Result<i64, ParseError> {
    value
        .get("id")
        .and_then(Value::as_i64)
        .filter(|id| *id >= 1)
        .ok_or(ParseError::SchemaViolation { index, field: "id" })
}

fn require_string(index: usize, value: &Value, field: &'static str) -> Result<String, ParseError> {
    value
        .get(field)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or(ParseError::SchemaViolation { index, field })
}

fn optional_string(value: &Value, field: &str) -> Option<String> {
    value
        .get(field)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn parse_fact(index: usize, value: &Value) -> Result<FactItem, ParseError> {
    Ok(FactItem {
        id: require_id(index, value)?,
        fact: require_string(index, value, "fact")?,
    })
}

fn parse_reasoning(index: usize, value: &Value) -> Result<ReasoningItem, ParseError> {
    let cited_law = value
        .get("cited law")
        .or_else(|| value.get("cited_law"))
        .and_then(Value::as_array)
        .map(|laws| {
            laws.iter()
                .filter_map(Value::as_str)
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    Ok(ReasoningItem {
        id: require_id(index, value)?,
        party: optional_string(value, "party"),
        reasoning: require_string(index, value, "reasoning")?,
        legal_issue: optional_string(value, "legal issue")
            .or_else(|| optional_string(value, "legal_issue")),
        cited_law,
    })
}

fn parse_label(index: usize, value: &Value) -> Result<LabelItem, ParseError> {
    Ok(LabelItem {
        id: require_id(index, value)?,
        label: require_string(index, value, "classification")?,
    })
}

fn parse_verdict(index: usize, value: &Value) -> Result<VerdictItem, ParseError> {
    let included = value
        .get("included")
        .and_then(Value::as_bool)
        .ok_or(ParseError::SchemaViolation {
            index,
            field: "included",
        })?;
    Ok(VerdictItem {
        id: require_id(index, value)?,
        included,
    })
}

fn check_consecutive(ids: impl Iterator<Item = i64>) -> Result<(), ParseError> {
    for (position, id) in ids.enumerate() {
        if id != position as i64 + 1 {
            return Err(ParseError::NonConsecutiveIds);
        }
    }
    Ok(())
}
