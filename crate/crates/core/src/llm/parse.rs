//! Lenient parsing of model responses. Nothing here fails: degraded output
//! becomes fallback predictions with a status flag.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{spans_from_boundaries, token_index_at, ClinicalNote, Label, LabelOntology};
use crate::rules::SegmentationResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParseStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationParse {
    pub labels: Vec<Label>,
    pub status: ParseStatus,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationParse {
    pub result: SegmentationResult,
    pub status: ParseStatus,
}

/// Pulls the first JSON array out of a response, tolerating code fences and
/// surrounding prose.
fn extract_array(text: &str) -> Option<Vec<Value>> {
    if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(text.trim()) {
        return Some(items);
    }
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&text[start..=end]) {
        Ok(Value::Array(items)) => Some(items),
        _ => None,
    }
}

fn label_field(item: &Value) -> Option<&str> {
    match item {
        Value::String(s) => Some(s),
        Value::Object(map) => map.get("label").and_then(Value::as_str),
        _ => None,
    }
}

pub fn parse_classification(text: &str, batch_size: usize, ontology: &LabelOntology) -> ClassificationParse {
    let fallback = ontology.fallback();
    let Some(items) = extract_array(text) else {
        return ClassificationParse {
            labels: vec![fallback.clone(); batch_size],
            status: ParseStatus::Failed,
        };
    };
    let mut slots: Vec<Option<Label>> = vec![None; batch_size];
    let mut degraded = false;
    let mut filled = 0;
    for (pos, item) in items.iter().enumerate() {
        let index = match item.get("index") {
            Some(v) => v.as_u64().map(|i| i as usize),
            None => Some(pos),
        };
        let (Some(index), Some(raw)) = (index, label_field(item)) else {
            degraded = true;
            continue;
        };
        if index >= batch_size || slots[index].is_some() {
            degraded = true;
            continue;
        }
        let label = match ontology.resolve(raw) {
            Some(l) => l.clone(),
            None => {
                degraded = true;
                fallback.clone()
            }
        };
        slots[index] = Some(label);
        filled += 1;
    }
    if filled < batch_size {
        degraded = true;
    }
    let status = if filled == 0 && batch_size > 0 {
        ParseStatus::Failed
    } else if degraded {
        ParseStatus::Partial
    } else {
        ParseStatus::Ok
    };
    ClassificationParse {
        labels: slots
            .into_iter()
            .map(|s| s.unwrap_or_else(|| fallback.clone()))
            .collect(),
        status,
    }
}

/// Anchors each `(label, first_line)` record in the note by exact substring
/// search starting at the end of the previous located anchor.
pub fn parse_segmentation(
    text: &str,
    note: &ClinicalNote,
    ontology: &LabelOntology,
    method: &str,
) -> SegmentationParse {
    let tokens = note.tokens();
    let items = extract_array(text);
    let mut boundaries: Vec<(usize, Label)> = Vec::new();
    let mut degraded = items.is_none();
    let mut search_from = 0;
    for item in items.iter().flatten() {
        let anchor = item.get("first_line").and_then(Value::as_str).map(str::trim);
        let (Some(anchor), Some(raw_label)) = (anchor, label_field(item)) else {
            degraded = true;
            continue;
        };
        if anchor.is_empty() {
            degraded = true;
            continue;
        }
        let Some(found) = note.text[search_from..].find(anchor) else {
            degraded = true;
            continue;
        };
        let pos = search_from + found;
        let token = token_index_at(tokens, pos);
        if token >= tokens.len() || boundaries.last().is_some_and(|(prev, _)| *prev >= token) {
            degraded = true;
            continue;
        }
        let label = match ontology.resolve(raw_label) {
            Some(l) => l.clone(),
            None => {
                degraded = true;
                ontology.fallback().clone()
            }
        };
        boundaries.push((token, label));
        search_from = pos + anchor.len();
    }
    let status = if boundaries.is_empty() {
        ParseStatus::Failed
    } else if degraded {
        ParseStatus::Partial
    } else {
        ParseStatus::Ok
    };
    SegmentationParse {
        result: SegmentationResult {
            note_id: note.note_id.clone(),
            spans: spans_from_boundaries(tokens, &boundaries, ontology.fallback()),
            method: method.to_string(),
        },
        status,
    }
}
