//! Parsing of raw model replies.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use crate::inventory::{json_spans, parse_inventory_json, InventoryError};
use crate::model::ObjectEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedInventory {
    pub objects: Vec<ObjectEntry>,
    /// The JSON value exactly as it appeared in the reply.
    pub raw_json: String,
}

/// Reads the first JSON object or array in `text`, ignoring code fences
/// and any prose around it.
pub fn extract_inventory(text: &str) -> Result<ExtractedInventory, InventoryError> {
    let (s, e) = *json_spans(text)
        .first()
        .ok_or(InventoryError::NoParseableJson)?;
    let raw = &text[s..e];
    let objects: Vec<ObjectEntry> = parse_inventory_json(raw)?
        .into_iter()
        .filter(|o| !o.label.is_empty())
        .collect();
    if objects.is_empty() {
        return Err(InventoryError::Empty);
    }
    Ok(ExtractedInventory {
        objects,
        raw_json: raw.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CaptionError {
    #[error("no_captions")]
    NoCaptions,
    /// The reply was an explicit empty JSON list.
    #[error("empty caption list")]
    EmptyList,
}

impl CaptionError {
    pub fn code(&self) -> &'static str {
        match self {
            CaptionError::NoCaptions => "no_captions",
            CaptionError::EmptyList => "empty_list",
        }
    }
}

fn list_item_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s+(.*)$").expect("static pattern"))
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    let items = v.as_array()?;
    items
        .iter()
        .map(|x| x.as_str().map(|s| s.trim().to_string()))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().filter(|s| !s.is_empty()).collect())
}

/// Captions from a JSON array of strings (bare, or the single list inside an
/// object), or from a numbered or bulleted plain-text list.
pub fn extract_captions(text: &str) -> Result<Vec<String>, CaptionError> {
    if let Some(&(s, e)) = json_spans(text).first() {
        if let Ok(v) = serde_json::from_str::<Value>(&text[s..e]) {
            let list = match &v {
                Value::Array(_) => string_list(&v),
                Value::Object(map) if map.len() == 1 => map.values().next().and_then(string_list),
                _ => None,
            };
            if let Some(list) = list {
                if list.is_empty() {
                    let explicit_empty = match &v {
                        Value::Array(a) => a.is_empty(),
                        Value::Object(m) => m
                            .values()
                            .next()
                            .and_then(Value::as_array)
                            .is_some_and(|a| a.is_empty()),
                        _ => false,
                    };
                    return Err(if explicit_empty {
                        CaptionError::EmptyList
                    } else {
                        CaptionError::NoCaptions
                    });
                }
                return Ok(list);
            }
        }
    }

    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect();
    let items: Vec<String> = lines
        .iter()
        .filter_map(|l| list_item_regex().captures(l).map(|c| c[1].to_string()))
        .collect();
    let raw: Vec<String> = if items.is_empty() {
        lines.iter().map(|l| l.to_string()).collect()
    } else {
        items
    };
    let out: Vec<String> = raw
        .iter()
        .map(|l| unquote(l).to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if out.is_empty() {
        Err(CaptionError::NoCaptions)
    } else {
        Ok(out)
    }
}
