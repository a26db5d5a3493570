//! JSON codec for object inventories as chat models write them.
//!
//! Two shapes are accepted: a map `{"Lamp": ["brass base", ...], ...}` and an
//! array `[{"label": "Lamp", "descriptors": [...]}, ...]`, optionally wrapped as
//! `{"objects": [...]}`. Map keys may repeat (two lamps), so maps are read
//! with a visitor that keeps every entry in document order.

use std::fmt;

use serde::de::{self, Deserializer, IgnoredAny, MapAccess, SeqAccess, Visitor};
use serde_json::Value;
use thiserror::Error;

use crate::model::ObjectEntry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InventoryError {
    #[error("no parseable JSON")]
    NoParseableJson,
    #[error("descriptors for {0:?} are not a list of strings")]
    DescriptorNotList(String),
    #[error("inventory entry is not an object with label and descriptors")]
    BadEntry,
    #[error("inventory has no objects")]
    Empty,
}

impl InventoryError {
    pub fn code(&self) -> &'static str {
        match self {
            InventoryError::NoParseableJson => "no_parseable_json",
            InventoryError::DescriptorNotList(_) => "descriptor_not_list",
            InventoryError::BadEntry => "bad_entry",
            InventoryError::Empty => "empty",
        }
    }
}

enum Raw {
    Map(Vec<(String, Value)>),
    Seq(Vec<Value>),
    Other,
}

struct RawVisitor;

impl<'de> Visitor<'de> for RawVisitor {
    type Value = Raw;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Raw, A::Error> {
        let mut out = Vec::new();
        while let Some((k, v)) = map.next_entry::<String, Value>()? {
            out.push((k, v));
        }
        Ok(Raw::Map(out))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Raw, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element::<Value>()? {
            out.push(v);
        }
        Ok(Raw::Seq(out))
    }

    fn visit_bool<E: de::Error>(self, _: bool) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
    fn visit_i64<E: de::Error>(self, _: i64) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
    fn visit_u64<E: de::Error>(self, _: u64) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
    fn visit_f64<E: de::Error>(self, _: f64) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
    fn visit_str<E: de::Error>(self, _: &str) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
    fn visit_unit<E: de::Error>(self) -> Result<Raw, E> {
        Ok(Raw::Other)
    }
}

impl<'de> de::Deserialize<'de> for Raw {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(RawVisitor)
    }
}

fn descriptors(label: &str, v: &Value) -> Result<Vec<String>, InventoryError> {
    let items = v
        .as_array()
        .ok_or_else(|| InventoryError::DescriptorNotList(label.to_string()))?;
    items
        .iter()
        .map(|d| {
            d.as_str()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| InventoryError::DescriptorNotList(label.to_string()))
        })
        .collect()
}

fn entries_from_seq(items: &[Value]) -> Result<Vec<ObjectEntry>, InventoryError> {
    let mut out = Vec::new();
    for item in items {
        let obj = item.as_object().ok_or(InventoryError::BadEntry)?;
        match (obj.get("label"), obj.get("descriptors")) {
            (Some(Value::String(label)), Some(d)) => out.push(ObjectEntry {
                label: label.trim().to_string(),
                descriptors: descriptors(label, d)?,
            }),
            // `[{"Lamp": [...]}, ...]`
            _ if obj.len() == 1 => {
                let (label, d) = obj.iter().next().expect("one entry");
                out.push(ObjectEntry {
                    label: label.trim().to_string(),
                    descriptors: descriptors(label, d)?,
                });
            }
            _ => return Err(InventoryError::BadEntry),
        }
    }
    Ok(out)
}

fn is_entry_array(v: &Value) -> bool {
    v.as_array().is_some_and(|a| a.iter().all(Value::is_object))
}

/// Normalizes one complete JSON document. An empty inventory is returned
/// as `Ok(vec![])`; callers decide whether that is acceptable.
pub fn parse_inventory_json(json: &str) -> Result<Vec<ObjectEntry>, InventoryError> {
    let raw: Raw = serde_json::from_str(json).map_err(|_| InventoryError::NoParseableJson)?;
    match raw {
        Raw::Map(pairs) => {
            if let [(key, v)] = pairs.as_slice() {
                if key == "objects" && is_entry_array(v) {
                    return entries_from_seq(v.as_array().expect("checked"));
                }
            }
            pairs
                .iter()
                .map(|(label, v)| {
                    Ok(ObjectEntry {
                        label: label.trim().to_string(),
                        descriptors: descriptors(label, v)?,
                    })
                })
                .collect()
        }
        Raw::Seq(items) => entries_from_seq(&items),
        Raw::Other => Err(InventoryError::NoParseableJson),
    }
}

/// Byte ranges of top-level JSON objects and arrays embedded in `text`,
/// scanning left to right and skipping past each value found.
pub fn json_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find(['{', '[']) {
        let start = pos + off;
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<IgnoredAny>();
        match stream.next() {
            Some(Ok(_)) => {
                let end = start + stream.byte_offset();
                spans.push((start, end));
                pos = end;
            }
            _ => pos = start + 1,
        }
    }
    spans
}

/// First embedded JSON object or array, as a raw substring.
pub fn first_json(text: &str) -> Option<&str> {
    json_spans(text).first().map(|&(s, e)| &text[s..e])
}

/// Every embedded JSON value that reads as an inventory, in order.
pub fn embedded_inventories(text: &str) -> Vec<Vec<ObjectEntry>> {
    json_spans(text)
        .into_iter()
        .filter_map(|(s, e)| parse_inventory_json(&text[s..e]).ok())
        .collect()
}

/// Map-form JSON; repeated labels are written as repeated keys.
pub fn inventory_to_json(objects: &[ObjectEntry]) -> String {
    let q = |s: &str| serde_json::to_string(s).expect("string serializes");
    let body: Vec<String> = objects
        .iter()
        .map(|o| {
            let d: Vec<String> = o.descriptors.iter().map(|d| q(d)).collect();
            format!("{}: [{}]", q(&o.label), d.join(", "))
        })
        .collect();
    format!("{{{}}}", body.join(", "))
}
