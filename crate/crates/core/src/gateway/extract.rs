//! Pulls the structured block out of free-form model text.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tree::AttributeValue;

/// Reply shapes the pipeline asks models for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemaId {
    PivotList,
    DimensionSpec,
    ValueList,
    SampleList,
    Answer,
}

impl SchemaId {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::PivotList => "pivot-list",
            SchemaId::DimensionSpec => "dimension-spec",
            SchemaId::ValueList => "value-list",
            SchemaId::SampleList => "sample-list",
            SchemaId::Answer => "answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no parseable structured block in reply")]
    Malformed,
    #[error("schema `{schema}`: {message}")]
    SchemaViolation { schema: &'static str, message: String },
}

/// A parsed and schema-checked reply object.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPayload(pub Value);

impl StructuredPayload {
    pub fn value(&self) -> &Value {
        &self.0
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.0.get(key).and_then(Value::as_str)
    }

    pub fn strings(&self, key: &str) -> Vec<String> {
        self.0
            .get(key)
            .and_then(Value::as_array)
            .map(|items| items.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default()
    }

    /// Values given either as bare labels or as `{"label", "description"}` objects.
    pub fn attribute_values(&self, key: &str) -> Vec<AttributeValue> {
        self.0
            .get(key)
            .and_then(Value::as_array)
            .map(|items| items.iter().filter_map(attribute_value).collect())
            .unwrap_or_default()
    }

    pub fn bool_field(&self, key: &str) -> Option<bool> {
        self.0.get(key).and_then(Value::as_bool)
    }
}

fn attribute_value(item: &Value) -> Option<AttributeValue> {
    match item {
        Value::String(label) => Some(AttributeValue::new(label.clone())),
        Value::Object(map) => {
            let label = map.get("label").or_else(|| map.get("value"))?.as_str()?;
            let description = map.get("description").and_then(Value::as_str).map(str::to_string);
            Some(AttributeValue { label: label.to_string(), description })
        }
        _ => None,
    }
}

/// Finds the first well-formed structured block in `raw` and checks it
/// against `schema`.
pub fn extract_structured(raw: &str, schema: SchemaId) -> Result<StructuredPayload, ExtractError> {
    let value = locate_block(raw).ok_or(ExtractError::Malformed)?;
    let value = coerce(value, schema);
    check(&value, schema)?;
    Ok(StructuredPayload(value))
}

fn locate_block(raw: &str) -> Option<Value> {
    // fenced blocks first, in order
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let body_start = after.find('\n').map_or(0, |n| n + 1);
        let Some(end) = after[body_start..].find("```") else { break };
        let body = &after[body_start..body_start + end];
        if let Some(v) = first_json_value(body) {
            return Some(v);
        }
        rest = &after[body_start + end + 3..];
    }
    first_json_value(raw)
}

fn first_json_value(text: &str) -> Option<Value> {
    for (pos, ch) in text.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

/// Wraps a bare array into the object form the schema expects.
fn coerce(value: Value, schema: SchemaId) -> Value {
    let key = match schema {
        SchemaId::PivotList | SchemaId::SampleList => "samples",
        SchemaId::ValueList => "values",
        _ => return value,
    };
    match value {
        Value::Array(items) => {
            let mut map = Map::new();
            map.insert(key.to_string(), Value::Array(items));
            Value::Object(map)
        }
        other => other,
    }
}

fn check(value: &Value, schema: SchemaId) -> Result<(), ExtractError> {
    let violation = |message: String| ExtractError::SchemaViolation { schema: schema.as_str(), message };
    let obj = value
        .as_object()
        .ok_or_else(|| violation("top level must be an object".into()))?;
    let non_empty_strings = |key: &str| -> Result<(), ExtractError> {
        let items = obj
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| violation(format!("`{key}` must be an array")))?;
        if items.is_empty() {
            return Err(violation(format!("`{key}` is empty")));
        }
        for (i, item) in items.iter().enumerate() {
            match item.as_str() {
                Some(s) if !s.trim().is_empty() => {}
                _ => return Err(violation(format!("`{key}[{i}]` must be a non-empty string"))),
            }
        }
        Ok(())
    };
    let value_items = |key: &str| -> Result<(), ExtractError> {
        let items = obj
            .get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| violation(format!("`{key}` must be an array")))?;
        if items.is_empty() {
            return Err(violation(format!("`{key}` is empty")));
        }
        for (i, item) in items.iter().enumerate() {
            match attribute_value(item) {
                Some(v) if !v.label.trim().is_empty() => {}
                _ => return Err(violation(format!("`{key}[{i}]` is not a labelled value"))),
            }
        }
        Ok(())
    };

    match schema {
        SchemaId::PivotList | SchemaId::SampleList => non_empty_strings("samples"),
        SchemaId::ValueList => {
            value_items("values")?;
            match obj.get("unbounded") {
                None | Some(Value::Bool(_)) => Ok(()),
                Some(_) => Err(violation("`unbounded` must be a boolean".into())),
            }
        }
        SchemaId::DimensionSpec => {
            match obj.get("dimension").and_then(Value::as_str) {
                Some(s) if !s.trim().is_empty() => {}
                _ => return Err(violation("`dimension` must be a non-empty string".into())),
            }
            value_items("values")?;
            if let Some(assignment) = obj.get("assignment") {
                if !assignment.is_array() {
                    return Err(violation("`assignment` must be an array".into()));
                }
            }
            Ok(())
        }
        SchemaId::Answer => match obj.get("answer").and_then(Value::as_str) {
            Some(s) if !s.trim().is_empty() => Ok(()),
            _ => Err(violation("`answer` must be a non-empty string".into())),
        },
    }
}
