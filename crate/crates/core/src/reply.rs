//! Extraction of structured JSON payloads from free-form agent replies.

use std::fmt;

use serde_json::{Map, Value};

/// Why a reply could not be turned into a structured value.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplyError {
    #[error("no JSON object or array found in reply")]
    NoJsonFound,
    #[error("schema violation {}: field `{field}`: {reason}", Location(*.index))]
    SchemaViolation {
        index: Option<usize>,
        field: String,
        reason: String,
    },
}

struct Location(Option<usize>);

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(i) => write!(f, "at event {i}"),
            None => f.write_str("at top level"),
        }
    }
}

impl ReplyError {
    pub fn schema(index: Option<usize>, field: impl Into<String>, reason: impl Into<String>) -> Self {
        ReplyError::SchemaViolation {
            index,
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_schema_violation(&self) -> bool {
        matches!(self, ReplyError::SchemaViolation { .. })
    }
}

/// Returns the first syntactically valid JSON object or array embedded in `text`.
///
/// Prose, markdown fences and trailing chatter are skipped. Later blocks are ignored.
pub fn extract_first_json(text: &str) -> Result<Value, ReplyError> {
    for (start, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if value.is_object() || value.is_array() {
                return Ok(value);
            }
        }
    }
    Err(ReplyError::NoJsonFound)
}

/// Typed accessors over a JSON object that report violations with event context.
pub(crate) struct Fields<'a> {
    map: &'a Map<String, Value>,
    index: Option<usize>,
}

impl<'a> Fields<'a> {
    pub(crate) fn new(value: &'a Value, index: Option<usize>, what: &str) -> Result<Self, ReplyError> {
        match value.as_object() {
            Some(map) => Ok(Fields { map, index }),
            None => Err(ReplyError::schema(index, what, "expected a JSON object")),
        }
    }

    pub(crate) fn map(&self) -> &'a Map<String, Value> {
        self.map
    }

    pub(crate) fn violation(&self, field: &str, reason: impl Into<String>) -> ReplyError {
        ReplyError::schema(self.index, field, reason)
    }

    pub(crate) fn get(&self, field: &str) -> Option<&'a Value> {
        self.map.get(field).filter(|v| !v.is_null())
    }

    pub(crate) fn str(&self, field: &str) -> Result<&'a str, ReplyError> {
        match self.get(field) {
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(self.violation(field, "expected a string")),
            None => Err(self.violation(field, "missing")),
        }
    }

    pub(crate) fn opt_str(&self, field: &str) -> Result<Option<&'a str>, ReplyError> {
        match self.get(field) {
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.violation(field, "expected a string")),
            None => Ok(None),
        }
    }

    pub(crate) fn f64(&self, field: &str) -> Result<f64, ReplyError> {
        match self.opt_f64(field)? {
            Some(v) => Ok(v),
            None => Err(self.violation(field, "missing")),
        }
    }

    pub(crate) fn opt_f64(&self, field: &str) -> Result<Option<f64>, ReplyError> {
        match self.get(field) {
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() => Ok(Some(x)),
                Some(_) => Err(self.violation(field, "number is not finite")),
                None => Err(self.violation(field, "expected a number")),
            },
            None => Ok(None),
        }
    }

    pub(crate) fn opt_bool(&self, field: &str) -> Result<Option<bool>, ReplyError> {
        match self.get(field) {
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(_) => Err(self.violation(field, "expected a boolean")),
            None => Ok(None),
        }
    }

    /// A list of strings; a single string is accepted as a one-element list.
    pub(crate) fn str_list(&self, field: &str) -> Result<Vec<String>, ReplyError> {
        match self.get(field) {
            None => Ok(Vec::new()),
            Some(Value::String(s)) => Ok(vec![s.clone()]),
            Some(Value::Array(items)) => items
                .iter()
                .map(|item| match item {
                    Value::String(s) => Ok(s.clone()),
                    _ => Err(self.violation(field, "expected a list of strings")),
                })
                .collect(),
            Some(_) => Err(self.violation(field, "expected a list of strings")),
        }
    }

    /// A flat string map; numbers and booleans are stringified.
    pub(crate) fn string_map(
        &self,
        field: &str,
    ) -> Result<Option<std::collections::BTreeMap<String, String>>, ReplyError> {
        let Some(value) = self.get(field) else {
            return Ok(None);
        };
        let Some(obj) = value.as_object() else {
            return Err(self.violation(field, "expected an object of strings"));
        };
        let mut out = std::collections::BTreeMap::new();
        for (k, v) in obj {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                Value::Null => continue,
                _ => return Err(self.violation(field, format!("value for `{k}` must be a string"))),
            };
            out.insert(k.clone(), text);
        }
        Ok(Some(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_fenced_block_after_prose() {
        let text = "Sure! Here is the plan:\n```json\n[{\"a\": 1}]\n```\nLet me know.";
        assert_eq!(extract_first_json(text).unwrap(), serde_json::json!([{"a": 1}]));
    }

    #[test]
    fn skips_bracketed_prose() {
        let text = "[note] the answer is {\"ok\": true} and {\"ok\": false}";
        assert_eq!(extract_first_json(text).unwrap(), serde_json::json!({"ok": true}));
    }

    #[test]
    fn no_json() {
        assert_eq!(extract_first_json("nothing here {oops"), Err(ReplyError::NoJsonFound));
        assert_eq!(extract_first_json(""), Err(ReplyError::NoJsonFound));
    }

    #[test]
    fn schema_violation_display_names_event() {
        let err = ReplyError::schema(Some(3), "volume", "out of range");
        assert_eq!(err.to_string(), "schema violation at event 3: field `volume`: out of range");
    }
}
