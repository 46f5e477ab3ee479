//! Validator for the JSON Schema (2020-12) subset used by structured-output
//! documents in this crate.
//!
//! Supported keywords: `type`, `const`, `enum`, `properties`, `required`,
//! `additionalProperties` (boolean), `items`, `minItems`, `maxItems`,
//! `contains` with `minContains`/`maxContains`, `oneOf`, `anyOf`,
//! `minLength`, `maxLength`, `pattern`, `minimum`, `maximum`,
//! `exclusiveMinimum`, `exclusiveMaximum`. Annotation keywords are ignored.

use std::fmt;

use regex::Regex;
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    /// JSON pointer into the instance.
    pub path: String,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: {}", self.message)
    }
}

impl std::error::Error for SchemaError {}

/// Validates `instance` against `schema`, returning the most specific error.
pub fn validate(schema: &Value, instance: &Value) -> Result<(), SchemaError> {
    check(schema, instance, "")
}

/// Ranks competing branch errors: deeper first, and a failed `const`
/// (a branch whose discriminator did not match) last among equals.
fn specificity(e: &SchemaError) -> (usize, bool) {
    (e.path.matches('/').count(), !e.message.starts_with("expected constant"))
}

fn err(path: &str, message: impl Into<String>) -> SchemaError {
    SchemaError {
        path: path.to_string(),
        message: message.into(),
    }
}

fn type_matches(name: &str, v: &Value) -> bool {
    match name {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.as_i64().is_some() || v.as_u64().is_some() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        _ => false,
    }
}

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) if a.is_number() && b.is_number() => x == y,
        _ => a == b,
    }
}

fn check(schema: &Value, v: &Value, path: &str) -> Result<(), SchemaError> {
    let s = match schema {
        Value::Bool(true) => return Ok(()),
        Value::Bool(false) => return Err(err(path, "no value is allowed here")),
        Value::Object(s) => s,
        _ => return Err(err(path, "schema must be an object or boolean")),
    };

    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(name) => type_matches(name, v),
            Value::Array(names) => names.iter().filter_map(Value::as_str).any(|n| type_matches(n, v)),
            _ => false,
        };
        if !ok {
            return Err(err(path, format!("expected type {t}, got {}", kind_of(v))));
        }
    }
    if let Some(c) = s.get("const") {
        if !json_eq(c, v) {
            return Err(err(path, format!("expected constant {c}, got {v}")));
        }
    }
    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.iter().any(|o| json_eq(o, v)) {
            return Err(err(path, format!("{v} is not one of {}", Value::Array(options.clone()))));
        }
    }

    match v {
        Value::Object(obj) => check_object(s, obj, path)?,
        Value::Array(items) => check_array(s, items, path)?,
        Value::String(text) => check_string(s, text, path)?,
        Value::Number(_) => check_number(s, v.as_f64().unwrap_or(f64::NAN), path)?,
        _ => {}
    }

    if let Some(Value::Array(branches)) = s.get("oneOf") {
        let mut matched = 0;
        let mut deepest: Option<SchemaError> = None;
        for b in branches {
            match check(b, v, path) {
                Ok(()) => matched += 1,
                Err(e) => {
                    if deepest.as_ref().map_or(true, |d| specificity(&e) > specificity(d)) {
                        deepest = Some(e);
                    }
                }
            }
        }
        if matched != 1 {
            return Err(match (matched, deepest) {
                (0, Some(d)) if d.path.len() > path.len() && specificity(&d).1 => d,
                (0, Some(d)) => err(path, format!("matches none of the alternatives ({})", d.message)),
                _ => err(path, format!("matches {matched} alternatives, expected exactly one")),
            });
        }
    }
    if let Some(Value::Array(branches)) = s.get("anyOf") {
        if !branches.iter().any(|b| check(b, v, path).is_ok()) {
            return Err(err(path, "matches none of the alternatives"));
        }
    }
    Ok(())
}

fn check_object(s: &Map<String, Value>, obj: &Map<String, Value>, path: &str) -> Result<(), SchemaError> {
    if let Some(Value::Array(req)) = s.get("required") {
        for key in req.iter().filter_map(Value::as_str) {
            if !obj.contains_key(key) {
                return Err(err(path, format!("missing required property `{key}`")));
            }
        }
    }
    let props = s.get("properties").and_then(Value::as_object);
    for (key, value) in obj {
        let child = format!("{path}/{key}");
        match props.and_then(|p| p.get(key)) {
            Some(sub) => check(sub, value, &child)?,
            None => match s.get("additionalProperties") {
                Some(Value::Bool(false)) => {
                    return Err(err(path, format!("unexpected property `{key}`")));
                }
                Some(sub @ Value::Object(_)) => check(sub, value, &child)?,
                _ => {}
            },
        }
    }
    Ok(())
}

fn check_array(s: &Map<String, Value>, items: &[Value], path: &str) -> Result<(), SchemaError> {
    if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
        if (items.len() as u64) < min {
            return Err(err(path, format!("expected at least {min} items, got {}", items.len())));
        }
    }
    if let Some(max) = s.get("maxItems").and_then(Value::as_u64) {
        if items.len() as u64 > max {
            return Err(err(path, format!("expected at most {max} items, got {}", items.len())));
        }
    }
    if let Some(item_schema) = s.get("items") {
        for (i, item) in items.iter().enumerate() {
            check(item_schema, item, &format!("{path}/{i}"))?;
        }
    }
    if let Some(contains) = s.get("contains") {
        let n = items.iter().filter(|i| check(contains, i, path).is_ok()).count() as u64;
        let min = s.get("minContains").and_then(Value::as_u64).unwrap_or(1);
        if n < min {
            return Err(err(path, format!("expected at least {min} matching item(s), got {n}")));
        }
        if let Some(max) = s.get("maxContains").and_then(Value::as_u64) {
            if n > max {
                return Err(err(path, format!("expected at most {max} matching item(s), got {n}")));
            }
        }
    }
    Ok(())
}

fn check_string(s: &Map<String, Value>, text: &str, path: &str) -> Result<(), SchemaError> {
    let len = text.chars().count() as u64;
    if let Some(min) = s.get("minLength").and_then(Value::as_u64) {
        if len < min {
            return Err(err(path, format!("string shorter than {min} characters")));
        }
    }
    if let Some(max) = s.get("maxLength").and_then(Value::as_u64) {
        if len > max {
            return Err(err(path, format!("string longer than {max} characters")));
        }
    }
    if let Some(Value::String(p)) = s.get("pattern") {
        let re = Regex::new(p).map_err(|e| err(path, format!("bad pattern in schema: {e}")))?;
        if !re.is_match(text) {
            return Err(err(path, format!("string does not match pattern {p:?}")));
        }
    }
    Ok(())
}

fn check_number(s: &Map<String, Value>, x: f64, path: &str) -> Result<(), SchemaError> {
    let bound = |k: &str| s.get(k).and_then(Value::as_f64);
    if let Some(m) = bound("minimum") {
        if x < m {
            return Err(err(path, format!("{x} is below the minimum {m}")));
        }
    }
    if let Some(m) = bound("maximum") {
        if x > m {
            return Err(err(path, format!("{x} is above the maximum {m}")));
        }
    }
    if let Some(m) = bound("exclusiveMinimum") {
        if x <= m {
            return Err(err(path, format!("{x} must be greater than {m}")));
        }
    }
    if let Some(m) = bound("exclusiveMaximum") {
        if x >= m {
            return Err(err(path, format!("{x} must be less than {m}")));
        }
    }
    Ok(())
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn objects_and_required() {
        let s = json!({"type":"object","properties":{"a":{"type":"string"}},"required":["a"],"additionalProperties":false});
        assert!(validate(&s, &json!({"a":"x"})).is_ok());
        assert_eq!(validate(&s, &json!({})).unwrap_err().message, "missing required property `a`");
        assert!(validate(&s, &json!({"a":"x","b":1})).is_err());
        assert_eq!(validate(&s, &json!({"a":1})).unwrap_err().path, "/a");
    }

    #[test]
    fn arrays_and_contains() {
        let s = json!({"type":"array","minItems":1,"maxItems":3,
            "contains":{"const":"s"},"minContains":0,"maxContains":1});
        assert!(validate(&s, &json!(["a"])).is_ok());
        assert!(validate(&s, &json!(["s","a"])).is_ok());
        assert!(validate(&s, &json!(["s","s"])).is_err());
        assert!(validate(&s, &json!([])).is_err());
        assert!(validate(&s, &json!([1,2,3,4])).is_err());
    }

    #[test]
    fn one_of_reports_deepest_error() {
        let s = json!({"oneOf":[
            {"type":"object","properties":{"kind":{"const":"a"},"x":{"enum":["p","q"]}},"required":["kind","x"]},
            {"type":"object","properties":{"kind":{"const":"b"}},"required":["kind"]}
        ]});
        assert!(validate(&s, &json!({"kind":"a","x":"p"})).is_ok());
        let e = validate(&s, &json!({"kind":"a","x":"zzz"})).unwrap_err();
        assert_eq!(e.path, "/x");
        assert!(validate(&s, &json!({"kind":"c"})).is_err());
    }

    #[test]
    fn numbers_and_strings() {
        let n = json!({"type":"number","exclusiveMinimum":0,"maximum":10});
        assert!(validate(&n, &json!(0.5)).is_ok());
        assert!(validate(&n, &json!(0)).is_err());
        assert!(validate(&n, &json!(10.5)).is_err());
        let t = json!({"type":"string","minLength":1,"maxLength":3,"pattern":"\\S"});
        assert!(validate(&t, &json!("ab")).is_ok());
        assert!(validate(&t, &json!("   ")).is_err());
        assert!(validate(&t, &json!("")).is_err());
        assert!(validate(&t, &json!("abcd")).is_err());
        assert!(validate(&json!({"type":"integer"}), &json!(3)).is_ok());
        assert!(validate(&json!({"type":"integer"}), &json!(3.5)).is_err());
    }
}
