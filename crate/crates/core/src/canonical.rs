//! Canonical JSON: object keys sorted by code point, no insignificant
//! whitespace, UTF-8. Every byte count and every file this crate writes goes
//! through here, so two runs over the same inputs produce identical bytes.

use serde::Serialize;
use serde_json::Value;

/// Serialize `value` to canonical JSON.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let value = serde_json::to_value(value)?;
    Ok(value_to_string(&value))
}

/// Canonical byte length of `value`.
pub fn byte_len<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<usize> {
    to_string(value).map(|s| s.len())
}

pub fn value_to_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            // Byte order of UTF-8 strings equals code-point order.
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(v, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}
