//! Canonical JSON serialization and content fingerprints.
//!
//! Canonical form is UTF-8 JSON with object keys sorted by byte order and no
//! insignificant whitespace. Fingerprints are the lowercase hex SHA-256 of
//! those bytes, so two implementations agree on cache keys bit for bit.

use serde_json::Value;
use sha2::{Digest, Sha256};

/// Serializes `value` in canonical form.
pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                push_string(k, out);
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        Value::String(s) => push_string(s, out),
        // null, booleans and numbers already have a single compact form.
        other => out.push_str(&other.to_string()),
    }
}

fn push_string(s: &str, out: &mut String) {
    out.push_str(&Value::String(s.to_owned()).to_string());
}

/// Lowercase hex SHA-256 of the canonical serialization of `value`.
pub fn fingerprint(value: &Value) -> String {
    hex::encode(Sha256::digest(to_canonical_string(value).as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v = json!({"b": [1, {"z": null, "a": true}], "a": "x y"});
        assert_eq!(
            to_canonical_string(&v),
            r#"{"a":"x y","b":[1,{"a":true,"z":null}]}"#
        );
    }

    #[test]
    fn non_ascii_is_emitted_raw() {
        assert_eq!(to_canonical_string(&json!("é\n")), "\"é\\n\"");
    }

    #[test]
    fn fingerprint_of_known_string() {
        // sha256 of the five bytes `"abc"` including quotes
        assert_eq!(
            fingerprint(&json!("abc")),
            "6cc43f858fbb763301637b5af970e2a46b46f461f27e5a0f41e009c59b827b25"
        );
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"x":1,"y":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"y":2,"x":1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }
}
