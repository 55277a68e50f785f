//! Canonical JSON output.
//!
//! serde_json's default map is sorted, so serializing a `Value` already gives
//! deterministic key order. Reports additionally round every float to six
//! significant digits before serialization so that byte-level comparison of
//! two runs is meaningful.

use serde_json::Value;

/// Round to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    (x * factor).round() / factor
}

fn map_floats(value: Value, digits: i32) -> Value {
    match value {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    return Value::from(round_sig(f, digits));
                }
            }
            Value::Number(n)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(|v| map_floats(v, digits)).collect()),
        Value::Object(map) => Value::Object(
            map.into_iter()
                .map(|(k, v)| (k, map_floats(v, digits)))
                .collect(),
        ),
        other => other,
    }
}

/// Canonical serialization: sorted keys, floats untouched.
pub fn to_canonical_string(value: &Value) -> String {
    serde_json::to_string(value).expect("JSON value serializes")
}

/// Canonical report serialization: sorted keys, floats rounded to six
/// significant digits.
pub fn to_report_string(value: &Value) -> String {
    serde_json::to_string(&map_floats(value.clone(), 6)).expect("JSON value serializes")
}
