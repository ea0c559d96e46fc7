//! Serde helpers rendering floats with exactly six decimals, so reports are
//! byte-stable across runs.

use std::collections::BTreeMap;

use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub fn format6(v: f64) -> String {
    if v == 0.0 {
        // folds -0.0
        return "0.000000".to_string();
    }
    format!("{v:.6}")
}

fn raw(v: f64) -> Box<RawValue> {
    assert!(v.is_finite(), "report values must be finite, got {v}");
    RawValue::from_string(format6(v)).expect("fixed-point decimal is valid JSON")
}

pub fn f64_6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*v).serialize(s)
}

pub fn opt_f64_6<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => raw(*v).serialize(s),
        None => s.serialize_none(),
    }
}

pub fn map_f64_6<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    let mut map = s.serialize_map(Some(m.len()))?;
    for (k, v) in m {
        map.serialize_entry(k, &raw(*v))?;
    }
    map.end()
}
