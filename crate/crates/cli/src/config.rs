//! Layering of JSON config files over built-in defaults.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Recursively overwrites `base` with the fields present in `over`.
/// Objects merge key by key; any other value replaces the base value.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// `defaults` with `overrides` merged in, re-validated through serde.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, overrides: Option<&Value>) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(o) = overrides {
        if !o.is_object() {
            anyhow::bail!("config must be a JSON object");
        }
        merge(&mut value, o.clone());
    }
    serde_json::from_value(value).context("config does not match the command's schema")
}
