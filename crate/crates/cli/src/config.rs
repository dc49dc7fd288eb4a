//! JSON config files with `dotted.key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::Failure;

/// Loads `T` from an optional JSON file (missing fields take their
/// defaults), then applies each override in order. Unknown keys in either
/// place are rejected.
pub fn load<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T, Failure> {
    let base: T = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
        }
        None => T::default(),
    };
    apply_overrides(base, overrides)
}

pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: T, overrides: &[String]) -> Result<T, Failure> {
    let mut tree = serde_json::to_value(&base).map_err(|e| Failure::usage(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("override `{o}` is not of the form key=value")))?;
        let slot = lookup(&mut tree, key)?;
        // Bare words that are not valid JSON are taken as strings.
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    serde_json::from_value(tree).map_err(|e| Failure::usage(format!("invalid override: {e}")))
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Result<&'a mut Value, Failure> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| Failure::usage(format!("unknown config key `{key}`")))?;
    }
    Ok(node)
}
