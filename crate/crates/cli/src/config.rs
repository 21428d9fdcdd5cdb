//! Experiment config loading.
//!
//! Configs are JSON. Missing fields take their defaults; a field with the
//! wrong type or a key the config does not know is reported by its path.

use std::fs;
use std::path::Path;

use cqs_core::trainer::{ExperimentConfig, TrainConfig};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = read_text(path)?;
    parse_experiment(&text)
}

pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let given: Value = serde_json::from_str(text).map_err(cqs_core::Error::from)?;
    let mut merged =
        serde_json::to_value(ExperimentConfig::default()).map_err(cqs_core::Error::from)?;
    if let Some(field) = first_unknown(&given, &merged, "") {
        return Err(CliError::ConfigField {
            field,
            msg: "unknown field".into(),
        });
    }
    merge(&mut merged, given);
    let field_error = |e: serde_path_to_error::Error<serde_json::Error>| CliError::ConfigField {
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    };
    serde_path_to_error::deserialize(merged.clone()).map_err(|e| {
        // Flattened training fields are buffered and lose their path; parse
        // them on their own to recover it.
        if e.path().iter().next().is_some() {
            return field_error(e);
        }
        let mut train = merged;
        if let Value::Object(m) = &mut train {
            m.remove("world");
            m.remove("data");
        }
        match serde_path_to_error::deserialize::<_, TrainConfig>(train) {
            Err(inner) => field_error(inner),
            Ok(_) => field_error(e),
        }
    })
}

/// Tagged enums serialize with a `kind` key; a different kind has different fields.
fn same_variant(a: &Map<String, Value>, b: &Map<String, Value>) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Overlays `given` onto `base`. Objects merge key by key; anything else,
/// including arrays, replaces.
fn merge(base: &mut Value, given: Value) {
    match (base, given) {
        (Value::Object(b), Value::Object(g)) if same_variant(b, &g) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, g) => *slot = g,
    }
}

fn first_unknown(given: &Value, known: &Value, prefix: &str) -> Option<String> {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match (given, known) {
        (Value::Object(g), Value::Object(k)) if same_variant(g, k) => {
            g.iter().find_map(|(key, v)| match k.get(key) {
                None => Some(join(key)),
                Some(kv) => first_unknown(v, kv, &join(key)),
            })
        }
        // Elements are checked against the first default element.
        (Value::Array(g), Value::Array(k)) => k.first().and_then(|template| {
            g.iter()
                .enumerate()
                .find_map(|(i, a)| first_unknown(a, template, &format!("{prefix}[{i}]")))
        }),
        _ => None,
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}
