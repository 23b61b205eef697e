//! `key = value` run configuration with dotted keys, e.g. `retrieval.lr = 1e-3`.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Every key must name an existing field.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

fn config_error(line: usize, key: &str, msg: impl Into<String>) -> Error {
    Error::Config { line, key: key.to_string(), msg: msg.into() }
}

fn parse_like(template: &Value, raw: &str) -> std::result::Result<Value, String> {
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|e| e.to_string()),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).map_err(|e| e.to_string()),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(|| "not a finite number".to_string())
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
            raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_like(&elem, s.trim())).collect::<std::result::Result<_, _>>().map(Value::Array)
        }
        Value::Null | Value::Object(_) => Err("not a settable value".to_string()),
    }
}

/// Applies `text` on top of `base`.
pub fn apply(base: &ExperimentConfig, text: &str) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(base)?;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| config_error(n, line, "expected `key = value`"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| config_error(n, key, "unknown key"))?;
        }
        *slot = parse_like(slot, raw).map_err(|m| config_error(n, key, m))?;
    }
    let config: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| config_error(0, "", e.to_string()))?;
    config.encoder.validate()?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    apply(&ExperimentConfig::default(), &std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::GateSetting;

    #[test]
    fn overrides_nested_fields() {
        let text = "# run\nretrieval.lr = 0.002\nencoder.layers=3\n\nretrieval.gates = learned\nretrieval.ks = 1, 20\n";
        let c = apply(&ExperimentConfig::default(), text).unwrap();
        assert_eq!(c.retrieval.lr, 0.002);
        assert_eq!(c.encoder.layers, 3);
        assert_eq!(c.retrieval.gates, GateSetting::Learned);
        assert_eq!(c.retrieval.ks, vec![1, 20]);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = apply(&ExperimentConfig::default(), "retrieval.lr = 0.1\nretrieval.lrr = 1\n").unwrap_err();
        match err {
            Error::Config { line, key, .. } => assert_eq!((line, key.as_str()), (2, "retrieval.lrr")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(apply(&ExperimentConfig::default(), "encoder.layers = two").is_err());
        assert!(apply(&ExperimentConfig::default(), "encoder.boolattn").is_err());
        assert!(apply(&ExperimentConfig::default(), "retrieval.gates = sometimes").is_err());
        assert!(apply(&ExperimentConfig::default(), "encoder = 3").is_err());
    }
}
