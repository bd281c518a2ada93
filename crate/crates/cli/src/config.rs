//! Config files are JSON, or YAML when the extension is `.yaml` or `.yml`.
//! A file overlays a base value key by key, and flags overlay the result.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

pub fn read_value(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
    let parsed = if yaml {
        serde_yaml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
}

fn merge(base: &mut Value, over: Value) {
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

/// `base` with the keys of the file at `path` merged over it.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(base);
    };
    let mut v = serde_json::to_value(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut v, read_value(path)?);
    serde_json::from_value(v).map_err(|e| CliError::Validation(format!("invalid config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use partlayout::training::{OptimizerKind, Stage, TrainConfig};

    #[test]
    fn json_and_yaml_overlay_the_stage_preset() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("t.json");
        let y = dir.path().join("t.yaml");
        std::fs::write(&j, r#"{"epochs": 3, "anneal": {"cycles": 2}}"#).unwrap();
        std::fs::write(&y, "epochs: 3\nanneal:\n  cycles: 2\n").unwrap();
        let base = TrainConfig::preset(Stage::CgGan);
        let a = overlay(base.clone(), Some(&j)).unwrap();
        let b = overlay(base.clone(), Some(&y)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.epochs, a.anneal.cycles), (3, 2));
        assert_eq!(a.optimizer, OptimizerKind::Adagrad);
        assert_eq!(a.anneal.threshold, base.anneal.threshold);
        assert!(overlay(base, Some(&dir.path().join("missing.json"))).is_err());
    }
}
