//! JSON config files. Each top-level section (`synth`, `train`, `fusion`,
//! `eval`) overrides the matching fields after command-line flags applied.

use std::fs;
use std::path::Path;

use dac_core::{DacError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

const SECTIONS: [&str; 4] = ["synth", "train", "fusion", "eval"];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| DacError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| DacError::config(format!("config {}: {e}", path.display())))?;
        let Value::Object(root) = value else {
            return Err(DacError::config("config file must hold a JSON object"));
        };
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(DacError::config(format!(
                "unknown config section '{k}' (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
        Ok(Self { root })
    }

    /// Applies section `name` on top of `base`.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(section) = self.root.get(name) else {
            return Ok(base);
        };
        let Value::Object(over) = section else {
            return Err(DacError::config(format!("config section '{name}' must be an object")));
        };
        let Value::Object(mut merged) = serde_json::to_value(&base)? else {
            return Err(DacError::config(format!("section '{name}' is not a struct")));
        };
        for (k, v) in over {
            if !merged.contains_key(k) {
                return Err(DacError::config(format!("unknown key '{name}.{k}'")));
            }
            merged.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| DacError::config(format!("config section '{name}': {e}")))
    }
}
