//! Run configuration: defaults, then checkpoint snapshot, then TOML file,
//! then command-line flags.

use std::fs;
use std::path::Path;

use eva_core::dataset::SplitSpec;
use eva_core::evaluator::EvalConfig;
use eva_core::model::ModelConfig;
use eva_core::trainer::TrainConfig;
use eva_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

impl RunConfig {
    pub fn overlay(&self, top: Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, top);
        serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overlays a (possibly partial) TOML file.
    pub fn overlay_file(&self, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.overlay(serde_json::to_value(doc)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Overlays the sections stored in a checkpoint snapshot.
    pub fn overlay_snapshot(&self, snapshot: &Value) -> Result<Self> {
        let mut top = serde_json::Map::new();
        for key in ["data", "model", "train", "eval"] {
            if let Some(v) = snapshot.get(key) {
                top.insert(key.into(), v.clone());
            }
        }
        self.overlay(Value::Object(top))
    }

    /// One seed drives data generation, initialization and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let t = self.eval.feasibility_threshold;
        if !(-1.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("feasibility threshold {t} outside [-1, 1]")));
        }
        if !self.eval.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        Ok(())
    }
}
