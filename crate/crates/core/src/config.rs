//! Run configuration: one JSON document, dotted `key=value` overrides, and a
//! resolved snapshot written next to every output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{BackboneKind, ModelConfig};
use crate::train::TrainConfig;
use crate::worlds::WorldKind;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub name: String,
    pub world: WorldKind,
    pub particles: usize,
    pub frames: usize,
    pub train: usize,
    pub valid: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            name: "box_splash".into(),
            world: WorldKind::BoxSplash,
            particles: 64,
            frames: 50,
            train: 200,
            valid: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Recursive rollout length; 0 skips rollouts.
    pub steps: usize,
    /// Validation rollouts evaluated; 0 uses all.
    pub rollouts: usize,
    /// Transitions per rollout in the one-step metric; 0 uses all.
    pub one_step_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 20,
            rollouts: 0,
            one_step_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub backbones: Vec<BackboneKind>,
    pub particles: usize,
    pub pairs: Vec<usize>,
    pub trials: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            backbones: vec![BackboneKind::Tie, BackboneKind::Gnn],
            particles: 512,
            pairs: vec![2000, 4000, 8000, 16000],
            trials: 5,
            input_dim: 14,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `a.b.c=value` overrides in order. Values parse as JSON when they
    /// can and as strings otherwise; every key must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn overrides_follow_dotted_paths() {
        let c = RunConfig::default()
            .with_overrides(&["model.hidden=32", "train.precision=f64", "data.world=drop_merge", "bench.pairs=[1,2]"])
            .unwrap();
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.train.precision, Precision::F64);
        assert_eq!(c.data.world, WorldKind::DropMerge);
        assert_eq!(c.bench.pairs, vec![1, 2]);
    }

    #[test]
    fn unknown_or_malformed_overrides_are_rejected() {
        let base = RunConfig::default();
        for bad in ["model.width=3", "nothing", "model.hidden=abc", "model.hidden.x=1"] {
            assert!(matches!(base.with_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::from_json(r#"{"model": {"depth": 3}}"#).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default().with_overrides(&["train.epochs=3"]).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(RESOLVED_CONFIG)).unwrap(), c);
    }
}
