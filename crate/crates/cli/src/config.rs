//! JSON run configuration for `train`.

use std::path::{Path, PathBuf};

use adaptvig_core::model::{ModelConfig, TOY16_CHANNELS};
use adaptvig_core::train::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    SyntheticBlobs {
        samples: usize,
        classes: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    /// Images in an AVGT file plus a labels CSV, as written by `generate`.
    TensorFile { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::SyntheticBlobs {
            samples: 200,
            classes: 2,
            channels: 3,
            h: 16,
            w: 16,
        }
    }
}

/// Everything a training run depends on. `train.seed` is the master seed:
/// it drives data generation, parameter init and batch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy16(TOY16_CHANNELS, 2),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies a command-line seed to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self.model.seed = self.train.seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"learning_rate": 0.01, "momentum": 0.5, "steps": 3, "batch_size": 4, "seed": 9}}"#).unwrap();
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.model, RunConfig::default().model);
        assert_eq!(cfg.dataset, DatasetConfig::default());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig {
            dataset: DatasetConfig::TensorFile {
                images: "a.avgt".into(),
                labels: "b.csv".into(),
            },
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""kind":"tensor_file""#));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn seed_override_reaches_model_init() {
        let cfg = RunConfig::default().with_seed(Some(12));
        assert_eq!((cfg.train.seed, cfg.model.seed), (12, 12));
    }
}
