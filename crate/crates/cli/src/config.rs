use std::path::Path;

use serde::{Deserialize, Serialize};

use safeclick::data::SynthConfig;
use safeclick::model::ModelConfig;
use safeclick::train::{AdamW, SweepConfig};

/// Contents of a `--config` JSON file. Every section and field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub sweep: SweepSection,
    /// Seed of the 7:1:2 partition, fixed per dataset.
    pub split_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f32>,
    pub pretrain_lr: Option<f32>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub optimizer: Option<AdamW>,
    pub perturbed_fraction: Option<f64>,
    pub freeze: Option<Vec<String>>,
    pub max_val_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub threshold: f32,
    pub point_levels: Vec<f64>,
    pub box_levels: Vec<f64>,
    pub max_test_samples: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let d = SweepConfig::default();
        SweepSection { threshold: d.threshold, point_levels: d.point_levels, box_levels: d.box_levels, max_test_samples: None }
    }
}

impl SweepSection {
    pub fn to_sweep(&self, seed: u64) -> SweepConfig {
        SweepConfig {
            seed,
            threshold: self.threshold,
            point_levels: self.point_levels.clone(),
            box_levels: self.box_levels.clone(),
            ..Default::default()
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("parsing {}: {e}", path.display()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}
