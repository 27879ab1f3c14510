//! Run configuration: one JSON document covering model shapes, training,
//! benchmarking, data paths and the seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ModelConfig, PluginConfig};
use crate::bench::BenchConfig;
use crate::data::{Example, LabelManifest};
use crate::error::{Error, Result};
use crate::memory::SpartanConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub plugin: PluginConfig,
    pub num_labels: usize,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub data: DataPaths,
    /// Seeds model construction and training.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        RunConfig {
            backbone,
            plugin: PluginConfig::Spartan(SpartanConfig::with_dim(backbone.d)),
            num_labels: 4,
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            data: DataPaths::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            plugin: self.plugin,
            num_labels: self.num_labels,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Checks that every example's label fits the configured label count,
    /// and that a label manifest, when present, names exactly that many
    /// labels.
    pub fn check_labels(&self, examples: &[Example], manifest: Option<&LabelManifest>) -> Result<()> {
        if let Some(m) = manifest {
            let mut ids: Vec<usize> = m.values().copied().collect();
            ids.sort_unstable();
            if ids != (0..self.num_labels).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "label manifest maps to ids {ids:?} but num_labels = {}",
                    self.num_labels
                )));
            }
        }
        if let Some(bad) = examples.iter().find(|e| e.label >= self.num_labels) {
            return Err(Error::Config(format!(
                "data has label {} but num_labels = {}",
                bad.label, self.num_labels
            )));
        }
        Ok(())
    }
}
