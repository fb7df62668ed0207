//! One hierarchical experiment document covering every stage of the workflow.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, HeadConfig};
use crate::objective::ObjectiveConfig;
use crate::training::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub pretrain: PathBuf,
    pub cd: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            pretrain: PathBuf::from("data/pretrain"),
            cd: PathBuf::from("data/cd"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    Checkpoint,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "checkpoint" => Ok(Init::Checkpoint),
            other => Err(Error::ConfigInvalid(format!("unknown init `{other}`, expected random or checkpoint"))),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Random => "random",
            Init::Checkpoint => "checkpoint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Training samples drawn per epoch, cycling through the labelled subset,
    /// so every label fraction gets the same number of updates.
    pub samples_per_epoch: usize,
    pub base_lr: f64,
    pub fraction: f64,
    pub init: Init,
    pub checkpoint: Option<PathBuf>,
    pub class_weighting: bool,
    pub fpn_channels: usize,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            samples_per_epoch: 512,
            base_lr: 0.01,
            fraction: 1.0,
            init: Init::Random,
            checkpoint: None,
            class_weighting: false,
            fpn_channels: 32,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for dataset generation. Training is single-threaded.
    pub threads: usize,
    pub data: DataPaths,
    pub generate: DatasetConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub augmentation: AugmentationConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainSchedule,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: DataPaths::default(),
            generate: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            augmentation: AugmentationConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainSchedule::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::DataMissing(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved document as `config.toml` in `dir`.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        self.generate.validate()?;
        self.encoder.validate()?;
        self.heads.validate()?;
        self.augmentation.validate()?;
        self.optimizer.validate()?;
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain: epochs and batch_size must be positive");
        }
        let f = &self.finetune;
        if f.epochs == 0 || f.batch_size == 0 || f.samples_per_epoch == 0 || f.fpn_channels == 0 {
            return bad("finetune: epochs, batch_size, samples_per_epoch and fpn_channels must be positive");
        }
        if !(f.fraction > 0.0 && f.fraction <= 1.0) {
            return bad("finetune: fraction must lie in (0, 1]");
        }
        if !(f.base_lr >= 0.0 && f.base_lr.is_finite()) {
            return bad("finetune: base_lr must be finite and non-negative");
        }
        if ![f.hflip_prob, f.vflip_prob].iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("finetune: flip probabilities must lie in [0, 1]");
        }
        if f.init == Init::Checkpoint && f.checkpoint.is_none() {
            return bad("finetune: init = checkpoint needs a checkpoint path");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_document_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[pretrain]\nepochs = 3\n[objective]\nmode = \"global\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.pretrain.batch_size, 16);
        assert_eq!(cfg.objective.mode, crate::objective::ObjectiveMode::Global);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1\n", "[pretrain]\nepoch = 2\n", "[encoder]\nwidth = 3\n", "[bogus]\n"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::ConfigInvalid(_))), "{text}");
        }
    }

    #[test]
    fn checkpoint_init_needs_a_path() {
        let mut cfg = ExperimentConfig::default();
        cfg.finetune.init = Init::Checkpoint;
        assert!(cfg.validate().is_err());
        cfg.finetune.checkpoint = Some("x.ckpt".into());
        cfg.validate().unwrap();
    }
}
