//! Experiment configuration files (TOML, versioned).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::StartMode;
use crate::nn::models::Topology;
use crate::schedule::ScheduleConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Everything a training run needs; every constant the pipeline uses is
/// named here so runs are reproducible from the file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    /// Rate/distortion trade-off weight of the target model.
    pub lambda_r: f64,
    /// Weight of the perceptual-proxy term in the fine-tuning loss.
    pub lambda_perc: f64,
    /// Codebook commitment weight.
    pub beta: f64,
    /// Fixed step count used by the fine-tuning stage.
    pub l_steps: usize,
    pub batch_size: usize,
    pub start_mode: StartMode,
    pub schedule: ScheduleConfig,
    pub topology: Topology,

    // corpus
    pub corpus_seed: u64,
    pub corpus_train: usize,
    pub corpus_heldout: usize,
    /// When set, images are loaded from this directory instead of being
    /// generated (the last `corpus_heldout` files form the held-out set).
    pub corpus_dir: Option<PathBuf>,
    pub image_size: usize,

    // autoencoder pretraining
    pub ae_iters: usize,
    pub ae_lr: f64,
    pub ae_target_mse: f64,

    // base denoiser pretraining
    pub base_iters: usize,
    pub base_lr: f64,

    // stage I (independent per-step training); phase 1 warms up at
    // lambda_r = 2, phase 2 trains at the target lambda_r
    pub stage1_phase1_iters: usize,
    pub stage1_phase2_iters: usize,
    pub stage1_lr_phase1: f64,
    pub stage1_lr_phase2: f64,

    // stage II (fixed-step fine-tuning through the unrolled loop)
    pub stage2_iters: usize,
    pub stage2_lr: f64,

    pub grad_clip: f64,
    pub codebook_reseed_interval: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 7,
            lambda_r: 1.0,
            lambda_perc: 0.5,
            beta: 0.25,
            l_steps: 2,
            batch_size: 8,
            start_mode: StartMode::Relay,
            schedule: ScheduleConfig::default(),
            topology: Topology::default(),
            corpus_seed: 1234,
            corpus_train: 256,
            corpus_heldout: 16,
            corpus_dir: None,
            image_size: 64,
            ae_iters: 1600,
            ae_lr: 1e-3,
            ae_target_mse: 0.02,
            base_iters: 800,
            base_lr: 3e-4,
            stage1_phase1_iters: 200,
            stage1_phase2_iters: 600,
            stage1_lr_phase1: 3e-4,
            stage1_lr_phase2: 1e-4,
            stage2_iters: 250,
            stage2_lr: 5e-5,
            grad_clip: 1.0,
            codebook_reseed_interval: 100,
            log_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.lambda_r <= 0.0 {
            return Err(Error::Config("lambda_r must be > 0".into()));
        }
        if self.l_steps == 0 || self.l_steps > self.schedule.relay_n {
            return Err(Error::Config("l_steps outside [1, relay_n]".into()));
        }
        if self.batch_size == 0 || self.corpus_train == 0 {
            return Err(Error::Config("empty batch or corpus".into()));
        }
        if self.image_size % (2 * self.topology.factor) != 0 {
            // training batches skip padding, so sizes must divide evenly
            return Err(Error::Config(
                "training image size must be a multiple of 2x the downsampling factor".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        Ok(crate::nn::checkpoint::config_hash(&self.to_toml()?))
    }
}

/// Grid specification for the eval tool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    /// Checkpoint files, one per rate point.
    pub models: Vec<PathBuf>,
    #[serde(default = "default_l_values")]
    pub l_values: Vec<usize>,
    #[serde(default = "default_lambda_s")]
    pub lambda_s_values: Vec<f64>,
    pub out_dir: PathBuf,
    /// Emit per-latent-element bit-allocation maps.
    #[serde(default = "default_true")]
    pub bit_allocation_maps: bool,
}

fn default_l_values() -> Vec<usize> {
    vec![2, 5]
}

fn default_lambda_s() -> Vec<f64> {
    vec![0.0, 0.6, 0.8, 1.0, 1.3, 1.5]
}

fn default_true() -> bool {
    true
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        toml::from_str(&s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let s = cfg.to_toml().unwrap();
        let back = TrainConfig::from_toml(&s).unwrap();
        assert_eq!(back.lambda_r, cfg.lambda_r);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());

        let mut bad = cfg.clone();
        bad.lambda_r = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.version = 99;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lambda_grid_instantiates() {
        for lr in [2.0, 1.0, 0.5, 0.25, 0.1] {
            let cfg = TrainConfig {
                lambda_r: lr,
                ..Default::default()
            };
            cfg.validate().unwrap();
        }
    }
}
