//! Model and training configuration, read from a single JSON file.
//!
//! ```json
//! {
//!   "model": {
//!     "scale": 4, "kernel_size": 24, "kernel_scale": 10.0,
//!     "encoder": {"channels": 32, "growth": 16, "num_rrdb": 8},
//!     "kernel_net": {"width": 64, "mults": [1, 2], "temb_dim": 64},
//!     "image_net": {"width": 64, "mults": [1, 2, 2, 4], "temb_dim": 64,
//!                   "kernel_proj_dim": 64, "candidates": 4, "attn_hidden": 16,
//!                   "temperature": 1.0},
//!     "schedule": {"T": 100, "beta_start": 0.0001, "beta_end": 0.05, "shape": "linear"}
//!   },
//!   "train": {"learning_rate": 0.0001, "batch_size": 4, "seed": 0, ...}
//! }
//! ```
//!
//! Every field has a default, so `{}` is a valid file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{invalid, Error, Result};
use crate::kernelgen::DEFAULT_KERNEL_SIZE;
use crate::nn::{EncoderConfig, ImageNetConfig, KernelNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: usize,
    pub kernel_size: usize,
    /// Kernels enter the kernel chain multiplied by this factor, bringing
    /// their peak values near unit scale.
    pub kernel_scale: f32,
    pub encoder: EncoderConfig,
    pub kernel_net: KernelNetConfig,
    pub image_net: ImageNetConfig,
    pub schedule: ScheduleSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            kernel_size: DEFAULT_KERNEL_SIZE,
            kernel_scale: 10.0,
            encoder: EncoderConfig::default(),
            kernel_net: KernelNetConfig::default(),
            image_net: ImageNetConfig::default(),
            schedule: ScheduleSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn kernel_len(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// HR sizes must be multiples of this.
    pub fn hr_multiple(&self) -> usize {
        1 << self.image_net.mults.len()
    }

    /// Reduced widths that keep every test and demo run on a laptop CPU.
    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: 16,
                growth: 8,
                num_rrdb: 2,
            },
            kernel_net: KernelNetConfig {
                width: 16,
                mults: vec![1, 2],
                temb_dim: 32,
            },
            image_net: ImageNetConfig {
                width: 16,
                mults: vec![1, 2, 2, 4],
                temb_dim: 32,
                kernel_proj_dim: 32,
                candidates: 4,
                attn_hidden: 16,
                temperature: 1.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(invalid!("scale must be positive"));
        }
        if !(self.kernel_scale.is_finite() && self.kernel_scale > 0.0) {
            return Err(invalid!("kernel_scale must be positive"));
        }
        if self.image_net.mults.is_empty() || self.kernel_net.mults.is_empty() {
            return Err(invalid!("networks need at least one resolution level"));
        }
        if self.kernel_size % (1 << self.kernel_net.mults.len()) != 0 {
            return Err(invalid!(
                "kernel size {} does not admit {} halvings",
                self.kernel_size,
                self.kernel_net.mults.len()
            ));
        }
        self.schedule.build()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepBudget {
    pub encoder: usize,
    pub kernel: usize,
    pub recon: usize,
}

impl Default for StepBudget {
    fn default() -> Self {
        Self {
            encoder: 2000,
            kernel: 5000,
            recon: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate of the encoder pretraining phase.
    pub encoder_learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: StepBudget,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub grad_clip: f64,
    /// Stop when the mean loss of the last window improves on the window
    /// before by less than `plateau_min_improvement` (relative). 0 disables.
    pub plateau_window: usize,
    pub plateau_min_improvement: f64,
    /// Re-run the kernel chain for every reconstructor step instead of
    /// caching one kernel condition per sample.
    pub recompute_v_every_step: bool,
    /// Only `"cpu"` is supported.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            encoder_learning_rate: 2e-4,
            batch_size: 4,
            max_steps: StepBudget::default(),
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 10,
            grad_clip: 1.0,
            plateau_window: 0,
            plateau_min_improvement: 1e-3,
            recompute_v_every_step: false,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if self.log_interval == 0 {
            return Err(invalid!("log_interval must be positive"));
        }
        for lr in [self.learning_rate, self.encoder_learning_rate] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid!("learning rates must be positive, got {lr}"));
            }
        }
        if self.device != "cpu" {
            return Err(invalid!("unsupported device {:?}; only \"cpu\" is available", self.device));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.model.schedule.timesteps, 100);
        assert_eq!(c.model.kernel_len(), 576);
        assert_eq!(c.model.hr_multiple(), 16);
    }

    #[test]
    fn round_trips_through_json() {
        let c = Config {
            model: ModelConfig::small(),
            train: TrainConfig {
                seed: 9,
                ..TrainConfig::default()
            },
        };
        let back: Config = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(serde_json::from_str::<Config>(r#"{"modle": {}}"#).is_err());
        let mut c = Config::default();
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.train.device = "cuda".into();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.model.kernel_size = 23;
        assert!(c.validate().is_err());
    }
}
