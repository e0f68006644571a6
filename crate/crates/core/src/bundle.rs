//! Per-phase checkpoints and the assembled three-network model.
//!
//! A checkpoint is a tensor container whose header `meta` records the phase,
//! the full [`ModelConfig`], the schedule checksum and a parameter checksum.
//! Networks are rebuilt from the config and every stored tensor is checked
//! against the rebuilt shape before use.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::container;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::nn::{ImageUnet, KernelUnet, ParamStore, RrdbEncoder};

pub const CHECKPOINT_FORMAT: &str = "dualdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Encoder,
    Kernel,
    Recon,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Encoder, Phase::Kernel, Phase::Recon];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Encoder => "encoder",
            Phase::Kernel => "kernel",
            Phase::Recon => "recon",
        }
    }

    /// Conventional file name inside a bundle directory.
    pub fn file_name(self) -> &'static str {
        match self {
            Phase::Encoder => "encoder.ckpt",
            Phase::Kernel => "kernel.ckpt",
            Phase::Recon => "recon.ckpt",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub phase: Phase,
    pub config: ModelConfig,
    pub schedule_checksum: String,
    pub param_checksum: String,
    pub trained: bool,
    pub steps: usize,
}

pub fn save_checkpoint(path: &Path, phase: Phase, config: &ModelConfig, params: &ParamStore, steps: usize) -> Result<()> {
    write_checkpoint(path, phase, config, params, steps, true)
}

fn write_checkpoint(
    path: &Path,
    phase: Phase,
    config: &ModelConfig,
    params: &ParamStore,
    steps: usize,
    trained: bool,
) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        phase,
        config: config.clone(),
        schedule_checksum: config.schedule.build()?.checksum(),
        param_checksum: params.checksum(),
        trained,
        steps,
    };
    container::write(path, &serde_json::to_value(&meta)?, &params.named_tensors())
}

/// Read a checkpoint's metadata and raw tensors, checking format and phase.
pub fn read_checkpoint(path: &Path, phase: Phase) -> Result<(CheckpointMeta, Vec<(String, crate::Tensor)>)> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint {
            phase: phase.name(),
            hint: format!("{} does not exist", path.display()),
        });
    }
    let (meta, tensors) = container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Container(format!("{}: bad checkpoint header: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Container(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    if meta.phase != phase {
        return Err(Error::Usage(format!(
            "{} holds the {} phase, expected {phase}",
            path.display(),
            meta.phase
        )));
    }
    meta.config.validate()?;
    DiffusionSchedule::from_spec_verified(&meta.config.schedule, &meta.schedule_checksum)?;
    Ok((meta, tensors))
}

fn restore(params: &mut ParamStore, meta: &CheckpointMeta, tensors: &[(String, crate::Tensor)], path: &Path) -> Result<()> {
    params
        .load_named(tensors)
        .map_err(|e| Error::Container(format!("{}: {e}", path.display())))?;
    if params.checksum() != meta.param_checksum {
        return Err(Error::Container(format!("{}: parameter checksum mismatch", path.display())));
    }
    Ok(())
}

/// Fresh networks with deterministic initialization from `seed`.
pub fn init_encoder(config: &ModelConfig, seed: u64) -> RrdbEncoder {
    RrdbEncoder::new(&config.encoder, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn init_kernel_net(config: &ModelConfig, seed: u64) -> Result<KernelUnet> {
    KernelUnet::new(
        &config.kernel_net,
        config.kernel_size,
        config.encoder.channels,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn init_image_net(config: &ModelConfig, seed: u64) -> Result<ImageUnet> {
    ImageUnet::new(
        &config.image_net,
        config.kernel_len(),
        config.encoder.channels,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn load_encoder(path: &Path) -> Result<(CheckpointMeta, RrdbEncoder)> {
    let (meta, tensors) = read_checkpoint(path, Phase::Encoder)?;
    let mut net = init_encoder(&meta.config, 0);
    restore(&mut net.params, &meta, &tensors, path)?;
    Ok((meta, net))
}

pub fn load_kernel_net(path: &Path) -> Result<(CheckpointMeta, KernelUnet)> {
    let (meta, tensors) = read_checkpoint(path, Phase::Kernel)?;
    let mut net = init_kernel_net(&meta.config, 0)?;
    restore(&mut net.params, &meta, &tensors, path)?;
    Ok((meta, net))
}

pub fn load_image_net(path: &Path) -> Result<(CheckpointMeta, ImageUnet)> {
    let (meta, tensors) = read_checkpoint(path, Phase::Recon)?;
    let mut net = init_image_net(&meta.config, 0)?;
    restore(&mut net.params, &meta, &tensors, path)?;
    Ok((meta, net))
}

/// Require that a later phase was built with the same model config.
pub fn ensure_same_config(a: &ModelConfig, b: &ModelConfig, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Usage(format!(
            "model config of {what} differs from the rest of the bundle"
        )));
    }
    Ok(())
}

/// The three trained networks plus their shared config and schedule.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub schedule: DiffusionSchedule,
    pub encoder: RrdbEncoder,
    pub kernel_net: KernelUnet,
    pub image_net: ImageUnet,
    /// False for freshly initialized networks; inference refuses to run on them.
    pub trained: bool,
}

/// Paths of the three checkpoints.
#[derive(Clone, Debug)]
pub struct BundlePaths {
    pub encoder: PathBuf,
    pub kernel: PathBuf,
    pub recon: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            encoder: dir.join(Phase::Encoder.file_name()),
            kernel: dir.join(Phase::Kernel.file_name()),
            recon: dir.join(Phase::Recon.file_name()),
        }
    }
}

impl ModelBundle {
    pub fn new(
        config: ModelConfig,
        encoder: RrdbEncoder,
        kernel_net: KernelUnet,
        image_net: ImageUnet,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            schedule: config.schedule.build()?,
            config,
            encoder,
            kernel_net,
            image_net,
            trained: true,
        })
    }

    pub fn load(paths: &BundlePaths) -> Result<Self> {
        let (emeta, encoder) = load_encoder(&paths.encoder)?;
        let (kmeta, kernel_net) = load_kernel_net(&paths.kernel)?;
        ensure_same_config(&emeta.config, &kmeta.config, "the kernel checkpoint")?;
        let (rmeta, image_net) = load_image_net(&paths.recon)?;
        ensure_same_config(&emeta.config, &rmeta.config, "the recon checkpoint")?;
        let trained = emeta.trained && kmeta.trained && rmeta.trained;
        let mut bundle = Self::new(emeta.config, encoder, kernel_net, image_net)?;
        bundle.trained = trained;
        Ok(bundle)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&BundlePaths::in_dir(dir))
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let p = BundlePaths::in_dir(dir);
        let t = self.trained;
        write_checkpoint(&p.encoder, Phase::Encoder, &self.config, &self.encoder.params, 0, t)?;
        write_checkpoint(&p.kernel, Phase::Kernel, &self.config, &self.kernel_net.params, 0, t)?;
        write_checkpoint(&p.recon, Phase::Recon, &self.config, &self.image_net.params, 0, t)
    }

    /// Untrained networks, for tests and smoke runs.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let encoder = init_encoder(&config, seed);
        let kernel_net = init_kernel_net(&config, seed.wrapping_add(1))?;
        let image_net = init_image_net(&config, seed.wrapping_add(2))?;
        let mut bundle = Self::new(config, encoder, kernel_net, image_net)?;
        bundle.trained = false;
        Ok(bundle)
    }
}
