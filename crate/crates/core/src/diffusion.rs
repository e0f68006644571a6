//! DDPM noise schedule, forward sampling and the ancestral reverse step.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// Serializable description from which a schedule is rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
            shape: ScheduleShape::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end, self.shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    shape: ScheduleShape,
) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(invalid!("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let betas: Vec<f64> = match shape {
        ScheduleShape::Linear if timesteps == 1 => vec![beta_start],
        ScheduleShape::Linear => (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect(),
    };
    let (alphas, alpha_bars, sigmas) = derive(&betas);
    Ok(DiffusionSchedule {
        spec: ScheduleSpec {
            timesteps,
            beta_start,
            beta_end,
            shape,
        },
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

fn derive(betas: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(betas.len());
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let sigmas = (0..betas.len())
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt()
        })
        .collect();
    (alphas, alpha_bars, sigmas)
}

impl DiffusionSchedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(invalid!("timestep {t} outside 1..={}", self.timesteps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// SHA-256 over the little-endian bytes of all four arrays.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for arr in [&self.betas, &self.alphas, &self.alpha_bars, &self.sigmas] {
            for v in arr.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// True when the derived arrays match a fresh recomputation from `betas`.
    pub fn is_consistent(&self) -> bool {
        let (a, ab, s) = derive(&self.betas);
        a == self.alphas && ab == self.alpha_bars && s == self.sigmas
    }

    /// Rebuild from `spec` and compare against a stored checksum.
    pub fn from_spec_verified(spec: &ScheduleSpec, checksum: &str) -> Result<Self> {
        let s = spec.build()?;
        if s.checksum() != checksum {
            return Err(Error::Container(format!(
                "schedule checksum mismatch: stored {checksum}, recomputed {}",
                s.checksum()
            )));
        }
        Ok(s)
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| (a * x as f64 + b * e as f64) as f32)
}

/// `(x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn posterior_mean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_map(eps_hat, |x, e| (inv * (x as f64 - coef * e as f64)) as f32)
}

/// `x_{t−1} = posterior_mean + σ_t·z`; `z` must be zero at `t = 1`.
pub fn reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let mean = posterior_mean(x_t, eps_hat, t, sched)?;
    if t == 1 {
        if z.data().iter().any(|&v| v != 0.0) {
            return Err(invalid!("noise must be zero at the final reverse step"));
        }
        mean.ensure_same_shape(z)?;
        return Ok(mean);
    }
    let sigma = sched.sigma(t);
    mean.zip_map(z, |m, n| (m as f64 + sigma * n as f64) as f32)
}

/// Mean squared error over all elements.
pub fn noise_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    eps_hat.ensure_same_shape(eps)?;
    let sum: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / eps.numel().max(1) as f64)
}
