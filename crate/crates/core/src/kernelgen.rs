//! Anisotropic Gaussian degradation kernels.
//!
//! A kernel is parameterized by the eigenvalues `λ1, λ2` (variances, in
//! pixels²) and rotation `θ` of its covariance `Σ = R(θ)·diag(λ1, λ2)·R(θ)ᵀ`.
//! Grid coordinates are `(row, col)` offsets from the fractional center
//! `((size−1)/2, (size−1)/2)`, so at `θ = 0` the variance along rows is `λ1`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

pub const LAMBDA_MIN: f64 = 0.2;
pub const LAMBDA_MAX: f64 = 4.0;
pub const DEFAULT_KERNEL_SIZE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
}

impl KernelParams {
    pub fn new(lambda1: f64, lambda2: f64, theta: f64) -> Result<Self> {
        let p = Self {
            lambda1,
            lambda2,
            theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !l.is_finite() || !(LAMBDA_MIN..=LAMBDA_MAX).contains(&l) {
                return Err(invalid!(
                    "{name} = {l} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]"
                ));
            }
        }
        if !self.theta.is_finite() || !(0.0..PI).contains(&self.theta) {
            return Err(invalid!("theta = {} outside [0, pi)", self.theta));
        }
        Ok(())
    }

    /// Draw `λ1, λ2 ~ U[0.2, 4]` and `θ ~ U[0, π)` independently.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            lambda1: rng.random_range(LAMBDA_MIN..=LAMBDA_MAX),
            lambda2: rng.random_range(LAMBDA_MIN..=LAMBDA_MAX),
            theta: rng.random_range(0.0..PI),
        }
    }
}

pub fn sample_params<R: Rng + ?Sized>(rng: &mut R) -> KernelParams {
    KernelParams::sample(rng)
}

/// Symmetric 2×2 matrix `[[a, b], [b, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Cov2 {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn is_spd(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite() && self.a > 0.0 && self.det() > 0.0
    }

    pub fn inverse(&self) -> Result<Cov2> {
        if !self.is_spd() {
            return Err(invalid!("covariance {self:?} is not symmetric positive definite"));
        }
        let d = self.det();
        Ok(Cov2 {
            a: self.c / d,
            b: -self.b / d,
            c: self.a / d,
        })
    }
}

pub fn covariance_from_params(p: &KernelParams) -> Result<Cov2> {
    p.validate()?;
    let (s, c) = p.theta.sin_cos();
    Ok(Cov2 {
        a: p.lambda1 * c * c + p.lambda2 * s * s,
        b: (p.lambda1 - p.lambda2) * s * c,
        c: p.lambda1 * s * s + p.lambda2 * c * c,
    })
}

/// A square blur kernel stored row-major. Kernels from [`render_kernel`]
/// are non-negative and sum to one; kernels rebuilt from diffusion states
/// with [`vector_to_kernel`] need not be.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(shape_err!(
                "kernel of size {size} needs {} values, got {}",
                size * size,
                values.len()
            ));
        }
        Ok(Self { size, values })
    }

    /// Unit impulse at `(size/2, size/2)`, the convolution anchor.
    pub fn delta(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        values[(size / 2) * size + size / 2] = 1.0;
        Self { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (self.sum() - 1.0).abs() <= 1e-6
    }

    /// Clamp negatives to zero and renormalize to unit sum. A state with no
    /// positive mass projects to the uniform kernel.
    pub fn project(&self) -> Kernel {
        let clamped: Vec<f64> = self.values.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let values = if total > 0.0 && total.is_finite() {
            clamped.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / (self.size * self.size) as f64; self.size * self.size]
        };
        Kernel {
            size: self.size,
            values,
        }
    }

    /// Euclidean distance between two kernels of the same size.
    pub fn l2_distance(&self, other: &Kernel) -> Result<f64> {
        if self.size != other.size {
            return Err(shape_err!("kernel sizes {} vs {}", self.size, other.size));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Rotate the grid by 90° counter-clockwise.
    pub fn rot90(&self) -> Kernel {
        let n = self.size;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = self.values[j * n + (n - 1 - i)];
            }
        }
        Kernel { size: n, values }
    }
}

/// Sample `exp(−½ xᵀΣ⁻¹x)` on a `size × size` grid and normalize to unit sum.
pub fn render_kernel(sigma: &Cov2, size: usize) -> Result<Kernel> {
    if size < 3 {
        return Err(invalid!("kernel size must be at least 3, got {size}"));
    }
    let inv = sigma.inverse()?;
    let center = (size as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(size * size);
    for i in 0..size {
        let r = i as f64 - center;
        for j in 0..size {
            let c = j as f64 - center;
            let q = inv.a * r * r + 2.0 * inv.b * r * c + inv.c * c * c;
            values.push((-0.5 * q).exp());
        }
    }
    let total: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(Kernel { size, values })
}

pub fn kernel_from_params(p: &KernelParams, size: usize) -> Result<Kernel> {
    render_kernel(&covariance_from_params(p)?, size)
}

/// Row-major flattening; lossless.
pub fn kernel_to_vector(k: &Kernel) -> Vec<f64> {
    k.values.clone()
}

/// Inverse of [`kernel_to_vector`]. Does not renormalize.
pub fn vector_to_kernel(v: &[f64], size: usize) -> Result<Kernel> {
    Kernel::from_values(size, v.to_vec())
}
