//! Directional finite-difference checks of tape gradients.
//!
//! The probed scalar is `L(θ) = Σ r ⊙ f(θ)`, accumulated in `f64`, with
//! either fixed Gaussian weights `r` or the uniform weights `1/N` of a mean.
//! Each probe perturbs every parameter along a unit direction and compares
//! the central difference of `L` with the directional derivative from
//! backpropagation. Directions mix a random unit vector with the normalized
//! analytic gradient, which keeps the derivative well above `f32` forward
//! noise; a wrong gradient still disagrees with the measured difference. The realized `f32`
//! perturbations are measured exactly and used on both sides, so parameter
//! rounding does not bias the comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Project the output on fixed Gaussian weights.
    RandomProjection,
    /// Average the output, e.g. a squared residual for a mean squared error.
    Mean,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub reduction: Reduction,
    pub probes: usize,
    /// Euclidean norm of each perturbation.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            reduction: Reduction::RandomProjection,
            probes: 20,
            step: 1e-2,
            seed: 0,
        }
    }
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

impl GradCheck {
    /// Check `∂L/∂θ` for every tensor in `params`. `forward` builds the output
    /// on the given tape; it is evaluated with perturbed copies of `params`.
    pub fn run<F>(&self, params: &ParamStore, forward: F) -> Result<Vec<Probe>>
    where
        F: Fn(&Tape, &ParamStore) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eval = |ps: &ParamStore| -> Result<Tensor> {
            let tape = Tape::new();
            let y = forward(&tape, ps)?;
            Ok((*tape.value(y)).clone())
        };

        let tape = Tape::new();
        let y = forward(&tape, params)?;
        let shape = tape.shape(y);
        let r = match self.reduction {
            Reduction::RandomProjection => Tensor::randn(&shape, &mut rng),
            Reduction::Mean => Tensor::full(&shape, 1.0 / shape.iter().product::<usize>().max(1) as f32),
        };
        let loss = tape.dot(y, r.clone())?;
        let grads = tape.backward(loss)?.param_grads(params.len());
        drop(tape);

        let ids: Vec<_> = params.ids().collect();
        let flat_grad: Vec<f64> = ids
            .iter()
            .flat_map(|&id| match &grads[id.0] {
                Some(g) => g.data().iter().map(|&v| v as f64).collect(),
                None => vec![0.0; params.get(id).numel()],
            })
            .collect();
        let grad_norm = flat_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut probes = Vec::with_capacity(self.probes);
        for _ in 0..self.probes {
            let mut dir: Vec<f64> = (0..flat_grad.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let rnorm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            for (d, g) in dir.iter_mut().zip(&flat_grad) {
                *d /= rnorm;
                if grad_norm > 0.0 {
                    *d += g / grad_norm;
                }
            }
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let scale = self.step / norm;

            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut predicted = 0.0;
            let mut offset = 0;
            for &id in &ids {
                let base = params.get(id).data();
                let g = grads[id.0].as_ref();
                let (p, m) = (plus.get_mut(id).data_mut(), minus.get_mut(id).data_mut());
                for (i, &b) in base.iter().enumerate() {
                    let d = dir[offset + i] * scale;
                    p[i] = (b as f64 + d) as f32;
                    m[i] = (b as f64 - d) as f32;
                    if let Some(g) = g {
                        predicted += g.data()[i] as f64 * (p[i] as f64 - m[i] as f64);
                    }
                }
                offset += base.len();
            }
            let diff = weighted_sum(&eval(&plus)?, &r) - weighted_sum(&eval(&minus)?, &r);
            let (analytic, numeric) = (predicted / (2.0 * self.step), diff / (2.0 * self.step));
            probes.push(Probe {
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
        Ok(probes)
    }
}

/// Largest relative error over a set of probes.
pub fn worst(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
}
