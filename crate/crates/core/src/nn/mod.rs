//! Learnable building blocks and the three networks of the method: the
//! RRDB LR encoder, the kernel noise predictor and the dynamic-convolution
//! image noise predictor.

mod blocks;
mod dynconv;
mod encoder;
mod unet;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use blocks::{DynResBlock, ResBlock, TimeMlp};
pub use dynconv::DynamicConv2d;
pub use encoder::{EncoderConfig, RrdbEncoder, SrHead};
pub use unet::{ImageNetConfig, ImageUnet, KernelNetConfig, KernelUnet};

use crate::autograd::{ParamId, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Copy-on-write access; cheap once no tape holds the tensor.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn var(&self, tape: &Tape, id: ParamId) -> Var {
        tape.param(id, &self.values[id.0])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| (**v).clone()))
            .collect()
    }

    /// Replace every parameter from `named`, requiring the exact same names
    /// and shapes as the freshly built network.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(shape_err!(
                "checkpoint holds {} tensors, network expects {}",
                named.len(),
                self.len()
            ));
        }
        for (name, t) in named {
            let id = self
                .find(name)
                .ok_or_else(|| shape_err!("unexpected tensor {name} in checkpoint"))?;
            if self.get(id).shape() != t.shape() {
                return Err(shape_err!(
                    "tensor {name}: checkpoint shape {:?}, network expects {:?}",
                    t.shape(),
                    self.get(id).shape()
                ));
            }
            self.values[id.0] = Arc::new(t.clone());
        }
        Ok(())
    }
}

/// Parameter initializer shared by all layer constructors.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f32) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("shape matches generated data");
        self.store.push(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.push(name, Tensor::zeros(shape))
    }
}

pub(crate) fn fan_in_bound(fan_in: usize) -> f32 {
    1.0 / (fan_in.max(1) as f32).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let bound = fan_in_bound(cin * geom.kh * geom.kw);
        let weight = init.uniform(format!("{name}.weight"), &[cout, cin, geom.kh, geom.kw], bound);
        let bias = init.uniform(format!("{name}.bias"), &[cout], bound);
        Self {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Same-padded 3×3 convolution.
    pub fn same3(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, cin, cout, ConvGeom::new(3, 1, 1))
    }

    pub fn zeroed(init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let weight = init.zeros(format!("{name}.weight"), &[cout, cin, geom.kh, geom.kw]);
        let bias = init.zeros(format!("{name}.bias"), &[cout]);
        Self {
            weight,
            bias,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = ps.var(tape, self.weight);
        let b = ps.var(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.geom)
    }
}

/// Stride-2 transposed convolution (kernel 4, padding 1): doubles height and width.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    weight: ParamId,
    bias: ParamId,
}

impl Upsample2x {
    pub const GEOM: ConvGeom = ConvGeom {
        kh: 4,
        kw: 4,
        stride: 2,
        pad: 1,
    };

    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let bound = fan_in_bound(cout * 16);
        let weight = init.uniform(format!("{name}.weight"), &[cin, cout, 4, 4], bound);
        let bias = init.uniform(format!("{name}.bias"), &[cout], bound);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = ps.var(tape, self.weight);
        let b = ps.var(tape, self.bias);
        tape.conv_transpose2d(x, w, Some(b), Self::GEOM)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fin: usize, fout: usize) -> Self {
        let bound = fan_in_bound(fin);
        let weight = init.uniform(format!("{name}.weight"), &[fout, fin], bound);
        let bias = init.uniform(format!("{name}.bias"), &[fout], bound);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = ps.var(tape, self.weight);
        let b = ps.var(tape, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Transformer sinusoidal encoding of timestep `t`: interleaved
/// `(sin(t·ω_i), cos(t·ω_i))` with `ω_i = 10000^(−2i/dim)`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid!("embedding width must be even and positive, got {dim}"));
    }
    let t = t as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out.push((t * freq).sin() as f32);
        out.push((t * freq).cos() as f32);
    }
    Ok(out)
}

/// Embeddings for a batch of timesteps, shape `(batch, dim)`.
pub fn sinusoidal_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_embed(t, dim)?);
    }
    Tensor::from_vec(&[ts.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::mish;

    #[test]
    fn embedding_at_zero_alternates() {
        let e = sinusoidal_embed(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_small_case_matches_formula() {
        let e = sinusoidal_embed(5, 4).unwrap();
        let want = [5f64.sin(), 5f64.cos(), 0.05f64.sin(), 0.05f64.cos()];
        for (a, b) in e.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn embedding_rejects_odd_width() {
        assert!(sinusoidal_embed(3, 5).is_err());
    }

    #[test]
    fn embeddings_are_distinct_and_bounded() {
        let all: Vec<Vec<f32>> = (1..=100).map(|t| sinusoidal_embed(t, 64).unwrap()).collect();
        for (i, a) in all.iter().enumerate() {
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            for b in &all[i + 1..] {
                let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
                assert!(d > 1e-3);
            }
        }
    }

    #[test]
    fn mish_matches_scalar_oracle() {
        for i in 0..=2000 {
            let x = -10.0 + i as f32 * 0.01;
            let xd = x as f64;
            let oracle = xd * (1.0 + xd.exp()).ln().tanh();
            let err = (mish(x) as f64 - oracle).abs();
            assert!(err < 1e-7 * oracle.abs().max(1.0), "x={x}: {err}");
        }
    }

    #[test]
    fn load_named_rejects_bad_shapes() {
        let mut ps = ParamStore::new();
        ps.push("a", Tensor::zeros(&[2, 2]));
        assert!(ps.load_named(&[("a".into(), Tensor::zeros(&[4]))]).is_err());
        assert!(ps.load_named(&[("b".into(), Tensor::zeros(&[2, 2]))]).is_err());
        ps.load_named(&[("a".into(), Tensor::full(&[2, 2], 1.0))]).unwrap();
        assert_eq!(ps.get(ParamId(0)).sum(), 4.0);
    }
}
