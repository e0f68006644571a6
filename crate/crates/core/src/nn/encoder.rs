//! RRDB LR encoder and the throwaway pixel-shuffle head used to pretrain it.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels::ConvGeom;

use super::{Conv2d, Init, ParamStore};

const LRELU_SLOPE: f32 = 0.2;
const RESIDUAL_SCALE: f32 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature width of the encoding `u`.
    pub channels: usize,
    /// Growth width inside each dense block.
    pub growth: usize,
    pub num_rrdb: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            growth: 16,
            num_rrdb: 8,
        }
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(init: &mut Init, name: &str, nf: usize, gc: usize) -> Self {
        let convs = (0..5)
            .map(|i| {
                let cout = if i == 4 { nf } else { gc };
                Conv2d::same3(init, &format!("{name}.conv{}", i + 1), nf + i * gc, cout)
            })
            .collect();
        Self { convs }
    }

    fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for conv in &self.convs[..4] {
            let input = tape.concat(&feats)?;
            let h = conv.forward(tape, ps, input)?;
            feats.push(tape.leaky_relu(h, LRELU_SLOPE));
        }
        let input = tape.concat(&feats)?;
        let out = self.convs[4].forward(tape, ps, input)?;
        tape.add(tape.scale(out, RESIDUAL_SCALE), x)
    }
}

#[derive(Clone, Debug)]
struct Rrdb {
    blocks: [DenseBlock; 3],
}

impl Rrdb {
    fn new(init: &mut Init, name: &str, nf: usize, gc: usize) -> Self {
        Self {
            blocks: [
                DenseBlock::new(init, &format!("{name}.rdb1"), nf, gc),
                DenseBlock::new(init, &format!("{name}.rdb2"), nf, gc),
                DenseBlock::new(init, &format!("{name}.rdb3"), nf, gc),
            ],
        }
    }

    fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, ps, h)?;
        }
        tape.add(tape.scale(h, RESIDUAL_SCALE), x)
    }
}

/// `u = f(LR)`: a stack of residual-in-residual dense blocks at LR resolution.
#[derive(Clone, Debug)]
pub struct RrdbEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    conv_first: Conv2d,
    body: Vec<Rrdb>,
    conv_body: Conv2d,
}

impl RrdbEncoder {
    pub fn new(config: &EncoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng);
        let nf = config.channels;
        let conv_first = Conv2d::same3(&mut init, "conv_first", 3, nf);
        let body = (0..config.num_rrdb)
            .map(|i| Rrdb::new(&mut init, &format!("body.{i}"), nf, config.growth))
            .collect();
        let conv_body = Conv2d::same3(&mut init, "conv_body", nf, nf);
        Self {
            config: config.clone(),
            params,
            conv_first,
            body,
            conv_body,
        }
    }

    /// Encode a `(batch, 3, h, w)` LR batch in `[-1, 1]` into `(batch, C, h, w)`.
    pub fn forward(&self, tape: &Tape, lr: Var) -> Result<Var> {
        self.forward_with(tape, &self.params, lr)
    }

    /// [`Self::forward`] with a parameter store whose first entries follow
    /// the encoder's layout.
    pub fn forward_with(&self, tape: &Tape, ps: &ParamStore, lr: Var) -> Result<Var> {
        let s = tape.shape(lr);
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err!("encoder expects (batch, 3, h, w), got {s:?}"));
        }
        let fea = self.conv_first.forward(tape, ps, lr)?;
        let mut h = fea;
        for block in &self.body {
            h = block.forward(tape, ps, h)?;
        }
        let body = self.conv_body.forward(tape, ps, h)?;
        tape.add(fea, body)
    }

    pub fn encode(&self, lr: &crate::tensor::Tensor) -> Result<crate::tensor::Tensor> {
        let tape = Tape::new();
        let x = tape.constant(lr.clone());
        let u = self.forward(&tape, x)?;
        Ok((*tape.value(u)).clone())
    }
}

/// Conv → LeakyReLU → conv to `3·s²` channels → pixel shuffle by `s`.
/// Its parameters live in whatever store `init` fills, normally a copy of the
/// encoder's store so both train together.
#[derive(Clone, Debug)]
pub struct SrHead {
    conv: Conv2d,
    to_subpixels: Conv2d,
    scale: usize,
}

impl SrHead {
    pub fn new(init: &mut Init, channels: usize, scale: usize) -> Self {
        let conv = Conv2d::same3(init, "head.conv", channels, channels);
        let to_subpixels = Conv2d::new(
            init,
            "head.subpixel",
            channels,
            3 * scale * scale,
            ConvGeom::new(3, 1, 1),
        );
        Self {
            conv,
            to_subpixels,
            scale,
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, u: Var) -> Result<Var> {
        let h = tape.leaky_relu(self.conv.forward(tape, ps, u)?, LRELU_SLOPE);
        let h = self.to_subpixels.forward(tape, ps, h)?;
        tape.pixel_shuffle(h, self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form parameter count of the encoder topology.
    fn expected_params(cfg: &EncoderConfig) -> usize {
        let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let (nf, gc) = (cfg.channels, cfg.growth);
        let dense: usize = (0..4).map(|i| conv(nf + i * gc, gc)).sum::<usize>() + conv(nf + 4 * gc, nf);
        conv(3, nf) + cfg.num_rrdb * 3 * dense + conv(nf, nf)
    }

    #[test]
    fn default_parameter_count_matches_closed_form() {
        let cfg = EncoderConfig::default();
        let enc = RrdbEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(enc.params.num_scalars(), expected_params(&cfg));
        assert_eq!(enc.body.len(), 8);
    }

    #[test]
    fn encoding_keeps_spatial_size_and_is_deterministic() {
        let cfg = EncoderConfig {
            channels: 8,
            growth: 4,
            num_rrdb: 2,
        };
        let enc = RrdbEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let lr = Tensor::randn(&[2, 3, 6, 5], &mut ChaCha8Rng::seed_from_u64(2));
        let u = enc.encode(&lr).unwrap();
        assert_eq!(u.shape(), &[2, 8, 6, 5]);
        assert!(u.all_finite());
        assert_eq!(u, enc.encode(&lr).unwrap());
    }

    #[test]
    fn encoder_rejects_wrong_channel_count() {
        let cfg = EncoderConfig {
            channels: 4,
            growth: 2,
            num_rrdb: 1,
        };
        let enc = RrdbEncoder::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(enc.encode(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn head_upsamples_by_scale() {
        let mut ps = ParamStore::new();
        let head = SrHead::new(&mut Init::new(&mut ps, &mut ChaCha8Rng::seed_from_u64(3)), 4, 4);
        let tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[1, 4, 3, 5]));
        let y = head.forward(&tape, &ps, u).unwrap();
        assert_eq!(tape.shape(y), vec![1, 3, 12, 20]);
    }
}
