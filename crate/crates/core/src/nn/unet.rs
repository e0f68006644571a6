//! U-Net noise predictors for the kernel chain and the image chain.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;

use super::blocks::DynBlockSpec;
use super::{Conv2d, DynResBlock, Init, ParamStore, ResBlock, TimeMlp, Upsample2x};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelNetConfig {
    pub width: usize,
    /// Channel multiplier per resolution level; one halving per level.
    pub mults: Vec<usize>,
    pub temb_dim: usize,
}

impl Default for KernelNetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            mults: vec![1, 2],
            temb_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageNetConfig {
    pub width: usize,
    pub mults: Vec<usize>,
    pub temb_dim: usize,
    /// Width each block projects the kernel condition `v` to.
    pub kernel_proj_dim: usize,
    /// Candidate kernels per dynamic convolution.
    pub candidates: usize,
    pub attn_hidden: usize,
    pub temperature: f32,
}

impl Default for ImageNetConfig {
    fn default() -> Self {
        Self {
            width: 64,
            mults: vec![1, 2, 2, 4],
            temb_dim: 64,
            kernel_proj_dim: 64,
            candidates: 4,
            attn_hidden: 16,
            temperature: 1.0,
        }
    }
}

trait CondBlock {
    fn apply(&self, tape: &Tape, ps: &ParamStore, x: Var, t: Var, v: Option<Var>) -> Result<Var>;
}

impl CondBlock for ResBlock {
    fn apply(&self, tape: &Tape, ps: &ParamStore, x: Var, t: Var, _v: Option<Var>) -> Result<Var> {
        self.forward(tape, ps, x, t)
    }
}

impl CondBlock for DynResBlock {
    fn apply(&self, tape: &Tape, ps: &ParamStore, x: Var, t: Var, v: Option<Var>) -> Result<Var> {
        self.forward(tape, ps, x, t, v)
    }
}

#[derive(Clone, Debug)]
struct Level<B> {
    block1: B,
    block2: B,
}

#[derive(Clone, Debug)]
struct UnetBody<B> {
    time: TimeMlp,
    in_conv: Conv2d,
    downs: Vec<(Level<B>, Conv2d)>,
    mid: Level<B>,
    ups: Vec<(Upsample2x, Level<B>)>,
    out_conv: Conv2d,
    out_proj: Conv2d,
}

impl<B: CondBlock> UnetBody<B> {
    /// `fused` extra channels are concatenated after the input conv block.
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &mut Init,
        in_channels: usize,
        fused: usize,
        out_channels: usize,
        width: usize,
        mults: &[usize],
        temb_dim: usize,
        mut block: impl FnMut(&mut Init, &str, usize, usize) -> Result<B>,
    ) -> Result<Self> {
        if mults.is_empty() || width == 0 || mults.contains(&0) {
            return Err(invalid!("U-Net needs a positive width and at least one level"));
        }
        let time = TimeMlp::new(init, "time", temb_dim);
        let in_conv = Conv2d::same3(init, "in_conv", in_channels, width);
        let mut ch = width + fused;
        let mut downs = Vec::new();
        for (i, &m) in mults.iter().enumerate() {
            let out = width * m;
            let level = Level {
                block1: block(init, &format!("down.{i}.block1"), ch, out)?,
                block2: block(init, &format!("down.{i}.block2"), out, out)?,
            };
            let down = Conv2d::new(init, &format!("down.{i}.down"), out, out, ConvGeom::new(3, 2, 1));
            downs.push((level, down));
            ch = out;
        }
        let mid = Level {
            block1: block(init, "mid.block1", ch, ch)?,
            block2: block(init, "mid.block2", ch, ch)?,
        };
        let mut ups = Vec::new();
        for (i, &m) in mults.iter().enumerate().rev() {
            let skip = width * m;
            let up = Upsample2x::new(init, &format!("up.{i}.up"), ch, ch);
            let level = Level {
                block1: block(init, &format!("up.{i}.block1"), ch + skip, skip)?,
                block2: block(init, &format!("up.{i}.block2"), skip, skip)?,
            };
            ups.push((up, level));
            ch = skip;
        }
        let out_conv = Conv2d::same3(init, "out_conv", ch, width);
        let out_proj = Conv2d::zeroed(init, "out_proj", width, out_channels, ConvGeom::new(1, 1, 0));
        Ok(Self {
            time,
            in_conv,
            downs,
            mid,
            ups,
            out_conv,
            out_proj,
        })
    }

    fn levels(&self) -> usize {
        self.downs.len()
    }

    fn forward(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        x: Var,
        fuse: Option<Var>,
        timesteps: &[usize],
        v: Option<Var>,
    ) -> Result<Var> {
        let s = tape.shape(x);
        let factor = 1 << self.levels();
        if s.len() != 4 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(shape_err!(
                "U-Net input {s:?}: height and width must be multiples of {factor}"
            ));
        }
        if timesteps.len() != s[0] {
            return Err(shape_err!("{} timesteps for batch {}", timesteps.len(), s[0]));
        }
        let t = self.time.forward(tape, ps, timesteps)?;
        let mut h = tape.mish(self.in_conv.forward(tape, ps, x)?);
        if let Some(f) = fuse {
            h = tape.concat(&[h, f])?;
        }
        let mut skips = Vec::with_capacity(self.levels());
        for (level, down) in &self.downs {
            h = level.block1.apply(tape, ps, h, t, v)?;
            h = level.block2.apply(tape, ps, h, t, v)?;
            skips.push(h);
            h = down.forward(tape, ps, h)?;
        }
        h = self.mid.block1.apply(tape, ps, h, t, v)?;
        h = self.mid.block2.apply(tape, ps, h, t, v)?;
        for (up, level) in &self.ups {
            h = up.forward(tape, ps, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(&[h, skip])?;
            h = level.block1.apply(tape, ps, h, t, v)?;
            h = level.block2.apply(tape, ps, h, t, v)?;
        }
        let h = tape.mish(self.out_conv.forward(tape, ps, h)?);
        self.out_proj.forward(tape, ps, h)
    }
}

/// Noise predictor of the kernel chain. The kernel is a one-channel image;
/// the LR encoding, resized to the kernel grid, is concatenated at the input.
#[derive(Clone, Debug)]
pub struct KernelUnet {
    pub config: KernelNetConfig,
    pub params: ParamStore,
    pub kernel_size: usize,
    pub enc_channels: usize,
    body: UnetBody<ResBlock>,
}

impl KernelUnet {
    pub fn new(
        config: &KernelNetConfig,
        kernel_size: usize,
        enc_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let factor = 1 << config.mults.len();
        if kernel_size % factor != 0 {
            return Err(invalid!(
                "kernel size {kernel_size} does not admit {} halvings",
                config.mults.len()
            ));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng);
        let temb = config.temb_dim;
        let body = UnetBody::new(
            &mut init,
            1 + enc_channels,
            0,
            1,
            config.width,
            &config.mults,
            temb,
            |init, name, cin, cout| Ok(ResBlock::new(init, name, cin, cout, temb)),
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            kernel_size,
            enc_channels,
            body,
        })
    }

    /// `x_t: (b, 1, k, k)`, `u: (b, C, k, k)` → predicted noise `(b, 1, k, k)`.
    pub fn forward(&self, tape: &Tape, x_t: Var, u: Var, timesteps: &[usize]) -> Result<Var> {
        self.forward_with(tape, &self.params, x_t, u, timesteps)
    }

    /// [`Self::forward`] with a substitute parameter store of the same layout.
    pub fn forward_with(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        x_t: Var,
        u: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        let xs = tape.shape(x_t);
        let us = tape.shape(u);
        let k = self.kernel_size;
        if xs.len() != 4 || xs[1..] != [1, k, k] {
            return Err(shape_err!("kernel state must be (b, 1, {k}, {k}), got {xs:?}"));
        }
        if us != [xs[0], self.enc_channels, k, k] {
            return Err(shape_err!(
                "resized LR encoding must be ({}, {}, {k}, {k}), got {us:?}",
                xs[0],
                self.enc_channels
            ));
        }
        let input = tape.concat(&[x_t, u])?;
        self.body.forward(tape, ps, input, None, timesteps, None)
    }
}

/// Noise predictor of the HR-residual chain: a U-Net of dynamic residual
/// blocks, each conditioned on the timestep embedding and the kernel `v`.
#[derive(Clone, Debug)]
pub struct ImageUnet {
    pub config: ImageNetConfig,
    pub params: ParamStore,
    pub kernel_len: usize,
    pub enc_channels: usize,
    body: UnetBody<DynResBlock>,
}

impl ImageUnet {
    pub fn new(
        config: &ImageNetConfig,
        kernel_len: usize,
        enc_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, rng);
        let spec = DynBlockSpec {
            temb_dim: config.temb_dim,
            kernel: Some((kernel_len, config.kernel_proj_dim)),
            candidates: config.candidates,
            attn_hidden: config.attn_hidden,
            temperature: config.temperature,
        };
        let body = UnetBody::new(
            &mut init,
            3,
            enc_channels,
            3,
            config.width,
            &config.mults,
            config.temb_dim,
            |init, name, cin, cout| DynResBlock::new(init, name, cin, cout, spec),
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            kernel_len,
            enc_channels,
            body,
        })
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.body.levels()
    }

    /// `x_t: (b, 3, H, W)`, `u_up: (b, C, H, W)`, `v: (b, kernel_len)`.
    pub fn forward(
        &self,
        tape: &Tape,
        x_t: Var,
        u_up: Var,
        v: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        self.forward_with(tape, &self.params, x_t, u_up, v, timesteps)
    }

    /// [`Self::forward`] with a substitute parameter store of the same layout.
    pub fn forward_with(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        x_t: Var,
        u_up: Var,
        v: Var,
        timesteps: &[usize],
    ) -> Result<Var> {
        let xs = tape.shape(x_t);
        if xs.len() != 4 || xs[1] != 3 {
            return Err(shape_err!("image state must be (b, 3, H, W), got {xs:?}"));
        }
        let us = tape.shape(u_up);
        if us != [xs[0], self.enc_channels, xs[2], xs[3]] {
            return Err(shape_err!("upsampled LR encoding {us:?} for state {xs:?}"));
        }
        let vs = tape.shape(v);
        if vs != [xs[0], self.kernel_len] {
            return Err(shape_err!(
                "kernel condition must be ({}, {}), got {vs:?}",
                xs[0],
                self.kernel_len
            ));
        }
        self.body.forward(tape, ps, x_t, Some(u_up), timesteps, Some(v))
    }
}
