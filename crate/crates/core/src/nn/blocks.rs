use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels::ConvGeom;

use super::{Conv2d, DynamicConv2d, Init, Linear, ParamStore};

/// Sinusoidal features → Linear → Mish → Linear.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    pub dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            dim,
            fc1: Linear::new(init, &format!("{name}.0"), dim, dim * 4),
            fc2: Linear::new(init, &format!("{name}.1"), dim * 4, dim),
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, timesteps: &[usize]) -> Result<Var> {
        let emb = tape.constant(super::sinusoidal_batch(timesteps, self.dim)?);
        let h = self.fc1.forward(tape, ps, emb)?;
        let h = tape.mish(h);
        self.fc2.forward(tape, ps, h)
    }
}

/// Residual block with static convolutions and an additive timestep bias.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    time_bias: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, temb_dim: usize) -> Self {
        Self {
            conv1: Conv2d::same3(init, &format!("{name}.conv1"), cin, cout),
            time_bias: Linear::new(init, &format!("{name}.time"), temb_dim, cout),
            conv2: Conv2d::same3(init, &format!("{name}.conv2"), cout, cout),
            skip: (cin != cout).then(|| {
                Conv2d::new(init, &format!("{name}.skip"), cin, cout, ConvGeom::new(1, 1, 0))
            }),
        }
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var, t_emb: Var) -> Result<Var> {
        let h = tape.mish(self.conv1.forward(tape, ps, x)?);
        let h = tape.add_bias(h, self.time_bias.forward(tape, ps, t_emb)?)?;
        let h = tape.mish(self.conv2.forward(tape, ps, h)?);
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, ps, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Residual block of two dynamic convolutions conditioned on the timestep
/// embedding and, when configured, a projection of the kernel condition `v`.
#[derive(Clone, Debug)]
pub struct DynResBlock {
    pub conv1: DynamicConv2d,
    pub cond_bias: Linear,
    pub conv2: DynamicConv2d,
    pub kernel_proj: Option<Linear>,
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Copy, Debug)]
pub struct DynBlockSpec {
    pub temb_dim: usize,
    /// `(length of v, projected width)`; `None` conditions on time only.
    pub kernel: Option<(usize, usize)>,
    pub candidates: usize,
    pub attn_hidden: usize,
    pub temperature: f32,
}

impl DynBlockSpec {
    pub fn cond_dim(&self) -> usize {
        self.temb_dim + self.kernel.map_or(0, |(_, p)| p)
    }
}

impl DynResBlock {
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        spec: DynBlockSpec,
    ) -> Result<Self> {
        let cond = spec.cond_dim();
        let geom = ConvGeom::new(3, 1, 1);
        let conv1 = DynamicConv2d::new(
            init,
            &format!("{name}.conv1"),
            cin,
            cout,
            geom,
            cond,
            spec.candidates,
            spec.attn_hidden,
            spec.temperature,
        )?;
        let cond_bias = Linear::new(init, &format!("{name}.cond"), cond, cout);
        let conv2 = DynamicConv2d::new(
            init,
            &format!("{name}.conv2"),
            cout,
            cout,
            geom,
            cond,
            spec.candidates,
            spec.attn_hidden,
            spec.temperature,
        )?;
        let kernel_proj = spec
            .kernel
            .map(|(len, width)| Linear::new(init, &format!("{name}.kproj"), len, width));
        let skip = (cin != cout).then(|| {
            Conv2d::new(init, &format!("{name}.skip"), cin, cout, ConvGeom::new(1, 1, 0))
        });
        Ok(Self {
            conv1,
            cond_bias,
            conv2,
            kernel_proj,
            skip,
        })
    }

    /// The conditioning vector `concat(t_emb, proj(v))`, or `t_emb` alone.
    pub fn condition(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        t_emb: Var,
        v: Option<Var>,
    ) -> Result<Var> {
        match (&self.kernel_proj, v) {
            (Some(proj), Some(v)) => {
                let pv = proj.forward(tape, ps, v)?;
                tape.concat(&[t_emb, pv])
            }
            (None, _) => Ok(t_emb),
            (Some(_), None) => Err(shape_err!("block expects a kernel condition")),
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        ps: &ParamStore,
        x: Var,
        t_emb: Var,
        v: Option<Var>,
    ) -> Result<Var> {
        let cond = self.condition(tape, ps, t_emb, v)?;
        let h = tape.mish(self.conv1.forward(tape, ps, x, cond)?);
        let h = tape.add_bias(h, self.cond_bias.forward(tape, ps, cond)?)?;
        let h = tape.mish(self.conv2.forward(tape, ps, h, cond)?);
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, ps, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> DynBlockSpec {
        DynBlockSpec {
            temb_dim: 6,
            kernel: Some((9, 4)),
            candidates: 3,
            attn_hidden: 8,
            temperature: 1.0,
        }
    }

    fn build(cin: usize, cout: usize) -> (ParamStore, DynResBlock) {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut init = Init::new(&mut ps, &mut rng);
        let block = DynResBlock::new(&mut init, "b", cin, cout, spec()).unwrap();
        (ps, block)
    }

    fn inputs(seed: u64, c: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[2, c, 5, 5], &mut rng),
            Tensor::randn(&[2, 6], &mut rng),
            Tensor::randn(&[2, 9], &mut rng),
        )
    }

    fn run(ps: &ParamStore, block: &DynResBlock, x: &Tensor, t: &Tensor, v: &Tensor) -> Tensor {
        let tape = Tape::new();
        let y = block
            .forward(
                &tape,
                ps,
                tape.constant(x.clone()),
                tape.constant(t.clone()),
                Some(tape.constant(v.clone())),
            )
            .unwrap();
        (*tape.value(y)).clone()
    }

    #[test]
    fn zero_weights_leave_identity_skip() {
        let (mut ps, block) = build(4, 4);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let (x, t, v) = inputs(1, 4);
        assert_eq!(run(&ps, &block, &x, &t, &v), x);
    }

    #[test]
    fn shape_is_preserved_and_channels_change_through_skip() {
        let (ps, block) = build(4, 4);
        let (x, t, v) = inputs(2, 4);
        assert_eq!(run(&ps, &block, &x, &t, &v).shape(), x.shape());

        let (ps, block) = build(4, 7);
        assert_eq!(run(&ps, &block, &x, &t, &v).shape(), &[2, 7, 5, 5]);
    }

    #[test]
    fn kernel_condition_changes_output() {
        let (ps, block) = build(4, 4);
        let (x, t, v) = inputs(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let v2 = v.add(&Tensor::randn(v.shape(), &mut rng).scale(0.5)).unwrap();
        let a = run(&ps, &block, &x, &t, &v);
        let b = run(&ps, &block, &x, &t, &v2);
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn missing_kernel_condition_is_rejected() {
        let (ps, block) = build(4, 4);
        let (x, t, _) = inputs(4, 4);
        let tape = Tape::new();
        let r = block.forward(&tape, &ps, tape.constant(x), tape.constant(t), None);
        assert!(r.is_err());
    }
}
