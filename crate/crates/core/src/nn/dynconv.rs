use crate::autograd::{ParamId, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::kernels::ConvGeom;

use super::{fan_in_bound, Init, Linear, ParamStore};

/// Convolution whose kernel is an attention-weighted mixture of `K`
/// candidate kernels. The attention comes from a small MLP over a
/// per-sample conditioning vector, so every batch item gets its own
/// effective kernel and bias.
#[derive(Clone, Debug)]
pub struct DynamicConv2d {
    /// `(K, cout·cin·kh·kw)`, one flattened candidate per row.
    pub kernels: ParamId,
    /// `(K, cout)`
    pub biases: ParamId,
    pub attn_hidden: Linear,
    pub attn_out: Linear,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub candidates: usize,
    pub temperature: f32,
}

impl DynamicConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        cond_dim: usize,
        candidates: usize,
        hidden: usize,
        temperature: f32,
    ) -> Result<Self> {
        if candidates == 0 {
            return Err(invalid!("dynamic convolution needs at least one candidate kernel"));
        }
        if !(temperature > 0.0) {
            return Err(invalid!("attention temperature must be positive"));
        }
        let fan_in = cin * geom.kh * geom.kw;
        let bound = fan_in_bound(fan_in);
        let kernels = init.uniform(
            format!("{name}.kernels"),
            &[candidates, cout * fan_in],
            bound,
        );
        let biases = init.uniform(format!("{name}.biases"), &[candidates, cout], bound);
        let attn_hidden = Linear::new(init, &format!("{name}.attn.0"), cond_dim, hidden);
        let attn_out = Linear::new(init, &format!("{name}.attn.1"), hidden, candidates);
        Ok(Self {
            kernels,
            biases,
            attn_hidden,
            attn_out,
            geom,
            in_channels: cin,
            out_channels: cout,
            candidates,
            temperature,
        })
    }

    /// Attention weights over the candidates, shape `(batch, K)`.
    pub fn attention(&self, tape: &Tape, ps: &ParamStore, cond: Var) -> Result<Var> {
        let h = self.attn_hidden.forward(tape, ps, cond)?;
        let h = tape.mish(h);
        let logits = self.attn_out.forward(tape, ps, h)?;
        tape.softmax(logits, self.temperature)
    }

    pub fn forward(&self, tape: &Tape, ps: &ParamStore, x: Var, cond: Var) -> Result<Var> {
        let xs = tape.shape(x);
        let cs = tape.shape(cond);
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(shape_err!(
                "dynamic conv expects {} input channels, got {xs:?}",
                self.in_channels
            ));
        }
        if cs.len() != 2 || cs[0] != xs[0] {
            return Err(shape_err!("condition {cs:?} for batch {}", xs[0]));
        }
        let batch = xs[0];
        let attn = self.attention(tape, ps, cond)?;
        let w = tape.matmul(attn, ps.var(tape, self.kernels))?;
        let w = tape.reshape(
            w,
            &[
                batch,
                self.out_channels,
                self.in_channels,
                self.geom.kh,
                self.geom.kw,
            ],
        )?;
        let b = tape.matmul(attn, ps.var(tape, self.biases))?;
        tape.conv2d_per_sample(x, w, Some(b), self.geom)
    }
}
