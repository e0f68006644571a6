//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records itself on a [`Tape`]. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns
//! the gradient of every node that depends on a parameter or a
//! gradient-tracked input.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Index of a tensor in a [`crate::nn::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        per_sample: bool,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Mish(Var),
    LeakyRelu(Var, f32),
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax {
        x: Var,
        tau: f32,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Mse(Var, Var),
    L1(Var, Var),
    Dot {
        x: Var,
        weights: Arc<Tensor>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter slot, summed over every use on the tape.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for &(pid, node) in &self.params {
            let Some(g) = &self.grads[node] else { continue };
            match &mut out[pid.0] {
                Some(acc) => acc.axpy(1.0, g).expect("param grads share a shape"),
                slot => *slot = Some(g.clone()),
            }
        }
        out
    }
}

/// `x · tanh(softplus(x))`, evaluated in double precision.
pub fn mish(x: f32) -> f32 {
    let x = x as f64;
    (x * softplus(x).tanh()) as f32
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn mish_grad(x: f32) -> f32 {
    let x = x as f64;
    let t = softplus(x).tanh();
    let sig = 1.0 / (1.0 + (-x).exp());
    (t + x * (1.0 - t * t) * sig) as f32
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&self, id: ParamId, value: &Arc<Tensor>) -> Var {
        self.push_shared(value.clone(), Op::Param(id), true)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(&self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), self.tracks(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(&self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), self.tracks(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.tracks(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: f32) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), self.tracks(&[a]))
    }

    /// `x[b, c, ..] + bias[c]` or `x[b, c, ..] + bias[b, c]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (batch, ch, inner) = bias_layout(xv.shape(), bv.shape())?;
        let per_sample = bv.rank() == 2;
        let mut out = (*xv).clone();
        let data = out.data_mut();
        for b in 0..batch {
            for c in 0..ch {
                let add = bv.data()[if per_sample { b * ch + c } else { c }];
                let base = (b * ch + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += add);
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }, self.tracks(&[x, bias])))
    }

    /// 2-D cross-correlation. `w` is `(cout, cin, kh, kw)` shared across the
    /// batch; `b` is `(cout)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv_impl(x, w, b, geom, false)
    }

    /// Convolution with a distinct kernel per batch item: `w` is
    /// `(batch, cout, cin, kh, kw)` and `b` is `(batch, cout)`.
    pub fn conv2d_per_sample(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        self.conv_impl(x, w, b, geom, true)
    }

    fn conv_impl(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        per_sample: bool,
    ) -> Result<Var> {
        let bv = b.map(|b| self.value(b));
        let y = conv_forward(&self.value(x), &self.value(w), bv.as_deref(), geom, per_sample)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.tracks(&deps);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                geom,
                per_sample,
            },
            rg,
        ))
    }

    /// Transposed convolution; `w` is `(cin, cout, kh, kw)`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let bv = b.map(|b| self.value(b));
        let y = conv_transpose_forward(&self.value(x), &self.value(w), bv.as_deref(), geom)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.tracks(&deps);
        Ok(self.push(y, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    /// `x · wᵀ + b` with `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, fin) = xv.dims2()?;
        let (fout, win) = wv.dims2()?;
        if fin != win {
            return Err(shape_err!("linear input {fin} vs weight {:?}", wv.shape()));
        }
        let mut y = Tensor::zeros(&[n, fout]);
        gemm(n, fin, fout, xv.data(), (fin, 1), wv.data(), (1, fin), y.data_mut(), 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fout] {
                return Err(shape_err!("linear bias {:?} for {fout} outputs", bv.shape()));
            }
            for row in y.data_mut().chunks_mut(fout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.tracks(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let mut y = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), y.data_mut(), 0.0);
        Ok(self.push(y, Op::MatMul(a, b), self.tracks(&[a, b])))
    }

    pub fn mish(&self, x: Var) -> Var {
        let v = self.value(x).map(mish);
        self.push(v, Op::Mish(x), self.tracks(&[x]))
    }

    pub fn leaky_relu(&self, x: Var, slope: f32) -> Var {
        let v = self.value(x).map(|a| if a >= 0.0 { a } else { a * slope });
        self.push(v, Op::LeakyRelu(x, slope), self.tracks(&[x]))
    }

    /// Concatenate along axis 1.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(shape_err!("concat needs rank >= 2, got {first:?}"));
        }
        let batch = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(shape_err!("concat {first:?} with {s:?}"));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for v in &values {
                let per = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), self.tracks(parts)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), self.tracks(&[x])))
    }

    /// Row-wise `softmax(x / tau)` of a rank-2 tensor.
    pub fn softmax(&self, x: Var, tau: f32) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(invalid!("softmax temperature must be positive, got {tau}"));
        }
        let xv = self.value(x);
        let (_, k) = xv.dims2()?;
        let mut y = (*xv).clone();
        for row in y.data_mut().chunks_mut(k) {
            softmax_row(row, tau);
        }
        Ok(self.push(y, Op::Softmax { x, tau }, self.tracks(&[x])))
    }

    /// `(b, c·r², h, w) -> (b, c, h·r, w·r)`.
    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape_err!("pixel shuffle by {r} of {c} channels"));
        }
        let co = c / (r * r);
        let mut y = Tensor::zeros(&[b, co, h * r, w * r]);
        let src = xv.data();
        let dst = y.data_mut();
        for_each_shuffle(b, co, h, w, r, |si, di| dst[di] = src[si]);
        Ok(self.push(y, Op::PixelShuffle { x, r }, self.tracks(&[x])))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.ensure_same_shape(&bv)?;
        let n = av.numel().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        Ok(self.push(
            Tensor::scalar((s / n) as f32),
            Op::Mse(a, b),
            self.tracks(&[a, b]),
        ))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        av.ensure_same_shape(&bv)?;
        let n = av.numel().max(1) as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar((s / n) as f32),
            Op::L1(a, b),
            self.tracks(&[a, b]),
        ))
    }

    /// `Σ weights ⊙ x`, a scalar.
    pub fn dot(&self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.ensure_same_shape(&weights)?;
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::Dot {
                x,
                weights: Arc::new(weights),
            },
            self.tracks(&[x]),
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        let mut params = Vec::new();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if let Op::Param(pid) = node.op {
                params.push((pid, id));
                continue;
            }
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, t: Tensor| accumulate(&mut grads, v, t);

            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!("leaves are skipped above"),
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddBias { x, bias } => {
                    if needs(*bias) {
                        let bshape = val(*bias).shape().to_vec();
                        let (batch, ch, inner) = bias_layout(g.shape(), &bshape)?;
                        let mut gb = Tensor::zeros(&bshape);
                        let per_sample = bshape.len() == 2;
                        for b in 0..batch {
                            for c in 0..ch {
                                let base = (b * ch + c) * inner;
                                let s: f32 = g.data()[base..base + inner].iter().sum();
                                gb.data_mut()[if per_sample { b * ch + c } else { c }] += s;
                            }
                        }
                        acc(*bias, gb);
                    }
                    if needs(*x) {
                        acc(*x, g.clone());
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    per_sample,
                } => {
                    let (dx, dw, db) = conv_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *geom,
                        *per_sample,
                        needs(*x),
                        needs(*w),
                        (*b).is_some_and(needs),
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db);
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let (dx, dw, db) = conv_transpose_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *geom,
                        needs(*x),
                        needs(*w),
                        (*b).is_some_and(needs),
                    )?;
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, fin) = xv.dims2()?;
                    let fout = wv.shape()[0];
                    if needs(*x) {
                        let mut dx = Tensor::zeros(&[n, fin]);
                        gemm(n, fout, fin, g.data(), (fout, 1), wv.data(), (fin, 1), dx.data_mut(), 0.0);
                        acc(*x, dx);
                    }
                    if needs(*w) {
                        let mut dw = Tensor::zeros(&[fout, fin]);
                        gemm(fout, n, fin, g.data(), (1, fout), xv.data(), (fin, 1), dw.data_mut(), 0.0);
                        acc(*w, dw);
                    }
                    if let Some(b) = (*b).filter(|&b| needs(b)) {
                        let mut db = Tensor::zeros(&[fout]);
                        for row in g.data().chunks(fout) {
                            db.data_mut().iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        acc(b, db);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = av.dims2()?;
                    let n = bv.shape()[1];
                    if needs(*a) {
                        let mut da = Tensor::zeros(&[m, k]);
                        gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), da.data_mut(), 0.0);
                        acc(*a, da);
                    }
                    if needs(*b) {
                        let mut db = Tensor::zeros(&[k, n]);
                        gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), db.data_mut(), 0.0);
                        acc(*b, db);
                    }
                }
                Op::Mish(x) => acc(*x, g.zip_map(val(*x), |gg, xx| gg * mish_grad(xx))?),
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    acc(
                        *x,
                        g.zip_map(val(*x), |gg, xx| if xx >= 0.0 { gg } else { gg * s })?,
                    )
                }
                Op::Concat(parts) => {
                    let shape = g.shape().to_vec();
                    let batch = shape[0];
                    let total = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let pshape = val(p).shape().to_vec();
                        let c = pshape[1];
                        if needs(p) {
                            let mut gp = Vec::with_capacity(batch * c * inner);
                            for b in 0..batch {
                                let start = (b * total + offset) * inner;
                                gp.extend_from_slice(&g.data()[start..start + c * inner]);
                            }
                            acc(p, Tensor::from_vec(&pshape, gp)?);
                        }
                        offset += c;
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, g.clone().reshape(&shape)?);
                }
                Op::Softmax { x, tau } => {
                    let y = &node.value;
                    let k = y.shape()[1];
                    let mut dx = Tensor::zeros(y.shape());
                    for ((dr, yr), gr) in dx
                        .data_mut()
                        .chunks_mut(k)
                        .zip(y.data().chunks(k))
                        .zip(g.data().chunks(k))
                    {
                        let dotp: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..k {
                            dr[i] = yr[i] * (gr[i] - dotp) / tau;
                        }
                    }
                    acc(*x, dx);
                }
                Op::PixelShuffle { x, r } => {
                    let xv = val(*x);
                    let (b, c, h, w) = xv.dims4()?;
                    let mut dx = Tensor::zeros(xv.shape());
                    let src = g.data();
                    let dst = dx.data_mut();
                    for_each_shuffle(b, c / (r * r), h, w, *r, |si, di| dst[si] = src[di]);
                    acc(*x, dx);
                }
                Op::Mse(a, b) => {
                    let av = val(*a);
                    let scale = 2.0 * g.data()[0] / av.numel().max(1) as f32;
                    let d = av.zip_map(val(*b), |x, y| (x - y) * scale)?;
                    if needs(*b) {
                        acc(*b, d.scale(-1.0));
                    }
                    if needs(*a) {
                        acc(*a, d);
                    }
                }
                Op::L1(a, b) => {
                    let av = val(*a);
                    let scale = g.data()[0] / av.numel().max(1) as f32;
                    let d = av.zip_map(val(*b), |x, y| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            0.0
                        }
                    })?;
                    if needs(*b) {
                        acc(*b, d.scale(-1.0));
                    }
                    if needs(*a) {
                        acc(*a, d);
                    }
                }
                Op::Dot { x, weights } => acc(*x, weights.scale(g.data()[0])),
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &t).expect("gradient shapes agree"),
        slot => *slot = Some(t),
    }
}

fn bias_layout(x: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    if x.len() < 2 {
        return Err(shape_err!("bias target needs rank >= 2, got {x:?}"));
    }
    let (batch, ch) = (x[0], x[1]);
    let ok = match bias {
        [c] => *c == ch,
        [b, c] => *b == batch && *c == ch,
        _ => false,
    };
    if !ok {
        return Err(shape_err!("bias {bias:?} does not broadcast onto {x:?}"));
    }
    Ok((batch, ch, x[2..].iter().product()))
}

fn softmax_row(row: &mut [f32], tau: f32) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Calls `f(src_index, dst_index)` for every element moved by a pixel shuffle.
fn for_each_shuffle(
    b: usize,
    co: usize,
    h: usize,
    w: usize,
    r: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (ho, wo) = (h * r, w * r);
    for bi in 0..b {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ci = c * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let si = ((bi * co * r * r + ci) * h + y) * w + x;
                            let di = ((bi * co + c) * ho + y * r + i) * wo + x * r + j;
                            f(si, di);
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeom,
    per_sample: bool,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, wd) = x.dims4()?;
    let ws = w.shape();
    let (cout, wcin, kh, kw) = match (per_sample, ws) {
        (false, &[co, ci, kh, kw]) => (co, ci, kh, kw),
        (true, &[wb, co, ci, kh, kw]) if wb == b => (co, ci, kh, kw),
        _ => return Err(shape_err!("conv weight {ws:?} for input {:?}", x.shape())),
    };
    if wcin != cin || kh != geom.kh || kw != geom.kw {
        return Err(shape_err!(
            "conv weight {ws:?} vs input channels {cin} / geometry {geom:?}"
        ));
    }
    let (ho, wo) = geom
        .out_dims(h, wd)
        .ok_or_else(|| shape_err!("conv window {geom:?} larger than padded {h}x{wd}"))?;
    Ok((b, cin, h, wd, cout, ho, wo))
}

fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
    per_sample: bool,
) -> Result<Tensor> {
    let (b, cin, h, wd, cout, ho, wo) = conv_dims(x, w, geom, per_sample)?;
    if let Some(bias) = bias {
        let expect: &[usize] = if per_sample { &[b, cout] } else { &[cout] };
        if bias.shape() != expect {
            return Err(shape_err!("conv bias {:?}, expected {expect:?}", bias.shape()));
        }
    }
    let rows = cin * geom.kh * geom.kw;
    let plane = ho * wo;
    let mut y = Tensor::zeros(&[b, cout, ho, wo]);
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    let wsz = cout * rows;
    for bi in 0..b {
        let xb = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let cols: &[f32] = if geom.is_pointwise() {
            xb
        } else {
            im2col(xb, (cin, h, wd), geom, (ho, wo), &mut col);
            &col
        };
        let wb = if per_sample {
            &w.data()[bi * wsz..(bi + 1) * wsz]
        } else {
            w.data()
        };
        let yb = &mut y.data_mut()[bi * cout * plane..(bi + 1) * cout * plane];
        gemm(cout, rows, plane, wb, (rows, 1), cols, (plane, 1), yb, 0.0);
        if let Some(bias) = bias {
            let bb = if per_sample {
                &bias.data()[bi * cout..(bi + 1) * cout]
            } else {
                bias.data()
            };
            for (c, out) in yb.chunks_mut(plane).enumerate() {
                out.iter_mut().for_each(|v| *v += bb[c]);
            }
        }
    }
    Ok(y)
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    per_sample: bool,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads> {
    let (b, cin, h, wd, cout, ho, wo) = conv_dims(x, w, geom, per_sample)?;
    let rows = cin * geom.kh * geom.kw;
    let plane = ho * wo;
    let wsz = cout * rows;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| {
        if per_sample {
            Tensor::zeros(&[b, cout])
        } else {
            Tensor::zeros(&[cout])
        }
    });
    let pointwise = geom.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcol = if pointwise || !need_dx {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    for bi in 0..b {
        let dyb = &dy.data()[bi * cout * plane..(bi + 1) * cout * plane];
        let xoff = bi * cin * h * wd..(bi + 1) * cin * h * wd;
        let woff = if per_sample { bi * wsz..(bi + 1) * wsz } else { 0..wsz };
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[xoff.clone()];
            let cols: &[f32] = if pointwise {
                xb
            } else {
                im2col(xb, (cin, h, wd), geom, (ho, wo), &mut col);
                &col
            };
            // per-sample kernels get their own slot; shared kernels accumulate
            gemm(cout, plane, rows, dyb, (plane, 1), cols, (1, plane), &mut dw.data_mut()[woff.clone()], 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let wb = &w.data()[woff];
            let dxb = &mut dx.data_mut()[xoff];
            if pointwise {
                gemm(rows, cout, plane, wb, (1, rows), dyb, (plane, 1), dxb, 0.0);
            } else {
                gemm(rows, cout, plane, wb, (1, rows), dyb, (plane, 1), &mut dcol, 0.0);
                col2im(&dcol, (cin, h, wd), geom, (ho, wo), dxb);
            }
        }
        if let Some(db) = db.as_mut() {
            let base = if per_sample { bi * cout } else { 0 };
            for (c, g) in dyb.chunks(plane).enumerate() {
                db.data_mut()[base + c] += g.iter().sum::<f32>();
            }
        }
    }
    Ok((dx, dw, db))
}

fn conv_transpose_dims(
    x: &Tensor,
    w: &Tensor,
    geom: ConvGeom,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4()?;
    if wcin != cin || kh != geom.kh || kw != geom.kw {
        return Err(shape_err!(
            "transposed conv weight {:?} vs input {:?}",
            w.shape(),
            x.shape()
        ));
    }
    let (ho, wo) = geom
        .transposed_out_dims(h, wd)
        .ok_or_else(|| shape_err!("transposed conv {geom:?} on {h}x{wd}"))?;
    Ok((b, cin, h, wd, cout, ho, wo))
}

fn conv_transpose_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<Tensor> {
    let (b, cin, h, wd, cout, ho, wo) = conv_transpose_dims(x, w, geom)?;
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(shape_err!("transposed conv bias {:?}", bias.shape()));
        }
    }
    let rows = cout * geom.kh * geom.kw;
    let plane = h * wd;
    let mut col = vec![0.0; rows * plane];
    let mut y = Tensor::zeros(&[b, cout, ho, wo]);
    for bi in 0..b {
        let xb = &x.data()[bi * cin * plane..(bi + 1) * cin * plane];
        gemm(rows, cin, plane, w.data(), (1, rows), xb, (plane, 1), &mut col, 0.0);
        let yb = &mut y.data_mut()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        col2im(&col, (cout, ho, wo), geom, (h, wd), yb);
        if let Some(bias) = bias {
            for (c, out) in yb.chunks_mut(ho * wo).enumerate() {
                out.iter_mut().for_each(|v| *v += bias.data()[c]);
            }
        }
    }
    Ok(y)
}

fn conv_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads> {
    let (b, cin, h, wd, cout, ho, wo) = conv_transpose_dims(x, w, geom)?;
    let rows = cout * geom.kh * geom.kw;
    let plane = h * wd;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[cout]));
    let mut dcol = vec![0.0; rows * plane];
    for bi in 0..b {
        let dyb = &dy.data()[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
        if need_dx || need_dw {
            im2col(dyb, (cout, ho, wo), geom, (h, wd), &mut dcol);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * plane..(bi + 1) * cin * plane];
            gemm(cin, rows, plane, w.data(), (rows, 1), &dcol, (plane, 1), dxb, 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[bi * cin * plane..(bi + 1) * cin * plane];
            gemm(cin, plane, rows, xb, (plane, 1), &dcol, (1, plane), dw.data_mut(), 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (c, g) in dyb.chunks(ho * wo).enumerate() {
                db.data_mut()[c] += g.iter().sum::<f32>();
            }
        }
    }
    Ok((dx, dw, db))
}
