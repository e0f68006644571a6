use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::bundle::ModelBundle;
use crate::degradation::bicubic_resize;
use crate::diffusion::{reverse_step, DiffusionSchedule};
use crate::error::{shape_err, Error, Result};
use crate::image::{Image, ValueRange};
use crate::kernelgen::Kernel;
use crate::nn::{ImageUnet, KernelUnet};
use crate::tensor::Tensor;

/// Per-item standard-normal draws, so a sample's noise does not depend on
/// what else shares its batch.
fn randn_per_item(item_shape: &[usize], rngs: &mut [ChaCha8Rng]) -> Result<Tensor> {
    let items: Vec<Tensor> = rngs.iter_mut().map(|r| Tensor::randn(item_shape, r)).collect();
    let refs: Vec<&Tensor> = items.iter().collect();
    Tensor::cat_batch(&refs)
}

fn run_chain(
    sched: &DiffusionSchedule,
    item_shape: &[usize],
    rngs: &mut [ChaCha8Rng],
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    if rngs.is_empty() {
        return Err(shape_err!("reverse chain needs at least one sample"));
    }
    let mut x = randn_per_item(item_shape, rngs)?;
    for t in (1..=sched.timesteps()).rev() {
        let eps_hat = predict(&x, t)?;
        let z = if t > 1 {
            randn_per_item(item_shape, rngs)?
        } else {
            Tensor::zeros(x.shape())
        };
        x = reverse_step(&x, &eps_hat, t, &z, sched)?;
    }
    if !x.all_finite() {
        return Err(Error::Numerical("reverse chain produced non-finite values".into()));
    }
    Ok(x)
}

/// Full reverse kernel chain for a batch. `u_k` is the LR encoding resized to
/// `(b, C, k, k)`; one rng per item. Returns `x_0` of shape `(b, 1, k, k)` in
/// the scaled kernel domain.
pub fn sample_kernel_chain(
    net: &KernelUnet,
    sched: &DiffusionSchedule,
    u_k: &Tensor,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    let b = u_k.shape()[0];
    if rngs.len() != b {
        return Err(shape_err!("{} rngs for a batch of {b}", rngs.len()));
    }
    let k = net.kernel_size;
    run_chain(sched, &[1, 1, k, k], rngs, |x, t| {
        let tape = Tape::new();
        let out = net.forward(&tape, tape.constant(x.clone()), tape.constant(u_k.clone()), &vec![t; b])?;
        Ok((*tape.value(out)).clone())
    })
}

/// Full reverse residual chain for a batch: `u_up` is `(b, C, H, W)`, `v` is
/// `(b, k²)`. Returns the residual `x_0` of shape `(b, 3, H, W)`.
pub fn sample_image_chain(
    net: &ImageUnet,
    sched: &DiffusionSchedule,
    u_up: &Tensor,
    v: &Tensor,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    let (b, _, h, w) = u_up.dims4()?;
    if rngs.len() != b {
        return Err(shape_err!("{} rngs for a batch of {b}", rngs.len()));
    }
    run_chain(sched, &[1, 3, h, w], rngs, |x, t| {
        let tape = Tape::new();
        let out = net.forward(
            &tape,
            tape.constant(x.clone()),
            tape.constant(u_up.clone()),
            tape.constant(v.clone()),
            &vec![t; b],
        )?;
        Ok((*tape.value(out)).clone())
    })
}

#[derive(Clone, Debug)]
pub struct KernelPrediction {
    /// Raw chain output in the scaled domain, length `k²`; the reconstructor's condition.
    pub v: Tensor,
    /// `v / kernel_scale` as a kernel, unprojected.
    pub raw: Kernel,
    /// Negatives clamped, renormalized to sum 1.
    pub projected: Kernel,
}

#[derive(Clone, Debug)]
pub struct SrOutput {
    /// `up(x_LR) + x_0`, clamped to `[-1, 1]`.
    pub sr: Image,
    /// Chain output `x_0` before the sum and clamp, `(1, 3, H, W)`.
    pub residual: Tensor,
    /// Bicubic upsampling of the LR input in `[-1, 1]`.
    pub upsampled: Image,
    pub kernel: KernelPrediction,
}

/// LR side lengths accepted by a bundle: `h·s` must be a multiple of the
/// reconstructor's size multiple.
pub fn lr_size_multiple(bundle: &ModelBundle) -> usize {
    let m = bundle.image_net.size_multiple();
    let s = bundle.config.scale;
    m / gcd(m, s)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn check_lr_size(lr: &Image, bundle: &ModelBundle) -> Result<()> {
    let q = lr_size_multiple(bundle);
    let (h, w) = (lr.height(), lr.width());
    if h % q == 0 && w % q == 0 {
        return Ok(());
    }
    let near = |n: usize| {
        let lo = (n / q) * q;
        if lo == 0 {
            format!("{q}")
        } else {
            format!("{lo} or {}", lo + q)
        }
    };
    Err(shape_err!(
        "LR image is {h}×{w}; with scale {} both sides must be multiples of {q} \
         (nearest admissible height {}, width {})",
        bundle.config.scale,
        near(h),
        near(w)
    ))
}

fn require_trained(bundle: &ModelBundle) -> Result<()> {
    if !bundle.trained {
        return Err(Error::Usage(
            "model bundle is untrained; run the encoder, kernel and recon training phases first".into(),
        ));
    }
    Ok(())
}

fn lr_tensor(lr: &Image) -> Result<Tensor> {
    if lr.channels() != 3 {
        return Err(shape_err!("LR image must have 3 channels, got {}", lr.channels()));
    }
    Ok(lr.to_range(ValueRange::Signed).to_tensor())
}

fn kernel_from_state(v: &Tensor, bundle: &ModelBundle) -> Result<KernelPrediction> {
    let k = bundle.config.kernel_size;
    let scale = bundle.config.kernel_scale as f64;
    let raw = Kernel::from_values(k, v.data().iter().map(|&x| x as f64 / scale).collect())?;
    Ok(KernelPrediction {
        v: v.clone().reshape(&[1, k * k])?,
        projected: raw.project(),
        raw,
    })
}

fn kernel_from_encoding(u: &Tensor, bundle: &ModelBundle, rng: &mut ChaCha8Rng) -> Result<KernelPrediction> {
    let k = bundle.config.kernel_size;
    let u_k = u.resize_bilinear(k, k)?;
    let v = sample_kernel_chain(&bundle.kernel_net, &bundle.schedule, &u_k, std::slice::from_mut(rng))?;
    kernel_from_state(&v, bundle)
}

/// Estimate the blur kernel of `lr` with the kernel chain.
pub fn predict_kernel(lr: &Image, bundle: &ModelBundle, rng: &mut ChaCha8Rng) -> Result<KernelPrediction> {
    require_trained(bundle)?;
    let u = bundle.encoder.encode(&lr_tensor(lr)?)?;
    kernel_from_encoding(&u, bundle, rng)
}

/// Kernel chain, then residual chain, then `up(x_LR) + x_0`. Both chains draw
/// from `rng` in that order.
pub fn super_resolve(lr: &Image, bundle: &ModelBundle, rng: &mut ChaCha8Rng) -> Result<SrOutput> {
    require_trained(bundle)?;
    check_lr_size(lr, bundle)?;
    let s = bundle.config.scale;
    let lr_t = lr_tensor(lr)?;
    let u = bundle.encoder.encode(&lr_t)?;
    let kernel = kernel_from_encoding(&u, bundle, rng)?;
    let (h, w) = (lr.height() * s, lr.width() * s);
    let u_up = u.resize_bilinear(h, w)?;
    let residual = sample_image_chain(&bundle.image_net, &bundle.schedule, &u_up, &kernel.v, std::slice::from_mut(rng))?;
    let upsampled = bicubic_resize(&lr.to_range(ValueRange::Signed), s, 1)?;
    let sum = upsampled.to_tensor().add(&residual)?;
    let sr = Image::from_tensor(&sum.map(|x| x.clamp(-1.0, 1.0)), ValueRange::Signed)?;
    Ok(SrOutput {
        sr,
        residual,
        upsampled,
        kernel,
    })
}
