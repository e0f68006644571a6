//! Finite-difference scenarios for the trainable layers.

use dualdiff::gradcheck::{GradCheck, Probe, Reduction};
use dualdiff::nn::{DynamicConv2d, ImageNetConfig, ImageUnet, Init, KernelNetConfig, KernelUnet, ParamStore};
use dualdiff::{ConvGeom, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-3;

fn unit_norm(t: Tensor) -> Tensor {
    let n = t.sq_norm().sqrt() as f32;
    t.scale(1.0 / n)
}

/// Replace the zero-initialized output projection so gradients reach every layer.
fn randomize_output(ps: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for name in ["out_proj.weight", "out_proj.bias"] {
        let id = ps.find(name).unwrap();
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&shape, rng).scale(0.3);
    }
}

pub fn dynamic_convolution() -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamStore::new();
    let conv = DynamicConv2d::new(
        &mut Init::new(&mut ps, &mut rng),
        "dyn",
        2,
        3,
        ConvGeom::new(3, 1, 1),
        5,
        4,
        6,
        1.0,
    )
    .unwrap();
    let x = unit_norm(Tensor::randn(&[2, 2, 5, 5], &mut rng));
    let cond = unit_norm(Tensor::randn(&[2, 5], &mut rng));
    let check = GradCheck { step: 1e-3, ..GradCheck::default() };
    check
        .run(&ps, |tape, ps| conv.forward(tape, ps, tape.constant(x.clone()), tape.constant(cond.clone())))
        .unwrap()
}

pub fn tiny_kernel_predictor() -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = KernelNetConfig { width: 2, mults: vec![1, 1], temb_dim: 4 };
    let mut net = KernelUnet::new(&cfg, 8, 2, &mut rng).unwrap();
    randomize_output(&mut net.params, &mut rng);
    let x_t = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let u = Tensor::randn(&[2, 2, 8, 8], &mut rng);
    let eps = Tensor::randn(&[2, 1, 8, 8], &mut rng);
    let check = GradCheck { reduction: Reduction::Mean, ..GradCheck::default() };
    check
        .run(&net.params, |tape, ps| {
            let y = net.forward_with(tape, ps, tape.constant(x_t.clone()), tape.constant(u.clone()), &[3, 70])?;
            let d = tape.sub(y, tape.constant(eps.clone()))?;
            tape.mul(d, d)
        })
        .unwrap()
}

pub fn tiny_image_predictor() -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ImageNetConfig {
        width: 2,
        mults: vec![1, 1, 1],
        temb_dim: 4,
        kernel_proj_dim: 4,
        candidates: 2,
        attn_hidden: 4,
        temperature: 1.0,
    };
    let mut net = ImageUnet::new(&cfg, 16, 2, &mut rng).unwrap();
    randomize_output(&mut net.params, &mut rng);
    let x_t = Tensor::randn(&[2, 3, 8, 8], &mut rng);
    let u = Tensor::randn(&[2, 2, 8, 8], &mut rng);
    let v = Tensor::randn(&[2, 16], &mut rng).scale(0.1);
    let eps = Tensor::randn(&[2, 3, 8, 8], &mut rng);
    let check = GradCheck { reduction: Reduction::Mean, ..GradCheck::default() };
    check
        .run(&net.params, |tape, ps| {
            let y = net.forward_with(
                tape,
                ps,
                tape.constant(x_t.clone()),
                tape.constant(u.clone()),
                tape.constant(v.clone()),
                &[1, 55],
            )?;
            let d = tape.sub(y, tape.constant(eps.clone()))?;
            tape.mul(d, d)
        })
        .unwrap()
}
