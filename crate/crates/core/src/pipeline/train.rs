use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::bundle::{init_encoder, init_image_net, init_kernel_net, save_checkpoint, Phase};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{to_network, Sample};
use crate::degradation::bicubic_resize;
use crate::diffusion::{noise_loss, q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::image::ValueRange;
use crate::nn::{ImageUnet, Init, KernelUnet, ParamStore, RrdbEncoder, SrHead};
use crate::optim::Adam;
use crate::rng::stream;
use crate::tensor::Tensor;

use super::infer::sample_kernel_chain;
use super::log::{LogLine, TrainLog};

/// Training samples as network tensors: images in `[-1, 1]`, kernels
/// multiplied by `kernel_scale`. All tensors carry a leading batch axis of 1.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub names: Vec<String>,
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
    /// Bicubic upsampling of `lr` to HR size.
    pub up: Vec<Tensor>,
    pub kernels: Vec<Tensor>,
}

impl TrainingData {
    pub fn from_samples(samples: &[Sample], config: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let s = config.scale;
        let k = config.kernel_size;
        let mult = config.hr_multiple();
        let mut data = TrainingData {
            names: Vec::new(),
            lr: Vec::new(),
            hr: Vec::new(),
            up: Vec::new(),
            kernels: Vec::new(),
        };
        for smp in samples {
            let (h, w) = (smp.hr.height(), smp.hr.width());
            if smp.lr.height() * s != h || smp.lr.width() * s != w {
                return Err(Error::Data(format!(
                    "{}: LR {}×{} times scale {s} is not HR {h}×{w}",
                    smp.name,
                    smp.lr.height(),
                    smp.lr.width()
                )));
            }
            if h % mult != 0 || w % mult != 0 {
                return Err(Error::Data(format!(
                    "{}: HR {h}×{w} is not a multiple of {mult}",
                    smp.name
                )));
            }
            if smp.kernel.size() != k {
                return Err(Error::Data(format!(
                    "{}: kernel is {n}×{n}, model expects {k}×{k}",
                    smp.name,
                    n = smp.kernel.size()
                )));
            }
            let lr = smp.lr.to_range(ValueRange::Signed);
            data.up.push(bicubic_resize(&lr, s, 1)?.to_tensor());
            data.lr.push(lr.to_tensor());
            data.hr.push(to_network(&smp.hr));
            let ker = smp.kernel.values().iter().map(|&v| v as f32 * config.kernel_scale).collect();
            data.kernels.push(Tensor::from_vec(&[1, 1, k, k], ker)?);
            data.names.push(smp.name.clone());
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// `x_HR − up(x_LR)` for sample `i`.
    pub fn residual(&self, i: usize) -> Result<Tensor> {
        self.hr[i].sub(&self.up[i])
    }
}

/// One diffusion training step, exposed for inspection.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
    pub eps_hat: Tensor,
    /// `noise_loss(eps_hat, eps)`; also the value written to the log.
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub stopped_on_plateau: bool,
    pub wall_time: f64,
    pub v_cache_hits: usize,
    pub v_cache_misses: usize,
}

impl TrainReport {
    /// Mean loss over the first or last `frac` of the steps.
    pub fn window_mean(&self, frac: f64, tail: bool) -> f64 {
        let n = ((self.losses.len() as f64 * frac).ceil() as usize).clamp(1, self.losses.len().max(1));
        let w = if tail {
            &self.losses[self.losses.len() - n..]
        } else {
            &self.losses[..n]
        };
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Optional outputs of a training phase.
#[derive(Default)]
pub struct PhaseIo<'a> {
    pub log: Option<&'a mut TrainLog>,
    /// Written at every checkpoint interval and at the end.
    pub checkpoint: Option<&'a Path>,
    pub observer: Option<&'a mut dyn FnMut(&StepRecord)>,
}

struct Runner<'a, 'b> {
    phase: Phase,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    max_steps: usize,
    io: PhaseIo<'b>,
    start: Instant,
    report: TrainReport,
    /// Checkpoints keep only this many leading parameters.
    saved_prefix: Option<usize>,
}

impl<'a, 'b> Runner<'a, 'b> {
    fn new(phase: Phase, model: &'a ModelConfig, train: &'a TrainConfig, io: PhaseIo<'b>) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let max_steps = match phase {
            Phase::Encoder => train.max_steps.encoder,
            Phase::Kernel => train.max_steps.kernel,
            Phase::Recon => train.max_steps.recon,
        };
        info!("{phase} phase: up to {max_steps} steps");
        Ok(Self {
            phase,
            model,
            train,
            max_steps,
            io,
            start: Instant::now(),
            report: TrainReport::default(),
            saved_prefix: None,
        })
    }

    fn observe(&mut self, record: &StepRecord) {
        if let Some(obs) = self.io.observer.as_mut() {
            obs(record);
        }
    }

    /// Book-keeping after a step; returns true when training should stop.
    fn after_step(&mut self, step: usize, loss: f64, params: &ParamStore) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "{} phase: loss became {loss} at step {step} (last finite loss {:?})",
                self.phase,
                self.report.losses.last()
            )));
        }
        self.report.losses.push(loss);
        self.report.steps = step;
        let elapsed = self.start.elapsed().as_secs_f64();
        if step % self.train.log_interval == 0 {
            debug!("{} step {step}: loss {loss:.6}", self.phase);
            if let Some(log) = self.io.log.as_mut() {
                log.record(LogLine {
                    step,
                    phase: self.phase,
                    loss,
                    wall_time: elapsed,
                })?;
            }
        }
        if self.train.checkpoint_interval > 0 && step % self.train.checkpoint_interval == 0 && step < self.max_steps {
            self.save(params, step)?;
        }
        let w = self.train.plateau_window;
        let n = self.report.losses.len();
        if w > 0 && n >= 2 * w && n % w == 0 {
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let prev = mean(&self.report.losses[n - 2 * w..n - w]);
            let last = mean(&self.report.losses[n - w..]);
            if (prev - last) / prev.abs().max(1e-12) < self.train.plateau_min_improvement {
                info!("{} phase: plateau at step {step}", self.phase);
                self.report.stopped_on_plateau = true;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn save(&self, params: &ParamStore, step: usize) -> Result<()> {
        let Some(path) = self.io.checkpoint else {
            return Ok(());
        };
        match self.saved_prefix {
            Some(n) if n < params.len() => {
                let mut kept = ParamStore::new();
                for (name, t) in params.named_tensors().into_iter().take(n) {
                    kept.push(name, t);
                }
                save_checkpoint(path, self.phase, self.model, &kept, step)
            }
            _ => save_checkpoint(path, self.phase, self.model, params, step),
        }
    }

    fn finish(mut self, params: &ParamStore) -> Result<TrainReport> {
        self.save(params, self.report.steps)?;
        self.report.wall_time = self.start.elapsed().as_secs_f64();
        info!(
            "{} phase: {} steps, final loss {:?}, {:.1}s",
            self.phase,
            self.report.steps,
            self.report.losses.last(),
            self.report.wall_time
        );
        Ok(self.report)
    }
}

fn derived_seed(seed: u64, purpose: &str) -> u64 {
    stream(seed, purpose, 0).random()
}

fn pick_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::cat_batch(&refs)
}

/// Noise a batch with one timestep per item.
fn noised_batch(
    x0: &Tensor,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let b = x0.shape()[0];
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.timesteps())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let mut items = Vec::with_capacity(b);
    for (i, &t) in ts.iter().enumerate() {
        items.push(q_sample(&x0.batch_item(i)?, t, &eps.batch_item(i)?, sched)?);
    }
    let refs: Vec<&Tensor> = items.iter().collect();
    Ok((Tensor::cat_batch(&refs)?, eps, ts))
}

pub(crate) fn encode_all(encoder: &RrdbEncoder, data: &TrainingData) -> Result<Vec<Tensor>> {
    data.lr.iter().map(|lr| encoder.encode(lr)).collect()
}

/// Pretrain the LR encoder through a throwaway pixel-shuffle head that
/// predicts the HR residual over bicubic upsampling, with an L1 loss.
pub fn pretrain_encoder(
    data: &TrainingData,
    model: &ModelConfig,
    train: &TrainConfig,
    io: PhaseIo,
) -> Result<(RrdbEncoder, TrainReport)> {
    let mut run = Runner::new(Phase::Encoder, model, train, io)?;
    let mut encoder = init_encoder(model, derived_seed(train.seed, "init-encoder"));
    let n_enc = encoder.params.len();
    run.saved_prefix = Some(n_enc);
    // Encoder parameters first, head parameters appended after them.
    let mut joint = encoder.params.clone();
    let head = SrHead::new(
        &mut Init::new(&mut joint, &mut stream(train.seed, "init-head", 0)),
        model.encoder.channels,
        model.scale,
    );
    let mut opt = Adam::new(&joint, train.encoder_learning_rate, train.grad_clip);
    let mut rng = stream(train.seed, "batches-encoder", 0);

    for step in 1..=run.max_steps {
        let idx = pick_batch(&mut rng, data.len(), train.batch_size);
        let tape = Tape::new();
        let u = encoder.forward_with(&tape, &joint, tape.constant(gather(&data.lr, &idx)?))?;
        let res = head.forward(&tape, &joint, u)?;
        let pred = tape.add(res, tape.constant(gather(&data.up, &idx)?))?;
        let loss_var = tape.l1(pred, tape.constant(gather(&data.hr, &idx)?))?;
        let grads = tape.backward(loss_var)?.param_grads(joint.len());
        let loss = tape.value(loss_var).data()[0] as f64;
        drop(tape);
        opt.step(&mut joint, &grads)?;
        if run.after_step(step, loss, &joint)? {
            break;
        }
    }
    let report = run.finish(&joint)?;
    let named = joint.named_tensors();
    encoder.params.load_named(&named[..n_enc])?;
    Ok((encoder, report))
}

/// Train the kernel-chain noise predictor with the encoder frozen.
pub fn train_kernel_predictor(
    data: &TrainingData,
    encoder: &RrdbEncoder,
    model: &ModelConfig,
    train: &TrainConfig,
    io: PhaseIo,
) -> Result<(KernelUnet, TrainReport)> {
    let mut run = Runner::new(Phase::Kernel, model, train, io)?;
    let sched = model.schedule.build()?;
    let k = model.kernel_size;
    let u_k: Vec<Tensor> = encode_all(encoder, data)?
        .iter()
        .map(|u| u.resize_bilinear(k, k))
        .collect::<Result<_>>()?;
    let mut net = init_kernel_net(model, derived_seed(train.seed, "init-kernel"))?;
    let mut opt = Adam::new(&net.params, train.learning_rate, train.grad_clip);
    let mut rng = stream(train.seed, "batches-kernel", 0);

    for step in 1..=run.max_steps {
        let idx = pick_batch(&mut rng, data.len(), train.batch_size);
        let x0 = gather(&data.kernels, &idx)?;
        let u = gather(&u_k, &idx)?;
        let (x_t, eps, ts) = noised_batch(&x0, &sched, &mut rng)?;
        let tape = Tape::new();
        let eps_hat = net.forward(&tape, tape.constant(x_t), tape.constant(u), &ts)?;
        let loss_var = tape.mse(eps_hat, tape.constant(eps.clone()))?;
        let grads = tape.backward(loss_var)?.param_grads(net.params.len());
        let eps_hat = (*tape.value(eps_hat)).clone();
        drop(tape);
        let loss = noise_loss(&eps_hat, &eps)?;
        opt.step(&mut net.params, &grads)?;
        run.observe(&StepRecord {
            phase: Phase::Kernel,
            step,
            timesteps: ts,
            eps,
            eps_hat,
            loss,
        });
        if run.after_step(step, loss, &net.params)? {
            break;
        }
    }
    let report = run.finish(&net.params)?;
    Ok((net, report))
}

/// Train the image-chain noise predictor with the encoder and kernel
/// predictor frozen. Each sample's kernel condition comes from one run of the
/// kernel chain with a per-sample seed and is cached, unless
/// `recompute_v_every_step` is set.
pub fn train_reconstructor(
    data: &TrainingData,
    encoder: &RrdbEncoder,
    kernel_net: &KernelUnet,
    model: &ModelConfig,
    train: &TrainConfig,
    io: PhaseIo,
) -> Result<(ImageUnet, TrainReport)> {
    let mut run = Runner::new(Phase::Recon, model, train, io)?;
    let sched = model.schedule.build()?;
    let k = model.kernel_size;
    let us = encode_all(encoder, data)?;
    let u_k: Vec<Tensor> = us.iter().map(|u| u.resize_bilinear(k, k)).collect::<Result<_>>()?;
    let u_up: Vec<Tensor> = us
        .iter()
        .zip(&data.hr)
        .map(|(u, hr)| u.resize_bilinear(hr.shape()[2], hr.shape()[3]))
        .collect::<Result<_>>()?;
    let residuals: Vec<Tensor> = (0..data.len()).map(|i| data.residual(i)).collect::<Result<_>>()?;
    let mut net = init_image_net(model, derived_seed(train.seed, "init-recon"))?;
    let mut opt = Adam::new(&net.params, train.learning_rate, train.grad_clip);
    let mut rng = stream(train.seed, "batches-recon", 0);
    let mut cache: Vec<Option<Tensor>> = vec![None; data.len()];

    for step in 1..=run.max_steps {
        let idx = pick_batch(&mut rng, data.len(), train.batch_size);
        let mut missing: Vec<usize> = idx.iter().copied().filter(|&i| cache[i].is_none() || train.recompute_v_every_step).collect();
        missing.sort_unstable();
        missing.dedup();
        run.report.v_cache_misses += missing.len();
        // A repeat of an index computed in this same step counts as a hit.
        run.report.v_cache_hits += idx.len() - missing.len();
        if !missing.is_empty() {
            let u = gather(&u_k, &missing)?;
            let mut rngs: Vec<ChaCha8Rng> = missing
                .iter()
                .map(|&i| {
                    if train.recompute_v_every_step {
                        stream(train.seed, "v-per-step", (step * data.len() + i) as u64)
                    } else {
                        stream(train.seed, "v", i as u64)
                    }
                })
                .collect();
            let v = sample_kernel_chain(kernel_net, &sched, &u, &mut rngs)?;
            for (j, &i) in missing.iter().enumerate() {
                cache[i] = Some(v.batch_item(j)?.reshape(&[1, model.kernel_len()])?);
            }
        }
        let v_batch: Vec<&Tensor> = idx.iter().map(|&i| cache[i].as_ref().expect("filled above")).collect();
        let v = Tensor::cat_batch(&v_batch)?;
        let x0 = gather(&residuals, &idx)?;
        let u = gather(&u_up, &idx)?;
        let (x_t, eps, ts) = noised_batch(&x0, &sched, &mut rng)?;
        let tape = Tape::new();
        let eps_hat = net.forward(&tape, tape.constant(x_t), tape.constant(u), tape.constant(v), &ts)?;
        let loss_var = tape.mse(eps_hat, tape.constant(eps.clone()))?;
        let grads = tape.backward(loss_var)?.param_grads(net.params.len());
        let eps_hat = (*tape.value(eps_hat)).clone();
        drop(tape);
        let loss = noise_loss(&eps_hat, &eps)?;
        opt.step(&mut net.params, &grads)?;
        run.observe(&StepRecord {
            phase: Phase::Recon,
            step,
            timesteps: ts,
            eps,
            eps_hat,
            loss,
        });
        if run.after_step(step, loss, &net.params)? {
            break;
        }
    }
    let report = run.finish(&net.params)?;
    Ok((net, report))
}
