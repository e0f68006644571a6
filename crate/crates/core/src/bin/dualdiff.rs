use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use dualdiff::batch::infer_paths;
use dualdiff::bundle::{ensure_same_config, load_encoder, load_kernel_net, ModelBundle, Phase};
use dualdiff::config::Config;
use dualdiff::dataset::{generate_dataset, manifest_root, DatasetManifest, DatasetOptions};
use dualdiff::kernelgen::{KernelParams, DEFAULT_KERNEL_SIZE};
use dualdiff::pipeline::{
    pretrain_encoder, train_kernel_predictor, train_reconstructor, PhaseIo, TrainLog, TrainReport, TrainingData,
    TRAIN_LOG_FILE,
};
use dualdiff::report::evaluate;
use dualdiff::synth::{write_corpus, SynthOptions};
use dualdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "dualdiff", version, about = "Blind ×s super-resolution with a kernel diffusion chain and a residual diffusion chain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Encoder,
    Kernel,
    Recon,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Encoder => Phase::Encoder,
            PhaseArg::Kernel => Phase::Kernel,
            PhaseArg::Recon => Phase::Recon,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Cut HR patches from a PNG corpus and synthesize blurred, downsampled LR pairs.
    GenData {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
        kernel_size: usize,
        /// Degrade every patch with one kernel, given as `LAMBDA1,LAMBDA2,THETA`.
        #[arg(long, value_parser = parse_kernel_params)]
        fixed_kernel: Option<KernelParams>,
    },
    /// Train one phase. Later phases need the checkpoints of earlier ones.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Dataset manifest written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, or a `.ckpt` file path.
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint (kernel and recon phases).
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Kernel-predictor checkpoint (recon phase).
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Super-resolve a PNG or a directory of PNGs.
    Infer {
        #[arg(long)]
        lr: PathBuf,
        /// Directory holding encoder.ckpt, kernel.ckpt and recon.ckpt.
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predictions against a dataset manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report path; the text table goes next to it as `.txt`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a procedural PNG corpus for smoke tests and demos.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_kernel_params(s: &str) -> std::result::Result<KernelParams, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [l1, l2, theta] => KernelParams::new(l1, l2, theta).map_err(|e| e.to_string()),
        _ => Err("expected LAMBDA1,LAMBDA2,THETA".into()),
    }
}

/// `(checkpoint file, log file)` for a `--out` that names a directory or a `.ckpt` file.
fn output_paths(out: &Path, phase: Phase) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "ckpt") {
        let dir = out.parent().unwrap_or(Path::new("")).to_path_buf();
        (out.to_path_buf(), dir.join(TRAIN_LOG_FILE))
    } else {
        (out.join(phase.file_name()), out.join(TRAIN_LOG_FILE))
    }
}

fn required<'a>(flag: &'a Option<PathBuf>, phase: Phase, needed: Phase) -> Result<&'a Path> {
    flag.as_deref().ok_or_else(|| Error::MissingCheckpoint {
        phase: needed.name(),
        hint: format!("the {phase} phase needs --{} <{}>", needed.name(), needed.file_name()),
    })
}

fn summarize(phase: Phase, report: &TrainReport, ckpt: &Path) {
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{phase}: {} steps{}, loss {first:.5} -> {last:.5}, {:.1}s, wrote {}",
        report.steps,
        if report.stopped_on_plateau { " (plateau)" } else { "" },
        report.wall_time,
        ckpt.display()
    );
}

fn train(
    phase: Phase,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    encoder: &Option<PathBuf>,
    kernel: &Option<PathBuf>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    // Prerequisites are checked before the (slow) data load.
    let enc = match phase {
        Phase::Encoder => None,
        _ => {
            let (meta, net) = load_encoder(required(encoder, phase, Phase::Encoder)?)?;
            ensure_same_config(&cfg.model, &meta.config, "the encoder checkpoint")?;
            Some(net)
        }
    };
    let knet = match phase {
        Phase::Recon => {
            let (meta, net) = load_kernel_net(required(kernel, phase, Phase::Kernel)?)?;
            ensure_same_config(&cfg.model, &meta.config, "the kernel checkpoint")?;
            Some(net)
        }
        _ => None,
    };

    let manifest = DatasetManifest::load(data)?;
    if manifest.s != cfg.model.scale {
        return Err(Error::Data(format!(
            "dataset scale {} differs from model scale {}",
            manifest.s, cfg.model.scale
        )));
    }
    let samples = manifest.load_all(&manifest_root(data))?;
    let td = TrainingData::from_samples(&samples, &cfg.model)?;
    info!("{} training samples", td.len());

    let (ckpt, log_path) = output_paths(out, phase);
    let mut log = TrainLog::open(&log_path, phase)?;
    let io = PhaseIo {
        log: Some(&mut log),
        checkpoint: Some(&ckpt),
        observer: None,
    };
    let report = match phase {
        Phase::Encoder => pretrain_encoder(&td, &cfg.model, &cfg.train, io)?.1,
        Phase::Kernel => {
            let enc = enc.as_ref().expect("loaded above");
            train_kernel_predictor(&td, enc, &cfg.model, &cfg.train, io)?.1
        }
        Phase::Recon => {
            let enc = enc.as_ref().expect("loaded above");
            let knet = knet.as_ref().expect("loaded above");
            train_reconstructor(&td, enc, knet, &cfg.model, &cfg.train, io)?.1
        }
    };
    summarize(phase, &report, &ckpt);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            corpus,
            out,
            count,
            patch,
            scale,
            seed,
            kernel_size,
            fixed_kernel,
        } => {
            let mut opts = DatasetOptions::new(scale, patch, count, seed);
            opts.kernel_size = kernel_size;
            opts.fixed_kernel = fixed_kernel;
            let m = generate_dataset(&corpus, &out, &opts)?;
            println!(
                "wrote {} samples to {} ({} corpus files skipped)",
                m.entries.len(),
                out.display(),
                m.skipped
            );
        }
        Command::Train {
            phase,
            data,
            config,
            out,
            encoder,
            kernel,
        } => train(phase.into(), &data, config.as_deref(), &out, &encoder, &kernel)?,
        Command::Infer { lr, bundle, out, seed } => {
            let b = ModelBundle::load_dir(&bundle)?;
            let rec = infer_paths(&lr, &b, &out, seed)?;
            println!(
                "wrote {} outputs to {}{}",
                rec.outputs.len(),
                out.display(),
                if rec.skipped.is_empty() {
                    String::new()
                } else {
                    format!(" (skipped {})", rec.skipped.join(", "))
                }
            );
        }
        Command::Eval { pred, truth, report } => {
            let r = evaluate(&pred, &truth)?;
            r.save(&report)?;
            print!("{}", r.table());
        }
        Command::SynthCorpus { out, count, size, seed } => {
            let files = write_corpus(&out, &SynthOptions { count, size, seed })?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
