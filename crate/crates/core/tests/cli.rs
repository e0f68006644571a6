use std::path::Path;
use std::process::{Command, Output};

use dualdiff::config::{Config, ModelConfig, TrainConfig};
use dualdiff::dataset::DatasetManifest;
use dualdiff::degradation::bicubic_resize;
use dualdiff::image::{Image, ValueRange};
use dualdiff::pipeline::TrainLog;
use dualdiff::report::EvalReport;

fn dualdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dualdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, steps: usize) -> std::path::PathBuf {
    let mut model = ModelConfig::small();
    model.encoder.channels = 4;
    model.encoder.growth = 4;
    model.encoder.num_rrdb = 1;
    model.kernel_net.width = 4;
    model.image_net.width = 4;
    model.schedule.timesteps = 10;
    let mut train = TrainConfig::default();
    train.max_steps.encoder = steps;
    train.max_steps.kernel = steps;
    train.max_steps.recon = steps;
    train.log_interval = 2;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&Config { model, train }).unwrap()).unwrap();
    path
}

/// Corpus plus a 4-sample dataset of 32×32 patches.
fn dataset(dir: &Path) -> std::path::PathBuf {
    let corpus = dir.join("corpus");
    ok(&["synth-corpus", "--out", p(&corpus), "--count", "2", "--size", "48", "--seed", "1"]);
    let data = dir.join("data");
    ok(&[
        "gen-data", "--corpus", p(&corpus), "--out", p(&data), "--count", "4", "--patch", "32", "--scale", "4",
        "--seed", "5",
    ]);
    data.join("manifest.json")
}

fn train_bundle(dir: &Path, steps: usize) -> std::path::PathBuf {
    let manifest = dataset(dir);
    let cfg = tiny_config(dir, steps);
    let out = dir.join("bundle");
    let enc = out.join("encoder.ckpt");
    let ker = out.join("kernel.ckpt");
    ok(&["train", "--phase", "encoder", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out)]);
    ok(&[
        "train", "--phase", "kernel", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out), "--encoder",
        p(&enc),
    ]);
    ok(&[
        "train", "--phase", "recon", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out), "--encoder",
        p(&enc), "--kernel", p(&ker),
    ]);
    out
}

#[test]
fn gen_data_is_reproducible_and_counts_skipped_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth-corpus", "--out", p(&corpus), "--count", "2", "--size", "40"]);
    std::fs::write(corpus.join("corrupt.png"), b"\x89PNG garbage").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["gen-data", "--corpus", p(&corpus), "--out", p(&out), "--count", "4", "--patch", "32", "--seed", "3"]);
        std::fs::read(out.join("manifest.json")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let m: DatasetManifest = serde_json::from_slice(&a).unwrap();
    assert_eq!(m.entries.len(), 4);
    assert_eq!(m.skipped, 1);
    assert_eq!(m.load_all(&dir.path().join("a")).unwrap().len(), 4);
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    assert_eq!(dualdiff(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(dualdiff(&[]).status.code(), Some(1));
    assert_eq!(dualdiff(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = dualdiff(&["gen-data", "--corpus", p(&empty), "--out", p(&dir.path().join("o")), "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn later_phases_name_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let cfg = tiny_config(dir.path(), 2);
    let out = dir.path().join("b");
    ok(&["train", "--phase", "encoder", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out)]);
    let res = dualdiff(&[
        "train", "--phase", "recon", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out), "--encoder",
        p(&out.join("encoder.ckpt")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("kernel"), "{err}");
    let res = dualdiff(&["train", "--phase", "kernel", "--data", p(&manifest), "--out", p(&out)]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("encoder"));
}

#[test]
fn train_log_has_one_line_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let cfg = tiny_config(dir.path(), 10);
    let out = dir.path().join("b");
    for _ in 0..2 {
        ok(&["train", "--phase", "encoder", "--data", p(&manifest), "--config", p(&cfg), "--out", p(&out)]);
    }
    let lines = TrainLog::read(&out.join("train_log.jsonl")).unwrap();
    assert_eq!(lines.len(), 10 / 2);
    assert!(lines.iter().all(|l| l.loss.is_finite()));
}

#[test]
fn infer_and_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = train_bundle(dir.path(), 2);
    let data = dir.path().join("data");

    // 16×16 LR at scale 4 gives 64×64.
    let lr_dir = dir.path().join("lr16");
    std::fs::create_dir(&lr_dir).unwrap();
    let hr = Image::load_png(&data.join("hr/000000.png")).unwrap();
    let big = bicubic_resize(&hr, 1, 2).unwrap().quantized();
    big.save_png(&lr_dir.join("big.png")).unwrap();
    std::fs::write(lr_dir.join("broken.png"), b"nope").unwrap();
    let out1 = dir.path().join("o1");
    ok(&["infer", "--lr", p(&lr_dir), "--bundle", p(&bundle), "--out", p(&out1), "--seed", "9"]);
    let sr = Image::load_png(&out1.join("big.png")).unwrap();
    assert_eq!((sr.height(), sr.width()), (64, 64));
    assert!(out1.join("big_kernel.png").is_file());
    assert!(out1.join("big_kernel.tensors").is_file());

    // Same seed twice, byte-identical.
    let preds = [dir.path().join("p1"), dir.path().join("p2")];
    for pred in &preds {
        ok(&["infer", "--lr", p(&data.join("lr")), "--bundle", p(&bundle), "--out", p(pred), "--seed", "3"]);
    }
    for name in ["000000.png", "000003_kernel.tensors", "000002_sr.tensors", "run.json"] {
        assert_eq!(
            std::fs::read(preds[0].join(name)).unwrap(),
            std::fs::read(preds[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let single = dir.path().join("single");
    ok(&["infer", "--lr", p(&data.join("lr/000001.png")), "--bundle", p(&bundle), "--out", p(&single), "--seed", "3"]);
    assert_eq!(
        std::fs::read(single.join("000001.png")).unwrap(),
        std::fs::read(preds[0].join("000001.png")).unwrap()
    );

    let manifest = data.join("manifest.json");
    let report = dir.path().join("report.json");
    let table = ok(&["eval", "--pred", p(&preds[0]), "--truth", p(&manifest), "--report", p(&report)]);
    assert!(table.contains("psnr_bicubic"));
    let r = EvalReport::load(&report).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.meta.inference_seed, Some(3));
    let mean = r.rows.iter().map(|row| row.psnr_sr).sum::<f64>() / 4.0;
    assert!((r.aggregates.psnr_sr.mean - mean).abs() < 1e-12);
    assert!(r.rows.iter().all(|row| row.kernel_l2.is_some() && row.psnr_sr_float.is_some()));
    assert!(report.with_extension("txt").is_file());

    // HR copies as predictions: infinite PSNR.
    let copies = dir.path().join("copies");
    std::fs::create_dir(&copies).unwrap();
    // Bicubic upsamples as predictions: identical columns.
    let bic = dir.path().join("bic");
    std::fs::create_dir(&bic).unwrap();
    let m = DatasetManifest::load(&manifest).unwrap();
    for e in &m.entries {
        std::fs::copy(data.join(&e.hr), copies.join(format!("{}.png", e.stem()))).unwrap();
        let lr = Image::load_png(&data.join(&e.lr)).unwrap().to_range(ValueRange::Signed);
        bicubic_resize(&lr, 4, 1).unwrap().save_png(&bic.join(format!("{}.png", e.stem()))).unwrap();
    }
    let rc = dir.path().join("rc.json");
    ok(&["eval", "--pred", p(&copies), "--truth", p(&manifest), "--report", p(&rc)]);
    let text = std::fs::read_to_string(&rc).unwrap();
    assert!(text.contains("\"psnr_sr\": \"+inf\""), "{text}");
    let rb = dir.path().join("rb.json");
    ok(&["eval", "--pred", p(&bic), "--truth", p(&manifest), "--report", p(&rb)]);
    let r = EvalReport::load(&rb).unwrap();
    for row in &r.rows {
        assert_eq!(row.psnr_sr, row.psnr_bicubic);
    }

    // Missing predictions are listed by name.
    std::fs::remove_file(bic.join("000002.png")).unwrap();
    let res = dualdiff(&["eval", "--pred", p(&bic), "--truth", p(&manifest), "--report", p(&rb)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("000002.png"));

    // Inadmissible LR size.
    let odd = dir.path().join("odd.png");
    Image::filled(3, 10, 12, 0.3, ValueRange::Unit).unwrap().save_png(&odd).unwrap();
    let res = dualdiff(&["infer", "--lr", p(&odd), "--bundle", p(&bundle), "--out", p(&dir.path().join("x"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("multiples of 4"));
}
