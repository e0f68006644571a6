//! Super-resolution of PNG files and the on-disk layout of its outputs.
//!
//! For an input `X.png` the output directory receives `X.png` (SR, 8-bit),
//! `X_sr.tensors` (float SR and chain residual), `X_kernel.png` (projected
//! kernel scaled to its peak), `X_kernel.tensors` (raw and projected kernel),
//! and one `run.json` describing the whole run.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bundle::ModelBundle;
use crate::config::ModelConfig;
use crate::container;
use crate::dataset::list_pngs;
use crate::error::{Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::image::{Image, ValueRange};
use crate::kernelgen::Kernel;
use crate::pipeline::{super_resolve, SrOutput};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub input: String,
    pub sr: String,
    pub kernel: String,
}

/// Contents of `run.json`. Holds no timestamps so repeated runs match byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<RunEntry>,
    pub skipped: Vec<String>,
}

/// SHA-256 of the config's JSON form.
pub fn config_hash(config: &ModelConfig) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(serde_json::to_vec(config)?)))
}

/// Kernel as a grayscale image scaled so its peak is white.
pub fn kernel_image(k: &Kernel) -> Result<Image> {
    let peak = k.values().iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    let data = k.values().iter().map(|&v| (v.max(0.0) * scale) as f32).collect();
    Image::new(1, k.size(), k.size(), data, ValueRange::Unit)
}

pub fn write_outputs(out_dir: &Path, stem: &str, out: &SrOutput) -> Result<RunEntry> {
    let sr_png = format!("{stem}.png");
    let kernel_png = format!("{stem}_kernel.png");
    out.sr.save_png(&out_dir.join(&sr_png))?;
    container::write(
        &out_dir.join(format!("{stem}_sr.tensors")),
        &json!({"range": "signed"}),
        &[
            ("sr".to_string(), out.sr.to_tensor()),
            ("residual".to_string(), out.residual.clone()),
        ],
    )?;
    kernel_image(&out.kernel.projected)?.save_png(&out_dir.join(&kernel_png))?;
    let k = out.kernel.projected.size();
    let as_tensor = |kern: &Kernel| Tensor::from_vec(&[k, k], kern.values().iter().map(|&v| v as f32).collect());
    container::write(
        &out_dir.join(format!("{stem}_kernel.tensors")),
        &json!({}),
        &[
            ("raw".to_string(), as_tensor(&out.kernel.raw)?),
            ("projected".to_string(), as_tensor(&out.kernel.projected)?),
        ],
    )?;
    Ok(RunEntry {
        input: stem.to_string(),
        sr: sr_png,
        kernel: kernel_png,
    })
}

/// Float SR image written next to the PNG, if present.
pub fn read_sr_tensor(path: &Path) -> Result<Image> {
    let (_, mut tensors) = container::read(path)?;
    let t = container::take(&mut tensors, "sr")?;
    Image::from_tensor(&t, ValueRange::Signed)
}

/// Raw kernel written next to the kernel PNG.
pub fn read_kernel_tensor(path: &Path, name: &str) -> Result<Kernel> {
    let (_, mut tensors) = container::read(path)?;
    let t = container::take(&mut tensors, name)?;
    let (n, m) = t.dims2()?;
    if n != m {
        return Err(Error::Data(format!("{}: kernel tensor is {n}×{m}", path.display())));
    }
    Kernel::from_values(n, t.data().iter().map(|&v| v as f64).collect())
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        list_pngs(input)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::Usage(format!("{} does not exist", input.display())))
    }
}

/// Super-resolve one PNG or every PNG in a directory. Each input's chains
/// draw from a stream keyed by its file stem, so results do not depend on
/// which other files are present. Undecodable files in a directory are
/// skipped; a single undecodable file is an error.
pub fn infer_paths(input: &Path, bundle: &ModelBundle, out_dir: &Path, seed: u64) -> Result<RunRecord> {
    let files = input_files(input)?;
    let single = input.is_file();
    create_dir(out_dir)?;
    let mut record = RunRecord {
        seed,
        config_hash: config_hash(&bundle.config)?,
        outputs: Vec::new(),
        skipped: Vec::new(),
    };
    for path in files {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let lr = match Image::load_png(&path) {
            Ok(img) => img,
            Err(e) if !single => {
                warn!("skipping {}: {e}", path.display());
                record.skipped.push(stem);
                continue;
            }
            Err(e) => return Err(e),
        };
        let out = super_resolve(&lr, bundle, &mut stream(seed, &format!("infer:{stem}"), 0))?;
        record.outputs.push(write_outputs(out_dir, &stem, &out)?);
        info!("{stem}: wrote {}×{} SR", out.sr.height(), out.sr.width());
    }
    if record.outputs.is_empty() {
        return Err(Error::Data(format!("no decodable PNG input in {}", input.display())));
    }
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    write_atomic(&out_dir.join(RUN_FILE), text.as_bytes())?;
    Ok(record)
}
