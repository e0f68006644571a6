//! Synthetic training triplets `(HR patch, LR image, kernel)` and their manifest.

use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::degradation::degrade_with_kernel_size;
use crate::error::{invalid, Error, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::image::{Image, ValueRange};
use crate::kernelgen::{Kernel, KernelParams, DEFAULT_KERNEL_SIZE};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hr: String,
    pub lr: String,
    pub ker: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    /// Corpus file the HR patch was cut from, with the patch's top-left corner.
    pub source: String,
    pub offset: [usize; 2],
}

impl ManifestEntry {
    pub fn params(&self) -> KernelParams {
        KernelParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            theta: self.theta,
        }
    }

    /// File stem shared by the entry's three files and by predictions.
    pub fn stem(&self) -> String {
        Path::new(&self.hr)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub s: usize,
    pub patch_size: usize,
    pub kernel_size: usize,
    /// Corpus files that could not be decoded or were smaller than a patch.
    pub skipped: usize,
    pub entries: Vec<ManifestEntry>,
}

/// A decoded manifest entry, images in the unit range.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub hr: Image,
    pub lr: Image,
    pub kernel: Kernel,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest version {} (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Decode one entry, checking shapes against the manifest header.
    pub fn load_sample(&self, root: &Path, entry: &ManifestEntry) -> Result<Sample> {
        let data_err = |what: String| Error::Data(format!("entry {}: {what}", entry.hr));
        entry
            .params()
            .validate()
            .map_err(|e| data_err(e.to_string()))?;
        let hr = Image::load_png(&root.join(&entry.hr))?;
        let lr = Image::load_png(&root.join(&entry.lr))?;
        let p = self.patch_size;
        if hr.height() != p || hr.width() != p {
            return Err(data_err(format!("HR is {}×{}, expected {p}×{p}", hr.height(), hr.width())));
        }
        if self.s == 0 || lr.height() * self.s != p || lr.width() * self.s != p {
            return Err(data_err(format!("LR is {}×{}, expected {}×{}", lr.height(), lr.width(), p / self.s.max(1), p / self.s.max(1))));
        }
        let kernel = read_kernel(&root.join(&entry.ker))?;
        if kernel.size() != self.kernel_size {
            return Err(data_err(format!("kernel is {0}×{0}, expected {1}×{1}", kernel.size(), self.kernel_size)));
        }
        Ok(Sample {
            name: entry.stem(),
            hr,
            lr,
            kernel,
        })
    }

    pub fn load_all(&self, root: &Path) -> Result<Vec<Sample>> {
        if self.entries.is_empty() {
            return Err(Error::Data("manifest has no entries".into()));
        }
        self.entries.iter().map(|e| self.load_sample(root, e)).collect()
    }
}

/// Directory that relative manifest paths resolve against.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

pub fn write_kernel(path: &Path, k: &Kernel, meta: serde_json::Value) -> Result<()> {
    let values = k.values().iter().map(|&v| v as f32).collect();
    let t = Tensor::from_vec(&[k.size(), k.size()], values)?;
    container::write(path, &meta, &[("kernel".into(), t)])
}

pub fn read_kernel(path: &Path) -> Result<Kernel> {
    let (_, mut ts) = container::read(path)?;
    let t = container::take(&mut ts, "kernel")?;
    match *t.shape() {
        [n, m] if n == m => Kernel::from_values(n, t.data().iter().map(|&v| v as f64).collect()),
        _ => Err(Error::Data(format!("{}: kernel tensor has shape {:?}", path.display(), t.shape()))),
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    pub scale: usize,
    pub patch_size: usize,
    pub count: usize,
    pub seed: u64,
    pub kernel_size: usize,
    /// Use one kernel for every patch instead of sampling per patch.
    pub fixed_kernel: Option<KernelParams>,
}

impl DatasetOptions {
    pub fn new(scale: usize, patch_size: usize, count: usize, seed: u64) -> Self {
        Self {
            scale,
            patch_size,
            count,
            seed,
            kernel_size: DEFAULT_KERNEL_SIZE,
            fixed_kernel: None,
        }
    }
}

/// PNG files in `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Cut `count` random HR patches from the corpus, degrade each with its own
/// kernel, and write `out_dir/{hr,lr,ker}/NNNNNN.*` plus `manifest.json`.
///
/// Patch `i` draws everything from the stream `(seed, i)`, so output does not
/// depend on generation order.
pub fn generate_dataset(corpus_dir: &Path, out_dir: &Path, opts: &DatasetOptions) -> Result<DatasetManifest> {
    let (s, p) = (opts.scale, opts.patch_size);
    if s == 0 || p == 0 || p % s != 0 {
        return Err(invalid!("patch size {p} must be a positive multiple of scale {s}"));
    }
    if opts.kernel_size > p {
        return Err(invalid!("kernel size {} exceeds patch size {p}", opts.kernel_size));
    }
    if let Some(k) = &opts.fixed_kernel {
        k.validate()?;
    }

    let mut corpus = Vec::new();
    let mut skipped = 0;
    for path in list_pngs(corpus_dir)? {
        match Image::load_png(&path) {
            Ok(img) if img.height() >= p && img.width() >= p => corpus.push((path, img)),
            Ok(img) => {
                warn!("skipping {}: {}×{} is smaller than the {p}×{p} patch", path.display(), img.height(), img.width());
                skipped += 1;
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!(
            "corpus {} has no usable PNG images ({skipped} skipped)",
            corpus_dir.display()
        )));
    }

    for sub in ["hr", "lr", "ker"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let mut rng = stream(opts.seed, "patch", i as u64);
        let (path, img) = &corpus[rng.random_range(0..corpus.len())];
        let y0 = rng.random_range(0..=img.height() - p);
        let x0 = rng.random_range(0..=img.width() - p);
        let params = opts.fixed_kernel.unwrap_or_else(|| KernelParams::sample(&mut rng));
        let hr = img.crop(y0, x0, p, p)?;
        let (lr, kernel) = degrade_with_kernel_size(&hr, &params, s, opts.kernel_size)?;

        let name = format!("{i:06}");
        let entry = ManifestEntry {
            hr: format!("hr/{name}.png"),
            lr: format!("lr/{name}.png"),
            ker: format!("ker/{name}.tensors"),
            lambda1: params.lambda1,
            lambda2: params.lambda2,
            theta: params.theta,
            source: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            offset: [y0, x0],
        };
        hr.save_png(&out_dir.join(&entry.hr))?;
        lr.save_png(&out_dir.join(&entry.lr))?;
        write_kernel(
            &out_dir.join(&entry.ker),
            &kernel,
            json!({"lambda1": params.lambda1, "lambda2": params.lambda2, "theta": params.theta}),
        )?;
        entries.push(entry);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        s,
        patch_size: p,
        kernel_size: opts.kernel_size,
        skipped,
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Unit-range image in `[0, 1]` to the network's `[-1, 1]` tensor.
pub fn to_network(img: &Image) -> Tensor {
    img.to_range(ValueRange::Signed).to_tensor()
}
