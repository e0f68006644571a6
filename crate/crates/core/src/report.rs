//! Evaluation of predictions against a dataset manifest.
//!
//! PSNR values that are infinite (identical images) are written to JSON as
//! the string `"+inf"`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::batch::{read_kernel_tensor, read_sr_tensor, RunRecord, RUN_FILE};
use crate::dataset::{manifest_root, DatasetManifest};
use crate::degradation::{bicubic_resize, psnr};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{Image, ValueRange};

pub const REPORT_VERSION: u32 = 1;

mod inf_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "+inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"+inf\", got {t:?}"))),
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
            match Option::<Repr>::deserialize(d)? {
                None => Ok(None),
                Some(Repr::Num(v)) => Ok(Some(v)),
                Some(Repr::Text(t)) if t == "+inf" => Ok(Some(f64::INFINITY)),
                Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad PSNR {t:?}"))),
            }
        }
    }
}

/// One manifest entry's scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    /// SR PNG vs HR.
    #[serde(with = "inf_f64")]
    pub psnr_sr: f64,
    /// Bicubic upsample of the LR, quantized to 8 bits like the SR PNG, vs HR.
    #[serde(with = "inf_f64")]
    pub psnr_bicubic: f64,
    /// Float SR before 8-bit quantization vs HR, when `X_sr.tensors` exists.
    #[serde(with = "inf_f64::option", default)]
    pub psnr_sr_float: Option<f64>,
    /// Unquantized bicubic upsample vs HR.
    #[serde(with = "inf_f64")]
    pub psnr_bicubic_float: f64,
    /// L2 distance of the projected predicted kernel to the ground truth,
    /// when `X_kernel.tensors` exists.
    pub kernel_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "inf_f64")]
    pub mean: f64,
    #[serde(with = "inf_f64")]
    pub median: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Some(Stat {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr_sr: Stat,
    pub psnr_bicubic: Stat,
    pub psnr_sr_float: Option<Stat>,
    pub psnr_bicubic_float: Stat,
    pub kernel_l2: Option<Stat>,
}

impl Aggregates {
    /// Recompute from rows. Optional columns aggregate only when every row has a value.
    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        let col = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let opt_col = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<Vec<f64>> { rows.iter().map(f).collect() };
        let need = |s: Option<Stat>| s.ok_or_else(|| Error::Data("no rows to aggregate".into()));
        Ok(Self {
            psnr_sr: need(Stat::of(&col(&|r| r.psnr_sr)))?,
            psnr_bicubic: need(Stat::of(&col(&|r| r.psnr_bicubic)))?,
            psnr_sr_float: opt_col(&|r| r.psnr_sr_float).and_then(|v| Stat::of(&v)),
            psnr_bicubic_float: need(Stat::of(&col(&|r| r.psnr_bicubic_float)))?,
            kernel_l2: opt_col(&|r| r.kernel_l2).and_then(|v| Stat::of(&v)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset_seed: u64,
    pub scale: usize,
    /// From the prediction directory's `run.json`, when present.
    pub inference_seed: Option<u64>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub meta: RunMeta,
    pub rows: Vec<EvalRow>,
    pub aggregates: Aggregates,
}

fn load_optional<T>(path: &Path, read: impl FnOnce(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.is_file() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Score every manifest entry's prediction `pred_dir/<stem>.png`.
pub fn evaluate(pred_dir: &Path, manifest_path: &Path) -> Result<EvalReport> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    if manifest.entries.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| e.stem())
        .filter(|stem| !pred_dir.join(format!("{stem}.png")).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing predictions in {}: {}",
            pred_dir.display(),
            missing.iter().map(|m| format!("{m}.png")).collect::<Vec<_>>().join(", ")
        )));
    }

    let mut rows = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let sample = manifest.load_sample(&root, entry)?;
        let stem = entry.stem();
        let hr = sample.hr.to_range(ValueRange::Signed);
        let pred = Image::load_png(&pred_dir.join(format!("{stem}.png")))?.to_range(ValueRange::Signed);
        let up = bicubic_resize(&sample.lr.to_range(ValueRange::Signed), manifest.s, 1)?;
        let sr_float = load_optional(&pred_dir.join(format!("{stem}_sr.tensors")), read_sr_tensor)?;
        let kernel = load_optional(&pred_dir.join(format!("{stem}_kernel.tensors")), |p| {
            read_kernel_tensor(p, "projected")
        })?;
        rows.push(EvalRow {
            psnr_sr: psnr(&pred, &hr)?,
            psnr_bicubic: psnr(&up.quantized(), &hr)?,
            psnr_sr_float: sr_float.map(|sr| psnr(&sr, &hr)).transpose()?,
            psnr_bicubic_float: psnr(&up, &hr)?,
            kernel_l2: kernel.map(|k| k.l2_distance(&sample.kernel)).transpose()?,
            name: stem,
        });
    }

    let run = load_optional(&pred_dir.join(RUN_FILE), |p| {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        serde_json::from_str::<RunRecord>(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
    })?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        meta: RunMeta {
            dataset_seed: manifest.seed,
            scale: manifest.s,
            inference_seed: run.as_ref().map(|r| r.seed),
            config_hash: run.map(|r| r.config_hash),
        },
        aggregates: Aggregates::from_rows(&rows)?,
        rows,
    })
}

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else {
        format!("{v:.3}")
    }
}

fn fmt_opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Rows and aggregates as an aligned text table.
    pub fn table(&self) -> String {
        let header = ["name", "psnr_sr", "psnr_bicubic", "psnr_sr_float", "psnr_bicubic_float", "kernel_l2"];
        let l2 = |v: f64| format!("{v:.5}");
        let mut cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    fmt_db(r.psnr_sr),
                    fmt_db(r.psnr_bicubic),
                    fmt_opt(r.psnr_sr_float, fmt_db),
                    fmt_db(r.psnr_bicubic_float),
                    fmt_opt(r.kernel_l2, l2),
                ]
            })
            .collect();
        let a = &self.aggregates;
        for (label, pick) in [("mean", true), ("median", false)] {
            let get = |s: &Stat| if pick { s.mean } else { s.median };
            cells.push([
                label.to_string(),
                fmt_db(get(&a.psnr_sr)),
                fmt_db(get(&a.psnr_bicubic)),
                fmt_opt(a.psnr_sr_float.as_ref().map(get), fmt_db),
                fmt_db(get(&a.psnr_bicubic_float)),
                fmt_opt(a.kernel_l2.as_ref().map(get), l2),
            ]);
        }
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            for (i, (c, w)) in row.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
        for (i, row) in cells.iter().enumerate() {
            if i == self.rows.len() {
                line(&mut out, &rule.iter().map(String::as_str).collect::<Vec<_>>());
            }
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }

    /// Write JSON to `path` and the table next to it with a `.txt` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        write_atomic(&path.with_extension("txt"), self.table().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
