//! Procedural RGB test images: gradients, sharp-edged shapes and oriented
//! gratings. Used when no photographic corpus is at hand.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::fsutil::create_dir;
use crate::image::{Image, ValueRange};
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

pub fn synth_image(size: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    if size < 8 {
        return Err(invalid!("synthetic images must be at least 8 pixels, got {size}"));
    }
    let n = size as f32;
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (ga, gb) = (angle.cos(), angle.sin());
    let mut px = vec![[0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f32 / n - 0.5) * ga + (y as f32 / n - 0.5) * gb);
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    for _ in 0..rng.random_range(3..7) {
        let col = color(rng);
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let r = rng.random_range(0.08..0.3) * n;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.6 * r
                };
                if inside {
                    px[y * size + x] = col;
                }
            }
        }
    }

    for _ in 0..2 {
        let period = rng.random_range(3.0..12.0);
        let a = rng.random_range(0.0..PI);
        let amp = rng.random_range(0.05..0.2);
        let (ca, sa) = (a.cos(), a.sin());
        for y in 0..size {
            for x in 0..size {
                let w = amp * (2.0 * PI * (x as f32 * ca + y as f32 * sa) / period).sin();
                for v in px[y * size + x].iter_mut() {
                    *v += w;
                }
            }
        }
    }

    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p[c].clamp(0.0, 1.0);
        }
    }
    Ok(Image::new(3, size, size, data, ValueRange::Unit)?.quantized())
}

/// Write `count` images as `synth_NNNN.png`; image `i` depends only on `(seed, i)`.
pub fn write_corpus(dir: &Path, opts: &SynthOptions) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    (0..opts.count)
        .map(|i| {
            let img = synth_image(opts.size, &mut stream(opts.seed, "synth", i as u64))?;
            let path = dir.join(format!("synth_{i:04}.png"));
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}
