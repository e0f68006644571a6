//! Blur-and-decimate degradation, bicubic resampling and PSNR.

use crate::error::{invalid, shape_err, Result};
use crate::image::{Image, ValueRange};
use crate::kernelgen::{kernel_from_params, Kernel, KernelParams, DEFAULT_KERNEL_SIZE};

/// Mirror an out-of-range index back into `0..n` without repeating the
/// edge sample (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// True 2-D convolution of every channel with `k`, anchored at
/// `(size/2, size/2)`, with reflect padding:
/// `out[y][x] = Σ k[i][j] · img[y − i + a][x − j + a]`.
pub fn convolve2d(img: &Image, k: &Kernel) -> Result<Image> {
    let (h, w, n) = (img.height(), img.width(), k.size());
    if n > h.min(w) {
        return Err(invalid!("kernel {n}×{n} larger than image {h}×{w}"));
    }
    let a = (n / 2) as isize;
    // Flattened taps as (dy, dx, weight) skipping exact zeros.
    let taps: Vec<(isize, isize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (a - i as isize, a - j as isize, k.get(i, j)))
        .filter(|t| t.2 != 0.0)
        .collect();
    let mut out = Vec::with_capacity(img.data().len());
    let mut acc = vec![0f64; w];
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h {
            acc.fill(0.0);
            for &(dy, dx, wt) in &taps {
                let row = &plane[reflect(y as isize + dy, h) * w..][..w];
                for (x, slot) in acc.iter_mut().enumerate() {
                    let xx = x as isize + dx;
                    let v = if xx >= 0 && (xx as usize) < w {
                        row[xx as usize]
                    } else {
                        row[reflect(xx, w)]
                    };
                    *slot += wt * v as f64;
                }
            }
            out.extend(acc.iter().map(|&v| v as f32));
        }
    }
    img.with_data(h, w, out)
}

/// Keep the pixels at rows and columns `0, s, 2s, …`.
pub fn downsample(img: &Image, s: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if s == 0 {
        return Err(invalid!("scale factor must be positive"));
    }
    if h % s != 0 || w % s != 0 {
        return Err(shape_err!("image {h}×{w} is not divisible by scale {s}"));
    }
    let (ho, wo) = (h / s, w / s);
    let mut out = Vec::with_capacity(img.channels() * ho * wo);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..ho {
            out.extend((0..wo).map(|x| plane[y * s * w + x * s]));
        }
    }
    img.with_data(ho, wo, out)
}

/// `LR = (HR ⊛ k)↓s` with the 24×24 kernel rendered from `p`.
pub fn degrade(hr: &Image, p: &KernelParams, s: usize) -> Result<(Image, Kernel)> {
    degrade_with_kernel_size(hr, p, s, DEFAULT_KERNEL_SIZE)
}

pub fn degrade_with_kernel_size(
    hr: &Image,
    p: &KernelParams,
    s: usize,
    kernel_size: usize,
) -> Result<(Image, Kernel)> {
    if s == 0 || hr.height() % s != 0 || hr.width() % s != 0 {
        return Err(shape_err!(
            "image {}×{} is not divisible by scale {s}",
            hr.height(),
            hr.width()
        ));
    }
    let k = kernel_from_params(p, kernel_size)?;
    let lr = downsample(&convolve2d(hr, &k)?, s)?;
    Ok((lr, k))
}

/// Catmull-Rom cubic convolution weight (`a = −0.5`).
pub(crate) fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap resampling table for one axis: output index → (first source
/// index, weights). Output `o` samples source position `o·n_in/n_out`, so
/// upsampling by `s` puts LR pixel `i` at HR index `s·i`, the position
/// `downsample` keeps. Out-of-range taps replicate the edge.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = o as f64 * scale;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let idx = base as isize - 1 + k as isize;
                let clamped = idx.clamp(0, n_in as isize - 1) as usize;
                *tap = (clamped, cubic(frac - (k as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize by the rational factor `num/den`, clamped to the
/// image's value range. Downscaling applies no antialiasing.
pub fn bicubic_resize(img: &Image, num: usize, den: usize) -> Result<Image> {
    if num == 0 || den == 0 {
        return Err(invalid!("resize factor {num}/{den} must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(shape_err!(
            "{h}×{w} scaled by {num}/{den} is not an integral size"
        ));
    }
    let (ho, wo) = (h * num / den, w * num / den);
    bicubic_resize_to(img, ho, wo)
}

pub fn bicubic_resize_to(img: &Image, ho: usize, wo: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if ho == 0 || wo == 0 {
        return Err(invalid!("empty resize target {ho}×{wo}"));
    }
    let (lo, hi) = img.range().bounds();
    let rows = axis_taps(h, ho);
    let cols = axis_taps(w, wo);
    let mut out = Vec::with_capacity(img.channels() * ho * wo);
    let mut tmp = vec![0f64; h * wo];
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h {
            for (x, taps) in cols.iter().enumerate() {
                tmp[y * wo + x] = taps
                    .iter()
                    .map(|&(i, wt)| wt * plane[y * w + i] as f64)
                    .sum();
            }
        }
        for taps in &rows {
            for x in 0..wo {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * wo + x]).sum();
                out.push((v as f32).clamp(lo, hi));
            }
        }
    }
    img.with_data(ho, wo, out)
}

/// Peak signal-to-noise ratio in dB over all channels and pixels, after
/// mapping both images to `[0, 1]`. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(shape_err!(
            "psnr of {}×{}×{} vs {}×{}×{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        ));
    }
    if a.range() != b.range() {
        return Err(invalid!("psnr of images in different value ranges"));
    }
    let (ua, ub) = (a.to_range(ValueRange::Unit), b.to_range(ValueRange::Unit));
    let mse = ua
        .data()
        .iter()
        .zip(ub.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / ua.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        let data = (0..c * h * w).map(|_| rng.random::<f32>()).collect();
        Image::new(c, h, w, data, ValueRange::Unit).unwrap()
    }

    #[test]
    fn reflect_index_folds() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    }

    #[test]
    fn delta_convolution_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 3, 24, 30);
        assert_eq!(convolve2d(&img, &Kernel::delta(24)).unwrap(), img);
        assert_eq!(convolve2d(&img, &Kernel::delta(3)).unwrap(), img);
    }

    #[test]
    fn constant_image_is_preserved() {
        let img = Image::filled(3, 32, 32, 0.37, ValueRange::Unit).unwrap();
        let p = KernelParams::new(3.3, 0.7, 1.0).unwrap();
        let out = convolve2d(&img, &kernel_from_params(&p, 24).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let img = Image::filled(1, 8, 30, 0.0, ValueRange::Unit).unwrap();
        assert!(convolve2d(&img, &Kernel::delta(9)).is_err());
    }

    #[test]
    fn decimation_keeps_stride_positions() {
        let img = Image::new(1, 4, 4, (0..16).map(|i| i as f32 / 16.0).collect(), ValueRange::Unit).unwrap();
        let d = downsample(&img, 2).unwrap();
        assert_eq!(d.data(), &[img.get(0, 0, 0), img.get(0, 0, 2), img.get(0, 2, 0), img.get(0, 2, 2)]);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        assert!(downsample(&img, 3).is_err());
    }

    #[test]
    fn degrade_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hr = random_image(&mut rng, 3, 64, 64);
        let p = KernelParams::new(1.2, 2.4, 0.0).unwrap();
        let (lr, k) = degrade(&hr, &p, 4).unwrap();
        assert_eq!((lr.height(), lr.width(), k.size()), (16, 16, 24));
        assert_eq!(degrade(&hr, &p, 4).unwrap().0, lr);
        assert!(degrade(&random_image(&mut rng, 3, 62, 64), &p, 4).is_err());

        let flat = Image::filled(3, 64, 64, 0.6, ValueRange::Unit).unwrap();
        let (lr, _) = degrade(&flat, &KernelParams::new(0.2, 0.2, 0.0).unwrap(), 4).unwrap();
        assert!(lr.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn bicubic_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 3, 9, 7);
        let same = bicubic_resize(&img, 1, 1).unwrap();
        assert!(same.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 1e-7));

        let flat = Image::filled(1, 5, 6, 0.25, ValueRange::Unit).unwrap();
        let up = bicubic_resize(&flat, 4, 1).unwrap();
        assert_eq!((up.height(), up.width()), (20, 24));
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(bicubic_resize(&flat, 1, 4).is_err());
    }

    #[test]
    fn bicubic_preserves_linear_ramp() {
        let w = 16;
        let data: Vec<f32> = (0..6).flat_map(|_| (0..w).map(|x| x as f32 / 32.0)).collect();
        let img = Image::new(1, 6, w, data, ValueRange::Unit).unwrap();
        let up = bicubic_resize(&img, 2, 1).unwrap();
        // Linear interpolant of the source ramp at x/2.
        for y in 0..up.height() {
            for x in 4..up.width() - 4 {
                let src = x as f64 / 2.0;
                let want = src / 32.0;
                assert!((up.get(0, y, x) as f64 - want).abs() < 1e-6, "x={x}");
            }
        }
    }

    #[test]
    fn bicubic_output_is_clamped() {
        let data = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let img = Image::new(1, 1, 6, data, ValueRange::Unit).unwrap();
        let up = bicubic_resize(&img, 4, 1).unwrap();
        assert!(up.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(up.data().contains(&1.0));
    }

    #[test]
    fn psnr_closed_forms() {
        let zeros = Image::filled(3, 4, 4, 0.0, ValueRange::Unit).unwrap();
        let ones = Image::filled(3, 4, 4, 1.0, ValueRange::Unit).unwrap();
        assert_eq!(psnr(&zeros, &zeros).unwrap(), f64::INFINITY);
        assert!(psnr(&zeros, &ones).unwrap().abs() < 1e-12);
        let tenth = Image::filled(3, 4, 4, 0.1, ValueRange::Unit).unwrap();
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-5);

        // Signed images are compared after mapping to [0, 1].
        let a = Image::filled(1, 2, 2, -1.0, ValueRange::Signed).unwrap();
        let b = Image::filled(1, 2, 2, 1.0, ValueRange::Signed).unwrap();
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        assert!(psnr(&zeros, &Image::filled(3, 4, 5, 0.0, ValueRange::Unit).unwrap()).is_err());
    }
}
