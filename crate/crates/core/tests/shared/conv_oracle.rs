//! Brute-force reference for reflect-padded 2-D convolution.

use dualdiff::image::Image;
use dualdiff::kernelgen::Kernel;

/// Mirror padding without edge repeat, written as an explicit fold.
pub fn mirror(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn direct_convolution(img: &Image, k: &Kernel) -> Vec<f64> {
    let (h, w, n) = (img.height(), img.width(), k.size());
    let a = (n / 2) as isize;
    let mut out = Vec::new();
    for c in 0..img.channels() {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = 0.0;
                for i in 0..n as isize {
                    for j in 0..n as isize {
                        let yy = mirror(y - i + a, h);
                        let xx = mirror(x - j + a, w);
                        s += k.get(i as usize, j as usize) * img.get(c, yy, xx) as f64;
                    }
                }
                out.push(s);
            }
        }
    }
    out
}
