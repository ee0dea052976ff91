//! Separable resampling with edge clamping. Downscaling widens the kernel by
//! the scale factor (antialiasing), so 4x bicubic downsampling averages over
//! the whole source footprint rather than point-sampling.

use alloc::vec;
use alloc::vec::Vec;

use super::image::clip01;
use super::Image;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeKernel {
    /// Catmull-Rom cubic, a = -0.5.
    Bicubic,
    Bilinear,
    /// Box filter; exact block averaging for integer downscale factors.
    Area,
}

impl ResizeKernel {
    fn support(self) -> f64 {
        match self {
            ResizeKernel::Bicubic => 2.0,
            ResizeKernel::Bilinear => 1.0,
            ResizeKernel::Area => 0.5,
        }
    }

    fn weight(self, x: f64) -> f64 {
        let ax = x.abs();
        match self {
            ResizeKernel::Bicubic => {
                const A: f64 = -0.5;
                if ax <= 1.0 {
                    ((A + 2.0) * ax - (A + 3.0)) * ax * ax + 1.0
                } else if ax < 2.0 {
                    ((A * ax - 5.0 * A) * ax + 8.0 * A) * ax - 4.0 * A
                } else {
                    0.0
                }
            }
            ResizeKernel::Bilinear => (1.0 - ax).max(0.0),
            ResizeKernel::Area => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-output-sample taps: (first source index, normalized weights).
struct Taps {
    start: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

fn taps(kernel: ResizeKernel, n_in: usize, n_out: usize) -> Taps {
    let ratio = n_in as f64 / n_out as f64;
    let scale = ratio.max(1.0);
    let support = kernel.support() * scale;
    let mut start = Vec::with_capacity(n_out);
    let mut weights = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let lo = libm::floor(center - support) as isize;
        let hi = libm::ceil(center + support) as isize;
        let mut w: Vec<f64> = (lo..=hi)
            .map(|i| kernel.weight((i as f64 - center) / scale))
            .collect();
        let sum: f64 = w.iter().sum();
        if sum != 0.0 {
            w.iter_mut().for_each(|v| *v /= sum);
        }
        start.push(lo);
        weights.push(w);
    }
    Taps { start, weights }
}

pub fn resize(img: &Image, new_h: usize, new_w: usize, kernel: ResizeKernel) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(invalid!("resize target {new_h}x{new_w} has a zero dimension"));
    }
    let (h, w) = img.dims();
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();

    // horizontal pass: h x new_w
    let tx = taps(kernel, w, new_w);
    let mut mid = vec![0.0f64; h * new_w * 3];
    for y in 0..h {
        for ox in 0..new_w {
            let mut acc = [0.0f64; 3];
            for (k, &wt) in tx.weights[ox].iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let sx = (tx.start[ox] + k as isize).clamp(0, w as isize - 1) as usize;
                let base = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wt * src[base + c];
                }
            }
            mid[(y * new_w + ox) * 3..(y * new_w + ox) * 3 + 3].copy_from_slice(&acc);
        }
    }

    // vertical pass
    let ty = taps(kernel, h, new_h);
    let mut out = vec![0.0f64; new_h * new_w * 3];
    for oy in 0..new_h {
        for (k, &wt) in ty.weights[oy].iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let sy = (ty.start[oy] + k as isize).clamp(0, h as isize - 1) as usize;
            let srow = &mid[sy * new_w * 3..(sy + 1) * new_w * 3];
            let orow = &mut out[oy * new_w * 3..(oy + 1) * new_w * 3];
            for (o, &s) in orow.iter_mut().zip(srow) {
                *o += wt * s;
            }
        }
    }
    Image::new(new_h, new_w, out.into_iter().map(clip01).collect())
}

pub fn resize_bicubic(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    resize(img, new_h, new_w, ResizeKernel::Bicubic)
}

/// Separable Gaussian blur, radius ceil(3 sigma), edge clamped. `sigma <= 0`
/// returns a copy.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma <= 0.0 {
        return Ok(img.clone());
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);

    let (h, w) = img.dims();
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut mid = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, &kw) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    mid[(y * w + x) * 3 + c] += kw * src[(y * w + sx) * 3 + c];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (k, &kw) in kernel.iter().enumerate() {
            let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
            for i in 0..w * 3 {
                out[y * w * 3 + i] += kw * mid[sy * w * 3 + i];
            }
        }
    }
    Image::new(h, w, out.into_iter().map(clip01).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(7, 5, [0.3, 0.6, 0.9]).unwrap();
        for kernel in [ResizeKernel::Bicubic, ResizeKernel::Bilinear, ResizeKernel::Area] {
            for &(h, w) in &[(14, 10), (3, 2), (1, 1), (23, 17)] {
                let r = resize(&img, h, w, kernel).unwrap();
                for px in r.data().chunks(3) {
                    assert!((px[0] - 0.3).abs() < 1e-6);
                    assert!((px[1] - 0.6).abs() < 1e-6);
                    assert!((px[2] - 0.9).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_resize() {
        let img = Image::from_fn(9, 6, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        let r = resize_bicubic(&img, 9, 6).unwrap();
        for (a, b) in r.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn up_down_gradient_is_faithful() {
        let img = Image::from_fn(32, 32, |y, x, c| (y as f64 + 2.0 * x as f64 + c as f64) / 100.0).unwrap();
        let up = resize_bicubic(&img, 64, 64).unwrap();
        let down = resize_bicubic(&up, 32, 32).unwrap();
        assert!(psnr(&img, &down).unwrap() > 40.0);
    }

    #[test]
    fn area_integer_downscale_is_block_mean() {
        let img = Image::from_fn(4, 4, |y, x, _| (y * 4 + x) as f64 / 16.0).unwrap();
        let r = resize(&img, 2, 2, ResizeKernel::Area).unwrap();
        let want = (0.0 + 1.0 + 4.0 + 5.0) / 4.0 / 16.0;
        assert!((r.get(0, 0, 0) as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn zero_target_rejected() {
        let img = Image::filled(2, 2, [0.0; 3]).unwrap();
        assert!(resize_bicubic(&img, 0, 2).is_err());
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(6, 6, [0.4; 3]).unwrap();
        let b = gaussian_blur(&img, 1.3).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
