use alloc::vec;
use alloc::vec::Vec;

use super::Image;
use crate::error::{shape_err, Result};

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range. Identical
/// inputs give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * libm::log10(m))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
/// positions, averaged over channels. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    let r = (win / 2) as isize;
    let g1: Vec<f64> = (-r..=r)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)))
        .collect();
    let gs: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.into_iter().map(|v| v / gs).collect();

    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = (0..h * w).map(|i| a.data()[i * 3 + c] as f64).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data()[i * 3 + c] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|m| filter_valid(m, h, w, &g1));
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

fn filter_valid(m: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let win = g.len();
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * m[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, phase: f64) -> Image {
        Image::from_fn(h, w, |y, x, c| 0.5 + 0.4 * libm::sin(phase + 0.3 * y as f64 + 0.17 * x as f64 * (c + 1) as f64)).unwrap()
    }

    #[test]
    fn identical_images() {
        let a = sample(20, 24, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_level_offset_psnr() {
        let a = Image::filled(8, 8, [100.0 / 255.0; 3]).unwrap();
        let b = Image::filled(8, 8, [101.0 / 255.0; 3]).unwrap();
        let want = 10.0 * libm::log10(255.0f64 * 255.0);
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-4);
        assert!((want - 48.13).abs() < 0.01);
    }

    #[test]
    fn checkerboard_vs_negative_is_anticorrelated() {
        let a = Image::from_fn(16, 16, |y, x, _| ((y + x) % 2) as f64).unwrap();
        let b = Image::from_fn(16, 16, |y, x, _| 1.0 - ((y + x) % 2) as f64).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn symmetric_and_checked() {
        let a = sample(13, 17, 0.0);
        let b = sample(13, 17, 0.4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        assert!(psnr(&a, &sample(13, 16, 0.0)).is_err());
        // smaller than the window
        let s = sample(6, 9, 0.0);
        assert!((ssim(&s, &s).unwrap() - 1.0).abs() < 1e-12);
    }
}
