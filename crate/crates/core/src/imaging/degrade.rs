use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::image::clip01;
use super::resize::{gaussian_blur, resize, resize_bicubic, ResizeKernel};
use super::Image;
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, rng, uniform};

/// Reduced blur -> resample -> noise degradation chain for training inputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    pub blur_sigma_range: (f64, f64),
    pub resize_kernels: Vec<ResizeKernel>,
    pub noise_sigma_range: (f64, f64),
    pub factor: usize,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: (0.2, 2.0),
            resize_kernels: vec![ResizeKernel::Bicubic, ResizeKernel::Bilinear, ResizeKernel::Area],
            noise_sigma_range: (0.0, 10.0 / 255.0),
            factor: 4,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: (f64, f64)| r.0 >= 0.0 && r.0 <= r.1 && r.1.is_finite();
        if !ok_range(self.blur_sigma_range) || !ok_range(self.noise_sigma_range) {
            return Err(invalid!("degradation ranges must be nonempty and nonnegative"));
        }
        if self.resize_kernels.is_empty() {
            return Err(invalid!("at least one resize kernel is required"));
        }
        if self.factor == 0 {
            return Err(invalid!("degradation factor must be >= 1"));
        }
        Ok(())
    }
}

/// Draws recorded by a degradation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradationDraw {
    pub blur_sigma: f64,
    pub kernel: ResizeKernel,
    pub noise_sigma: f64,
}

pub fn degrade(img: &Image, cfg: &DegradationConfig) -> Result<Image> {
    degrade_with_draw(img, cfg).map(|(out, _)| out)
}

pub fn degrade_with_draw(img: &Image, cfg: &DegradationConfig) -> Result<(Image, DegradationDraw)> {
    cfg.validate()?;
    let (h, w) = img.dims();
    if h % cfg.factor != 0 || w % cfg.factor != 0 {
        return Err(Error::Indivisible(alloc::format!(
            "{h}x{w} by factor {}",
            cfg.factor
        )));
    }
    let mut r = rng(cfg.seed);
    let blur_sigma = uniform(&mut r, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    let kernel = *cfg.resize_kernels.choose(&mut r).expect("validated nonempty");
    let noise_sigma = uniform(&mut r, cfg.noise_sigma_range.0, cfg.noise_sigma_range.1);

    let blurred = gaussian_blur(img, blur_sigma)?;
    let down = resize(&blurred, h / cfg.factor, w / cfg.factor, kernel)?;
    let out = if noise_sigma > 0.0 {
        let (dh, dw) = down.dims();
        let vals: Vec<f64> = down
            .data()
            .iter()
            .map(|&v| v as f64 + noise_sigma * normal::<f64>(&mut r))
            .collect();
        Image::new(dh, dw, vals.into_iter().map(clip01).collect())?
    } else {
        down
    };
    Ok((
        out,
        DegradationDraw {
            blur_sigma,
            kernel,
            noise_sigma,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    DirectRandomCrop,
    ResizeThenCrop,
    RandomChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CropPolicy {
    pub target: usize,
    pub mode: CropMode,
}

impl Default for CropPolicy {
    fn default() -> Self {
        Self {
            target: 512,
            mode: CropMode::RandomChoice,
        }
    }
}

pub fn crop_training(img: &Image, policy: &CropPolicy, seed: u64) -> Result<Image> {
    crop_training_with_mode(img, policy, seed).map(|(out, _)| out)
}

/// Like [`crop_training`], also returning the concrete mode applied.
pub fn crop_training_with_mode(img: &Image, policy: &CropPolicy, seed: u64) -> Result<(Image, CropMode)> {
    let t = policy.target;
    if t == 0 {
        return Err(invalid!("crop target must be positive"));
    }
    let mut r = rng(seed);
    let mode = match policy.mode {
        CropMode::RandomChoice => {
            if r.random_bool(0.5) {
                CropMode::DirectRandomCrop
            } else {
                CropMode::ResizeThenCrop
            }
        }
        m => m,
    };
    let (h, w) = img.dims();
    let src = match mode {
        CropMode::DirectRandomCrop => {
            if h < t || w < t {
                return Err(invalid!("{h}x{w} image smaller than crop target {t}"));
            }
            img.clone()
        }
        _ => {
            let short = h.min(w);
            if short == t {
                img.clone()
            } else {
                let scale = t as f64 / short as f64;
                let nh = if h == short { t } else { (libm::round(h as f64 * scale) as usize).max(t) };
                let nw = if w == short { t } else { (libm::round(w as f64 * scale) as usize).max(t) };
                resize_bicubic(img, nh, nw)?
            }
        }
    };
    let (sh, sw) = src.dims();
    let top = r.random_range(0..=sh - t);
    let left = r.random_range(0..=sw - t);
    Ok((src.crop(top, left, t, t)?, mode))
}
