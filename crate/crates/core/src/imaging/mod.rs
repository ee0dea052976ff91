//! Images, resampling, training-time degradation and fidelity metrics.

mod degrade;
mod image;
mod metrics;
mod resize;

pub use degrade::{
    crop_training, crop_training_with_mode, degrade, degrade_with_draw, CropMode, CropPolicy, DegradationConfig,
    DegradationDraw,
};
pub use image::Image;
pub use metrics::{mse, psnr, ssim};
pub use resize::{gaussian_blur, resize, resize_bicubic, ResizeKernel};
