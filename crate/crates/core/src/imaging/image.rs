use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

/// RGB raster, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != height * width * 3 {
            return Err(shape_err!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary values, clipping into `[0, 1]`
    /// (NaN maps to 0).
    pub fn from_clipped(height: usize, width: usize, data: impl IntoIterator<Item = f64>) -> Result<Self> {
        let data = data.into_iter().map(clip01).collect();
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0f32; height * width * 3];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data[(y * width + x) * 3 + c] = clip01(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sub-window copy.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(invalid!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Self::new(height, width, data)
    }

    /// Reflect-pads bottom/right edges (mirror without repeating the edge pixel).
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(invalid!("pad target smaller than image"));
        }
        let ry = |y: usize| reflect(y, self.height);
        let rx = |x: usize| reflect(x, self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let base = (ry(y) * self.width + rx(x)) * 3;
                data.extend_from_slice(&self.data[base..base + 3]);
            }
        }
        Self::new(height, width, data)
    }

    /// 8-bit quantization (round half up), as stored by the file codecs.
    pub fn quantize(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| to_u8(v) as f32 / 255.0)
            .collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// `[0,1]` to the model's `[-1,1]` range as an `[H, W, 3]` tensor.
    pub fn to_model_range<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::of(self.data[i] as f64 * 2.0 - 1.0))
    }

    pub fn from_model_range<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(shape_err!("expected [H, W, 3] tensor, got {:?}", s));
        }
        Self::from_clipped(s[0], s[1], t.data().iter().map(|v| (v.f64() + 1.0) * 0.5))
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[inline]
pub(crate) fn clip01(v: f64) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0) as f32
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    libm::floorf(v * 255.0 + 0.5).clamp(0.0, 255.0) as u8
}
