//! Global semantic embeddings: a pluggable encoder interface, a deterministic
//! toy encoder, and prompt-difference guidance of an image embedding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::imaging::{resize_bicubic, Image};
use crate::rng::derive_seed;
use crate::tensor::{seeded_init, InitScheme};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SemanticEmbedding {
    pub values: Vec<f32>,
}

impl SemanticEmbedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|&v| v as f64 * v as f64).sum())
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum();
        dot / (self.norm() * other.norm())
    }
}

/// L2 renormalization; a zero vector cannot be normalized.
pub fn normalize(e: &SemanticEmbedding) -> Result<SemanticEmbedding> {
    let n = e.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(SemanticEmbedding::new(e.values.iter().map(|&v| (v as f64 / n) as f32).collect()))
}

pub trait SemanticEncoder {
    fn dim(&self) -> usize;
    fn encode_image(&self, img: &Image) -> SemanticEmbedding;
    fn encode_text(&self, text: &str) -> SemanticEmbedding;
}

/// Stand-in for a contrastive image/text encoder. Images: resize to 224,
/// 14x14 average pool to a 16x16x3 grid, centre to [-1, 1]. Text: whitespace
/// tokens hashed into the same 768 buckets. Both go through one seeded
/// projection, then L2 normalization.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    dim: usize,
    projection: Tensor<f64>,
}

impl ToyEncoder {
    pub const INPUT_SIDE: usize = 224;
    pub const POOL: usize = 14;
    pub const FEATURES: usize = 16 * 16 * 3;

    pub fn new(dim: usize, seed: u64) -> Self {
        let projection = seeded_init(&[Self::FEATURES, dim], derive_seed(seed, 0x5E3A), InitScheme::ScaledNormal);
        Self { dim, projection }
    }

    fn project(&self, features: &[f64]) -> SemanticEmbedding {
        let w = self.projection.data();
        let mut out = vec![0.0f64; self.dim];
        for (i, &f) in features.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (o, &wv) in out.iter_mut().zip(&w[i * self.dim..(i + 1) * self.dim]) {
                *o += f * wv;
            }
        }
        let e = SemanticEmbedding::new(out.into_iter().map(|v| v as f32).collect());
        normalize(&e).unwrap_or(e)
    }

    pub fn image_features(img: &Image) -> Vec<f64> {
        let side = Self::INPUT_SIDE;
        let r = resize_bicubic(img, side, side).expect("positive target");
        let cells = side / Self::POOL;
        let mut feats = vec![0.0f64; Self::FEATURES];
        for y in 0..side {
            for x in 0..side {
                let cell = (y / Self::POOL) * cells + x / Self::POOL;
                for c in 0..3 {
                    feats[cell * 3 + c] += r.get(y, x, c) as f64;
                }
            }
        }
        let area = (Self::POOL * Self::POOL) as f64;
        feats.iter_mut().for_each(|v| *v = 2.0 * *v / area - 1.0);
        feats
    }

    pub fn text_features(text: &str) -> Vec<f64> {
        let mut feats = vec![0.0f64; Self::FEATURES];
        for tok in text.split_whitespace() {
            feats[(fnv1a(tok.as_bytes()) % Self::FEATURES as u64) as usize] += 1.0;
        }
        feats
    }
}

impl SemanticEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_image(&self, img: &Image) -> SemanticEmbedding {
        self.project(&Self::image_features(img))
    }

    /// The empty string encodes to the all-zeros embedding.
    fn encode_text(&self, text: &str) -> SemanticEmbedding {
        self.project(&Self::text_features(text))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `normalize(image + alpha * (pos - neg))` on precomputed text embeddings.
pub fn guide_embedding(
    image: &SemanticEmbedding,
    pos: &SemanticEmbedding,
    neg: &SemanticEmbedding,
    alpha: f64,
) -> Result<SemanticEmbedding> {
    if pos.dim() != image.dim() || neg.dim() != image.dim() {
        return Err(shape_err!(
            "guidance dims differ: image {}, positive {}, negative {}",
            image.dim(),
            pos.dim(),
            neg.dim()
        ));
    }
    let values = image
        .values
        .iter()
        .zip(&pos.values)
        .zip(&neg.values)
        .map(|((&i, &p), &n)| (i as f64 + alpha * (p as f64 - n as f64)) as f32)
        .collect();
    normalize(&SemanticEmbedding::new(values))
}

pub fn text_guidance<E: SemanticEncoder + ?Sized>(
    image: &SemanticEmbedding,
    positive: &str,
    negative: &str,
    alpha: f64,
    encoder: &E,
) -> Result<SemanticEmbedding> {
    guide_embedding(image, &encoder.encode_text(positive), &encoder.encode_text(negative), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng};
    use proptest::prelude::*;

    fn random_unit(dim: usize, seed: u64) -> SemanticEmbedding {
        let mut r = rng(seed);
        normalize(&SemanticEmbedding::new((0..dim).map(|_| normal::<f32>(&mut r)).collect())).unwrap()
    }

    #[test]
    fn image_encoding_is_unit_and_deterministic() {
        let enc = ToyEncoder::new(768, 1);
        let img = Image::from_fn(40, 30, |y, x, c| ((y * 3 + x * 7 + c) % 13) as f64 / 12.0).unwrap();
        let a = enc.encode_image(&img);
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        assert_eq!(a, enc.encode_image(&img));
        let red = Image::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        let blue = Image::filled(8, 8, [0.0, 0.0, 1.0]).unwrap();
        assert!(enc.encode_image(&red).cosine(&enc.encode_image(&blue)) < 1.0);
    }

    #[test]
    fn text_encoding_cases() {
        let enc = ToyEncoder::new(64, 2);
        let empty = enc.encode_text("");
        assert_eq!(empty, SemanticEmbedding::zeros(64));
        assert_eq!(enc.encode_text("clear"), enc.encode_text("clear"));
        assert_ne!(enc.encode_text("clear"), enc.encode_text("blur"));
        assert!((enc.encode_text("a sharp photo").norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn guidance_identity_and_cancellation() {
        let enc = ToyEncoder::new(64, 3);
        let i = random_unit(64, 4);
        let g = text_guidance(&i, "clear", "blur", 0.0, &enc).unwrap();
        assert!(i.values.iter().zip(&g.values).all(|(a, b)| (a - b).abs() <= 1e-6));
        let g = text_guidance(&i, "clear", "clear", 1.7, &enc).unwrap();
        assert!(i.values.iter().zip(&g.values).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn guidance_zero_norm_is_error() {
        let i = SemanticEmbedding::new(vec![1.0, 0.0]);
        let pos = SemanticEmbedding::new(vec![0.0, 0.0]);
        let neg = SemanticEmbedding::new(vec![1.0, 0.0]);
        assert_eq!(guide_embedding(&i, &pos, &neg, 1.0), Err(Error::ZeroNorm));
        assert!(guide_embedding(&i, &pos, &SemanticEmbedding::zeros(3), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn guidance_output_is_unit(alpha in -2.0f64..2.0, seed in 0u64..1000) {
            let enc = ToyEncoder::new(32, seed);
            let i = random_unit(32, seed + 1);
            if let Ok(g) = text_guidance(&i, "clear", "blur", alpha, &enc) {
                prop_assert!((g.norm() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn guidance_ignores_common_offset(alpha in -2.0f64..2.0, seed in 0u64..1000) {
            let i = random_unit(32, seed);
            let p = random_unit(32, seed + 1);
            let n = random_unit(32, seed + 2);
            let c = random_unit(32, seed + 3);
            let shift = |e: &SemanticEmbedding| SemanticEmbedding::new(
                e.values.iter().zip(&c.values).map(|(a, b)| a + b).collect());
            if let (Ok(a), Ok(b)) = (guide_embedding(&i, &p, &n, alpha), guide_embedding(&i, &shift(&p), &shift(&n), alpha)) {
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000) {
            let mut r = rng(seed);
            let e = SemanticEmbedding::new((0..48).map(|_| normal::<f32>(&mut r) * 10.0).collect());
            let a = normalize(&e).unwrap();
            let b = normalize(&a).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
        }
    }
}
