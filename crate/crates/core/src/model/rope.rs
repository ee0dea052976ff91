use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::Scalar;

/// 2D rotary tables for one head. The first half of a head vector encodes
/// the x coordinate and the second half y; within each half, adjacent channel
/// pairs rotate at frequency `base^(-2k / (head_dim / 2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<T> {
    head_dim: usize,
    base: f64,
    max_positions: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, base: f64, max_positions: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(4) {
            return Err(crate::error::invalid!("rotary head_dim {head_dim} must be a positive multiple of 4"));
        }
        let pairs = head_dim / 4;
        let half = (head_dim / 2) as f64;
        let mut cos = Vec::with_capacity(max_positions * pairs);
        let mut sin = Vec::with_capacity(max_positions * pairs);
        for pos in 0..max_positions {
            for k in 0..pairs {
                let freq = libm::pow(base, -2.0 * k as f64 / half);
                let angle = pos as f64 * freq;
                cos.push(T::of(libm::cos(angle)));
                sin.push(T::of(libm::sin(angle)));
            }
        }
        Ok(Self {
            head_dim,
            base,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn check(&self, pos: (usize, usize)) -> Result<()> {
        let m = pos.0.max(pos.1);
        if m >= self.max_positions {
            return Err(Error::RopeRange(m, self.max_positions));
        }
        Ok(())
    }

    /// Rotates one head vector in place at absolute patch position `(x, y)`.
    pub fn apply(&self, v: &mut [T], pos: (usize, usize)) -> Result<()> {
        self.check(pos)?;
        self.rotate(v, pos, false);
        Ok(())
    }

    /// Applies the transpose rotation; used to pull gradients back.
    pub fn apply_inverse(&self, v: &mut [T], pos: (usize, usize)) -> Result<()> {
        self.check(pos)?;
        self.rotate(v, pos, true);
        Ok(())
    }

    fn rotate(&self, v: &mut [T], pos: (usize, usize), inverse: bool) {
        let pairs = self.head_dim / 4;
        let half = self.head_dim / 2;
        for (axis, p) in [pos.0, pos.1].into_iter().enumerate() {
            let cos = &self.cos[p * pairs..(p + 1) * pairs];
            let sin = &self.sin[p * pairs..(p + 1) * pairs];
            let seg = &mut v[axis * half..(axis + 1) * half];
            for k in 0..pairs {
                let (c, s) = (cos[k], if inverse { -sin[k] } else { sin[k] });
                let (a, b) = (seg[2 * k], seg[2 * k + 1]);
                seg[2 * k] = a * c - b * s;
                seg[2 * k + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng};
    use crate::tensor::ops::dot;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| normal(&mut r)).collect()
    }

    #[test]
    fn origin_is_identity() {
        let t = RopeTable::<f64>::new(16, 10_000.0, 8).unwrap();
        let v = random_vec(16, 1);
        let mut w = v.clone();
        t.apply(&mut w, (0, 0)).unwrap();
        assert_eq!(v, w);
    }

    #[test]
    fn preserves_pair_norms_and_inverts() {
        let t = RopeTable::<f32>::new(16, 10_000.0, 64).unwrap();
        let v: Vec<f32> = random_vec(16, 2).into_iter().map(|x| x as f32).collect();
        let mut w = v.clone();
        t.apply(&mut w, (37, 5)).unwrap();
        for k in 0..8 {
            let a = v[2 * k] * v[2 * k] + v[2 * k + 1] * v[2 * k + 1];
            let b = w[2 * k] * w[2 * k] + w[2 * k + 1] * w[2 * k + 1];
            assert!((a.sqrt() - b.sqrt()).abs() <= 1e-6 * a.sqrt().max(1.0));
        }
        t.apply_inverse(&mut w, (37, 5)).unwrap();
        for (a, b) in v.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_depend_on_relative_position_only() {
        let t = RopeTable::<f32>::new(16, 10_000.0, 256).unwrap();
        let q: Vec<f32> = random_vec(16, 3).into_iter().map(|x| x as f32).collect();
        let k: Vec<f32> = random_vec(16, 4).into_iter().map(|x| x as f32).collect();
        let logit = |pa: (usize, usize), pb: (usize, usize)| {
            let (mut a, mut b) = (q.clone(), k.clone());
            t.apply(&mut a, pa).unwrap();
            t.apply(&mut b, pb).unwrap();
            dot(&a, &b)
        };
        let base = logit((3, 7), (10, 2));
        for s in [(1, 0), (0, 9), (50, 31), (120, 200)] {
            let shifted = logit((3 + s.0, 7 + s.1), (10 + s.0, 2 + s.1));
            assert!((base - shifted).abs() <= 1e-5 * base.abs().max(1.0), "{base} vs {shifted}");
        }
    }

    #[test]
    fn out_of_range_rejected() {
        let t = RopeTable::<f64>::new(8, 10_000.0, 4).unwrap();
        let mut v = [0.0; 8];
        assert_eq!(t.apply(&mut v, (4, 0)), Err(Error::RopeRange(4, 4)));
        assert!(RopeTable::<f64>::new(6, 10_000.0, 4).is_err());
    }
}
