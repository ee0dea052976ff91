//! Multi-head attention with per-head query/key layernorm followed by 2D
//! rotary embedding. Inputs are already-projected Q, K, V rows.

use alloc::vec;
use alloc::vec::Vec;

use super::rope::RopeTable;
use crate::error::Result;
use crate::tensor::ops::{affine_rows, dot, layernorm_backward, layernorm_rows, softmax_backward, softmax_in_place};
use crate::tensor::LayerNormParams;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub heads: usize,
    pub head_dim: usize,
}

impl Heads {
    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Saved activations for the backward pass.
#[derive(Debug, Clone)]
pub struct MhaTape<T> {
    pub tq: usize,
    pub tk: usize,
    q_hat: Vec<T>,
    q_rstd: Vec<T>,
    q_rot: Vec<T>,
    k_hat: Vec<T>,
    k_rstd: Vec<T>,
    k_rot: Vec<T>,
    v: Vec<T>,
    /// `[heads, tq, tk]`
    probs: Vec<T>,
    q_pos: Vec<(usize, usize)>,
    k_pos: Vec<(usize, usize)>,
    pub out: Vec<T>,
}

pub struct MhaGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

/// Layernorm + affine + rotation for each `(row, head)` vector.
fn norm_rotate<T: Scalar>(
    x: &[T],
    rows: usize,
    hs: Heads,
    norm: &LayerNormParams<T>,
    rope: &RopeTable<T>,
    pos: &[(usize, usize)],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let dh = hs.head_dim;
    let mut hat = vec![T::zero(); rows * hs.dim()];
    let mut rstd = vec![T::zero(); rows * hs.heads];
    layernorm_rows(x, dh, norm.epsilon, &mut hat, &mut rstd);
    let mut rot = hat.clone();
    affine_rows(&mut rot, norm.gain.data(), norm.shift.data());
    for (i, row) in rot.chunks_mut(hs.dim()).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.apply(head, pos[i])?;
        }
    }
    Ok((hat, rstd, rot))
}

pub fn mha_forward<T: Scalar>(
    hs: Heads,
    q: &[T],
    k: &[T],
    v: &[T],
    q_norm: &LayerNormParams<T>,
    k_norm: &LayerNormParams<T>,
    rope: &RopeTable<T>,
    q_pos: &[(usize, usize)],
    k_pos: &[(usize, usize)],
) -> Result<MhaTape<T>> {
    let d = hs.dim();
    let dh = hs.head_dim;
    let (tq, tk) = (q_pos.len(), k_pos.len());
    debug_assert_eq!(q.len(), tq * d);
    debug_assert_eq!(k.len(), tk * d);
    debug_assert_eq!(v.len(), tk * d);
    let (q_hat, q_rstd, q_rot) = norm_rotate(q, tq, hs, q_norm, rope, q_pos)?;
    let (k_hat, k_rstd, k_rot) = norm_rotate(k, tk, hs, k_norm, rope, k_pos)?;

    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut probs = vec![T::zero(); hs.heads * tq * tk];
    let mut out = vec![T::zero(); tq * d];
    let mut vh = vec![T::zero(); tk * dh];
    for h in 0..hs.heads {
        for j in 0..tk {
            vh[j * dh..(j + 1) * dh].copy_from_slice(&v[j * d + h * dh..j * d + (h + 1) * dh]);
        }
        for i in 0..tq {
            let qi = &q_rot[i * d + h * dh..i * d + (h + 1) * dh];
            let row = &mut probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k_rot[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            softmax_in_place(row);
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                for (ov, &vv) in o.iter_mut().zip(&vh[j * dh..(j + 1) * dh]) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
    Ok(MhaTape {
        tq,
        tk,
        q_hat,
        q_rstd,
        q_rot,
        k_hat,
        k_rstd,
        k_rot,
        v: v.to_vec(),
        probs,
        q_pos: q_pos.to_vec(),
        k_pos: k_pos.to_vec(),
        out,
    })
}

/// Raw attention logits (after norm and rotation, before softmax), `[heads, tq, tk]`.
pub fn mha_logits<T: Scalar>(tape: &MhaTape<T>, hs: Heads) -> Vec<T> {
    let d = hs.dim();
    let dh = hs.head_dim;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut out = Vec::with_capacity(hs.heads * tape.tq * tape.tk);
    for h in 0..hs.heads {
        for i in 0..tape.tq {
            let qi = &tape.q_rot[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..tape.tk {
                out.push(dot(qi, &tape.k_rot[j * d + h * dh..j * d + (h + 1) * dh]) * scale);
            }
        }
    }
    out
}

fn norm_rotate_backward<T: Scalar>(
    mut drot: Vec<T>,
    hat: &[T],
    rstd: &[T],
    hs: Heads,
    norm: &LayerNormParams<T>,
    gnorm: &mut LayerNormParams<T>,
    rope: &RopeTable<T>,
    pos: &[(usize, usize)],
) -> Result<Vec<T>> {
    let dh = hs.head_dim;
    for (i, row) in drot.chunks_mut(hs.dim()).enumerate() {
        for head in row.chunks_mut(dh) {
            rope.apply_inverse(head, pos[i])?;
        }
    }
    // drot now holds the gradient wrt the affine output
    let gain = norm.gain.data();
    {
        let gg = gnorm.gain.data_mut();
        for (dr, hr) in drot.chunks(dh).zip(hat.chunks(dh)) {
            for ((g, &a), &b) in gg.iter_mut().zip(dr).zip(hr) {
                *g = *g + a * b;
            }
        }
        let gs = gnorm.shift.data_mut();
        for dr in drot.chunks(dh) {
            for (g, &a) in gs.iter_mut().zip(dr) {
                *g = *g + a;
            }
        }
    }
    for dr in drot.chunks_mut(dh) {
        for (a, &g) in dr.iter_mut().zip(gain) {
            *a = *a * g;
        }
    }
    let mut dx = vec![T::zero(); drot.len()];
    layernorm_backward(&drot, hat, rstd, dh, &mut dx);
    Ok(dx)
}

pub fn mha_backward<T: Scalar>(
    hs: Heads,
    tape: &MhaTape<T>,
    dout: &[T],
    q_norm: &LayerNormParams<T>,
    k_norm: &LayerNormParams<T>,
    gq_norm: &mut LayerNormParams<T>,
    gk_norm: &mut LayerNormParams<T>,
    rope: &RopeTable<T>,
) -> Result<MhaGrads<T>> {
    let d = hs.dim();
    let dh = hs.head_dim;
    let (tq, tk) = (tape.tq, tape.tk);
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut dq_rot = vec![T::zero(); tq * d];
    let mut dk_rot = vec![T::zero(); tk * d];
    let mut dv = vec![T::zero(); tk * d];
    let mut dp = vec![T::zero(); tk];
    let mut ds = vec![T::zero(); tk];
    for h in 0..hs.heads {
        let hr = h * dh..(h + 1) * dh;
        for i in 0..tq {
            let p = &tape.probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
            let go = &dout[i * d + hr.start..i * d + hr.end];
            for j in 0..tk {
                let vj = &tape.v[j * d + hr.start..j * d + hr.end];
                dp[j] = dot(go, vj);
                let dvj = &mut dv[j * d + hr.start..j * d + hr.end];
                for (a, &g) in dvj.iter_mut().zip(go) {
                    *a = *a + p[j] * g;
                }
            }
            softmax_backward(p, &dp, &mut ds);
            let qi = &tape.q_rot[i * d + hr.start..i * d + hr.end];
            for j in 0..tk {
                let s = ds[j] * scale;
                if s == T::zero() {
                    continue;
                }
                let kj = &tape.k_rot[j * d + hr.start..j * d + hr.end];
                let dqi = &mut dq_rot[i * d + hr.start..i * d + hr.end];
                for (a, &kv) in dqi.iter_mut().zip(kj) {
                    *a = *a + s * kv;
                }
                let dkj = &mut dk_rot[j * d + hr.start..j * d + hr.end];
                for (a, &qv) in dkj.iter_mut().zip(qi) {
                    *a = *a + s * qv;
                }
            }
        }
    }
    let dq = norm_rotate_backward(dq_rot, &tape.q_hat, &tape.q_rstd, hs, q_norm, gq_norm, rope, &tape.q_pos)?;
    let dk = norm_rotate_backward(dk_rot, &tape.k_hat, &tape.k_rstd, hs, k_norm, gk_norm, rope, &tape.k_pos)?;
    Ok(MhaGrads { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng};

    fn rand(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n).map(|_| normal(&mut r)).collect()
    }

    fn setup() -> (Heads, LayerNormParams<f64>, LayerNormParams<f64>, RopeTable<f64>) {
        let hs = Heads { heads: 2, head_dim: 8 };
        let mut qn = LayerNormParams::new(8, 1e-6);
        let mut kn = LayerNormParams::new(8, 1e-6);
        qn.gain.data_mut().copy_from_slice(&rand(8, 11).iter().map(|v| 1.0 + 0.3 * v).collect::<Vec<_>>());
        kn.shift.data_mut().copy_from_slice(&rand(8, 12).iter().map(|v| 0.3 * v).collect::<Vec<_>>());
        (hs, qn, kn, RopeTable::new(8, 100.0, 16).unwrap())
    }

    fn positions(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i % 4, i / 4)).collect()
    }

    #[test]
    fn single_key_returns_value() {
        let (hs, qn, kn, rope) = setup();
        let q = rand(3 * 16, 1);
        let k = rand(16, 2);
        let v = rand(16, 3);
        let t = mha_forward(hs, &q, &k, &v, &qn, &kn, &rope, &positions(3), &[(2, 2)]).unwrap();
        for row in t.out.chunks(16) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let (hs, qn, kn, rope) = setup();
        let q = rand(16, 1);
        let k1 = rand(16, 2);
        let k: Vec<f64> = k1.iter().chain(&k1).copied().collect();
        let v = rand(32, 3);
        let pos = [(1, 1), (1, 1)];
        let t = mha_forward(hs, &q, &k, &v, &qn, &kn, &rope, &[(0, 3)], &pos).unwrap();
        for c in 0..16 {
            assert!((t.out[c] - 0.5 * (v[c] + v[16 + c])).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_gain_logits_bounded() {
        let hs = Heads { heads: 2, head_dim: 8 };
        let n = LayerNormParams::new(8, 1e-6);
        let rope = RopeTable::new(8, 10_000.0, 16).unwrap();
        let q: Vec<f64> = rand(5 * 16, 4).iter().map(|v| v * 100.0).collect();
        let k: Vec<f64> = rand(7 * 16, 5).iter().map(|v| v * 100.0).collect();
        let v = rand(7 * 16, 6);
        let t = mha_forward(hs, &q, &k, &v, &n, &n, &rope, &positions(5), &positions(7)).unwrap();
        let bound = libm::sqrt(8.0) + 1e-4;
        assert!(mha_logits(&t, hs).iter().all(|l| l.abs() <= bound));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (hs, qn, kn, rope) = setup();
        let (tq, tk) = (3, 5);
        let q = rand(tq * 16, 1);
        let k = rand(tk * 16, 2);
        let v = rand(tk * 16, 3);
        let w = rand(tq * 16, 4);
        let (qp, kp) = (positions(tq), positions(tk));
        let loss = |q: &[f64], k: &[f64], v: &[f64], qn: &LayerNormParams<f64>| {
            let t = mha_forward(hs, q, k, v, qn, &kn, &rope, &qp, &kp).unwrap();
            dot(&t.out, &w)
        };
        let t = mha_forward(hs, &q, &k, &v, &qn, &kn, &rope, &qp, &kp).unwrap();
        let mut gq = LayerNormParams::new(8, 1e-6);
        gq.gain.fill(0.0);
        let mut gk = gq.clone();
        let g = mha_backward(hs, &t, &w, &qn, &kn, &mut gq, &mut gk, &rope).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-6, "{analytic} vs {numeric}");
        };
        for idx in [0, 7, 20, 47] {
            let (mut a, mut b) = (q.clone(), q.clone());
            a[idx] += h;
            b[idx] -= h;
            check(g.dq[idx], (loss(&a, &k, &v, &qn) - loss(&b, &k, &v, &qn)) / (2.0 * h));
        }
        for idx in [1, 33, 79] {
            let (mut a, mut b) = (k.clone(), k.clone());
            a[idx] += h;
            b[idx] -= h;
            check(g.dk[idx], (loss(&q, &a, &v, &qn) - loss(&q, &b, &v, &qn)) / (2.0 * h));
            let (mut a, mut b) = (v.clone(), v.clone());
            a[idx] += h;
            b[idx] -= h;
            check(g.dv[idx], (loss(&q, &k, &a, &qn) - loss(&q, &k, &b, &qn)) / (2.0 * h));
        }
        for idx in 0..8 {
            let (mut a, mut b) = (qn.clone(), qn.clone());
            a.gain.data_mut()[idx] += h;
            b.gain.data_mut()[idx] -= h;
            check(gq.gain.data()[idx], (loss(&q, &k, &v, &a) - loss(&q, &k, &v, &b)) / (2.0 * h));
            let (mut a, mut b) = (qn.clone(), qn.clone());
            a.shift.data_mut()[idx] += h;
            b.shift.data_mut()[idx] -= h;
            check(gq.shift.data()[idx], (loss(&q, &k, &v, &a) - loss(&q, &k, &v, &b)) / (2.0 * h));
        }
    }
}
