//! Dense row-major tensors and the handful of kernels the model needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::{normal, rng};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every dimension but the last.
    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("add {:?} += {:?}", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(shape_err!("compare {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(max_abs_diff(&self.data, &other.data))
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

/// Affine projection `y = x W + b` with `W` stored `[d_in, d_out]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Scaled-normal weight (std 1/sqrt(d_in)), zero bias.
    pub fn init(d_in: usize, d_out: usize, seed: u64) -> Self {
        Self {
            weight: seeded_init(&[d_in, d_out], seed, InitScheme::ScaledNormal),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.weight.shape() != [d_in, d_out] || self.bias.shape() != [d_out] {
            return Err(shape_err!(
                "linear expects [{d_in}, {d_out}] + [{d_out}], has {:?} + {:?}",
                self.weight.shape(),
                self.bias.shape()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
    pub epsilon: T,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(d: usize, epsilon: T) -> Self {
        Self {
            gain: Tensor::filled(&[d], T::one()),
            shift: Tensor::zeros(&[d]),
            epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Normal with std 1/sqrt(shape[0]).
    ScaledNormal,
    Normal(f64),
    Zeros,
}

pub fn seeded_init<T: Scalar>(shape: &[usize], seed: u64, scheme: InitScheme) -> Tensor<T> {
    let std = match scheme {
        InitScheme::Zeros => return Tensor::zeros(shape),
        InitScheme::Normal(s) => s,
        InitScheme::ScaledNormal => 1.0 / libm::sqrt(shape.first().copied().unwrap_or(1).max(1) as f64),
    };
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| normal::<T>(&mut r) * T::of(std))
}

/// Matrix product, batched over leading dimensions. `b` is either 2-D
/// (broadcast across the batch) or carries the same leading dimensions as `a`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() < 2 || b.shape.len() < 2 {
        return Err(shape_err!("matmul needs rank >= 2, got {:?} x {:?}", a.shape, b.shape));
    }
    let (m, k) = (a.shape[a.shape.len() - 2], a.cols());
    let (k2, n) = (b.shape[b.shape.len() - 2], b.cols());
    if k != k2 {
        return Err(shape_err!("matmul inner dims {:?} x {:?}", a.shape, b.shape));
    }
    let lead = &a.shape[..a.shape.len() - 2];
    let batch: usize = lead.iter().product();
    let b_batched = b.shape.len() > 2;
    if b_batched && &b.shape[..b.shape.len() - 2] != lead {
        return Err(shape_err!("matmul batch dims {:?} x {:?}", a.shape, b.shape));
    }
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&[m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let bs = if b_batched { &b.data[bi * k * n..(bi + 1) * k * n] } else { &b.data[..] };
        ops::gemm_nn(
            m,
            k,
            n,
            &a.data[bi * m * k..(bi + 1) * m * k],
            bs,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    Tensor::new(&shape, out)
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.cols();
    if c == 0 || x.shape.is_empty() {
        return Err(invalid!("softmax over an empty last dimension"));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(c) {
        ops::softmax_in_place(row);
    }
    out.check_finite("softmax_rows")?;
    Ok(out)
}

pub fn layernorm<T: Scalar>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    let d = p.dim();
    if d == 0 {
        return Err(invalid!("layernorm over zero features"));
    }
    if x.cols() != d || p.shift.len() != d {
        return Err(shape_err!("layernorm dim {} vs input {:?}", d, x.shape));
    }
    if p.epsilon <= T::zero() {
        return Err(invalid!("layernorm epsilon must be positive"));
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    ops::layernorm_rows(&x.data, d, p.epsilon, &mut out, &mut rstd);
    ops::affine_rows(&mut out, p.gain.data(), p.shift.data());
    Tensor::new(&x.shape, out)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(ops::gelu)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(ops::silu)
}

pub fn linear<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    if x.cols() != p.d_in() {
        return Err(shape_err!("linear input {:?} vs weight {:?}", x.shape, p.weight.shape));
    }
    let rows = x.rows();
    let mut out = vec![T::zero(); rows * p.d_out()];
    ops::linear(&x.data, rows, p, &mut out);
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = p.d_out();
    Tensor::new(&shape, out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(&x.shape);
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.data[i] = (up - down) / two_h;
    }
    Ok(grad)
}

/// Slice-level kernels shared by the forward and backward passes.
pub mod ops {
    use super::LinearParams;
    use crate::Scalar;

    /// `c += a[m,k] * b[k,n]`
    pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }

    /// `c += a[k,m]^T * b[k,n]`
    pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }

    /// `c += a[m,k] * b[n,k]^T`
    pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// Eight independent partial sums, so the loop vectorizes.
    #[inline]
    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut acc = [T::zero(); 8];
        let mut ca = a.chunks_exact(8);
        let mut cb = b.chunks_exact(8);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for l in 0..8 {
                acc[l] = acc[l] + x[l] * y[l];
            }
        }
        let mut tail = T::zero();
        for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
            tail = tail + x * y;
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    /// `out = x W + b`, `out` overwritten.
    pub fn linear<T: Scalar>(x: &[T], rows: usize, p: &LinearParams<T>, out: &mut [T]) {
        let (d_in, d_out) = (p.d_in(), p.d_out());
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(p.bias.data());
        }
        gemm_nn(rows, d_in, d_out, x, p.weight.data(), out);
    }

    /// Accumulates weight/bias gradients and (optionally) the input gradient.
    pub fn linear_backward<T: Scalar>(
        x: &[T],
        rows: usize,
        p: &LinearParams<T>,
        dy: &[T],
        grad: &mut LinearParams<T>,
        dx: Option<&mut [T]>,
    ) {
        let (d_in, d_out) = (p.d_in(), p.d_out());
        gemm_tn(d_in, rows, d_out, x, dy, grad.weight.data_mut());
        let gb = grad.bias.data_mut();
        for row in dy.chunks(d_out) {
            for (g, &v) in gb.iter_mut().zip(row) {
                *g = *g + v;
            }
        }
        if let Some(dx) = dx {
            gemm_nt(rows, d_out, d_in, dy, p.weight.data(), dx);
        }
    }

    pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }

    /// Given probabilities `p` and upstream `dp`, writes the logit gradient.
    pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T], ds: &mut [T]) {
        let inner = dot(p, dp);
        for ((d, &pv), &g) in ds.iter_mut().zip(p).zip(dp) {
            *d = pv * (g - inner);
        }
    }

    /// Normalizes each row of width `d` to zero mean / unit variance.
    pub fn layernorm_rows<T: Scalar>(x: &[T], d: usize, eps: T, out: &mut [T], rstd: &mut [T]) {
        let inv_d = T::one() / T::of_usize(d);
        for ((xr, or), rs) in x.chunks(d).zip(out.chunks_mut(d)).zip(rstd.iter_mut()) {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = (v - mean) * r;
            }
            *rs = r;
        }
    }

    pub fn affine_rows<T: Scalar>(x: &mut [T], gain: &[T], shift: &[T]) {
        let d = gain.len();
        for row in x.chunks_mut(d) {
            for ((v, &g), &s) in row.iter_mut().zip(gain).zip(shift) {
                *v = *v * g + s;
            }
        }
    }

    /// Accumulates into `dx` the input gradient of an un-affined layernorm,
    /// given its normalized output `y` and per-row `rstd`.
    pub fn layernorm_backward<T: Scalar>(dy: &[T], y: &[T], rstd: &[T], d: usize, dx: &mut [T]) {
        let inv_d = T::one() / T::of_usize(d);
        for (((dyr, yr), &r), dxr) in dy
            .chunks(d)
            .zip(y.chunks(d))
            .zip(rstd)
            .zip(dx.chunks_mut(d))
        {
            let mean_dy = dyr.iter().copied().sum::<T>() * inv_d;
            let mean_dyy = dot(dyr, yr) * inv_d;
            for ((o, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
                *o = *o + r * (g - mean_dy - yv * mean_dyy);
            }
        }
    }

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    #[inline]
    pub fn gelu<T: Scalar>(x: T) -> T {
        let c = T::of(GELU_C);
        let inner = c * (x + T::of(0.044715) * x * x * x);
        T::of(0.5) * x * (T::one() + inner.tanh())
    }

    #[inline]
    pub fn gelu_grad<T: Scalar>(x: T) -> T {
        let c = T::of(GELU_C);
        let inner = c * (x + T::of(0.044715) * x * x * x);
        let t = inner.tanh();
        let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
        T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
    }

    #[inline]
    pub fn silu<T: Scalar>(x: T) -> T {
        x / (T::one() + (-x).exp())
    }

    #[inline]
    pub fn silu_grad<T: Scalar>(x: T) -> T {
        let s = T::one() / (T::one() + (-x).exp());
        s * (T::one() + x * (T::one() - s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::<f64>::identity(2);
        let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let a = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        let c = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Tensor<f64> = seeded_init(&[7, 5], 1, InitScheme::Normal(1.0));
        let b: Tensor<f64> = seeded_init(&[5, 3], 2, InitScheme::Normal(1.0));
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive(&a, &b)).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_batched_and_errors() {
        let a: Tensor<f64> = seeded_init(&[3, 4, 5], 3, InitScheme::Normal(1.0));
        let b: Tensor<f64> = seeded_init(&[5, 2], 4, InitScheme::Normal(1.0));
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[3, 4, 2]);
        for bi in 0..3 {
            let ab = Tensor::new(&[4, 5], a.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
            let want = naive(&ab, &b);
            assert!(super::max_abs_diff(&got.data()[bi * 8..(bi + 1) * 8], want.data()) < 1e-12);
        }
        let bad: Tensor<f64> = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::new(&[3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::new(&[2], vec![1000.0f64, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);

        let x: Tensor<f64> = seeded_init(&[9], 5, InitScheme::Normal(2.0));
        let s = softmax_rows(&x).unwrap();
        let z: f64 = x.data().iter().map(|v| libm::exp(*v)).sum();
        for (a, b) in s.data().iter().zip(x.data()) {
            assert!((a - libm::exp(*b) / z).abs() <= 1e-12);
        }
        let empty: Tensor<f64> = Tensor::zeros(&[2, 0]);
        assert!(softmax_rows(&empty).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let p = LayerNormParams::new(4, 1e-6f64);
        let x = Tensor::filled(&[4], 3.0f64);
        assert!(layernorm(&x, &p).unwrap().data().iter().all(|v| *v == 0.0));

        let p2 = LayerNormParams::new(2, 1e-300f64);
        let x = Tensor::new(&[2], vec![1.0f64, -1.0]).unwrap();
        let y = layernorm(&x, &p2).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let p = LayerNormParams::new(33, 1e-12f64);
        let x: Tensor<f64> = seeded_init(&[33], 11, InitScheme::Normal(5.0));
        let y = layernorm(&x, &p).unwrap();
        let mean = y.data().iter().sum::<f64>() / 33.0;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 33.0;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-8);

        let p0 = LayerNormParams::<f64>::new(0, 1e-6);
        assert!(layernorm(&Tensor::zeros(&[1, 0]), &p0).is_err());
    }

    #[test]
    fn gelu_linear_init() {
        assert_eq!(ops::gelu(0.0f64), 0.0);
        let x: Tensor<f64> = seeded_init(&[3, 4], 9, InitScheme::Normal(1.0));
        let p = LinearParams {
            weight: Tensor::identity(4),
            bias: Tensor::zeros(&[4]),
        };
        assert_eq!(linear(&x, &p).unwrap(), x);
        let a: Tensor<f32> = seeded_init(&[8, 8], 7, InitScheme::ScaledNormal);
        let b: Tensor<f32> = seeded_init(&[8, 8], 7, InitScheme::ScaledNormal);
        assert_eq!(a, b);
        let wrong = LinearParams::<f64>::zeros(5, 2);
        assert!(linear(&x, &wrong).is_err());
    }

    #[test]
    fn finite_diff_basic() {
        let x = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum_sq(), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.0, &x, 1e-4).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
        assert!(finite_diff_grad(|_| f64::NAN, &x, 1e-4).is_err());
    }

    #[test]
    fn finite_diff_matches_softmax_jacobian() {
        let x: Tensor<f64> = seeded_init(&[6], derive_seed(1, 2), InitScheme::Normal(1.0));
        let v: Tensor<f64> = seeded_init(&[6], derive_seed(1, 3), InitScheme::Normal(1.0));
        let f = |t: &Tensor<f64>| ops::dot(softmax_rows(t).unwrap().data(), v.data());
        let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
        // analytic: J^T v = p * (v - p.v)
        let p = softmax_rows(&x).unwrap();
        let mut an = vec![0.0; 6];
        ops::softmax_backward(p.data(), v.data(), &mut an);
        for (a, b) in an.iter().zip(fd.data()) {
            assert!((a - b).abs() / a.abs().max(1e-8) <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn analytic_kernel_grads_match_finite_differences() {
        // layernorm
        let x: Tensor<f64> = seeded_init(&[3, 5], 21, InitScheme::Normal(1.0));
        let up: Tensor<f64> = seeded_init(&[3, 5], 22, InitScheme::Normal(1.0));
        let p = LayerNormParams::new(5, 1e-6);
        let f = |t: &Tensor<f64>| ops::dot(layernorm(t, &p).unwrap().data(), up.data());
        let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
        let y = layernorm(&x, &p).unwrap();
        let mut rstd = vec![0.0; 3];
        let mut tmp = vec![0.0; 15];
        ops::layernorm_rows(x.data(), 5, 1e-6, &mut tmp, &mut rstd);
        let mut dx = vec![0.0; 15];
        ops::layernorm_backward(up.data(), y.data(), &rstd, 5, &mut dx);
        for (a, b) in dx.iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3));
        }
        // gelu / silu
        for &v in &[-2.3f64, -0.4, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (ops::gelu(v + h) - ops::gelu(v - h)) / (2.0 * h);
            assert!((fd - ops::gelu_grad(v)).abs() < 1e-8);
            let fd = (ops::silu(v + h) - ops::silu(v - h)) / (2.0 * h);
            assert!((fd - ops::silu_grad(v)).abs() < 1e-8);
        }
    }
}
