//! Conditioning vector: sinusoidal-MLP embedding of the noise level plus a
//! linear projection of the global semantic embedding.

use alloc::vec;
use alloc::vec::Vec;

use super::params::ModelParams;
use crate::error::{shape_err, Result};
use crate::tensor::ops::{linear, linear_backward, silu, silu_grad};
use crate::Scalar;

/// `c_noise` is multiplied by this before the sinusoidal features, so the
/// usual `ln(sigma)/4` range spans a few hundred "timesteps".
pub const TIME_SCALE: f64 = 250.0;

pub fn timestep_features<T: Scalar>(c_noise: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = c_noise.f64() * TIME_SCALE * freq;
        out[k] = T::of(libm::cos(arg));
        out[half + k] = T::of(libm::sin(arg));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CondTape<T> {
    features: Vec<T>,
    t1: Vec<T>,
    t2: Vec<T>,
    semantic: Vec<T>,
    /// Conditioning vector before the shared SiLU.
    pub cond: Vec<T>,
    /// `silu(cond)`, the input to every modulation projection.
    pub act: Vec<T>,
}

pub fn cond_forward<T: Scalar>(p: &ModelParams<T>, c_noise: T, semantic: &[T]) -> Result<CondTape<T>> {
    let d = p.time_in.d_in();
    if semantic.len() != p.semantic_proj.d_in() {
        return Err(shape_err!(
            "semantic embedding has {} values, model expects {}",
            semantic.len(),
            p.semantic_proj.d_in()
        ));
    }
    let features = timestep_features(c_noise, d);
    let mut t1 = vec![T::zero(); d];
    linear(&features, 1, &p.time_in, &mut t1);
    let t2: Vec<T> = t1.iter().map(|&v| silu(v)).collect();
    let mut cond = vec![T::zero(); d];
    linear(&t2, 1, &p.time_out, &mut cond);
    let mut sem = vec![T::zero(); d];
    linear(semantic, 1, &p.semantic_proj, &mut sem);
    for (c, s) in cond.iter_mut().zip(&sem) {
        *c = *c + *s;
    }
    let act = cond.iter().map(|&v| silu(v)).collect();
    Ok(CondTape {
        features,
        t1,
        t2,
        semantic: semantic.to_vec(),
        cond,
        act,
    })
}

/// Pulls `d_act` (gradient wrt `silu(cond)`) back into the time MLP and
/// semantic projection.
pub fn cond_backward<T: Scalar>(p: &ModelParams<T>, tape: &CondTape<T>, d_act: &[T], g: &mut ModelParams<T>) {
    let d = tape.cond.len();
    let dcond: Vec<T> = d_act.iter().zip(&tape.cond).map(|(&a, &c)| a * silu_grad(c)).collect();
    linear_backward(&tape.semantic, 1, &p.semantic_proj, &dcond, &mut g.semantic_proj, None);
    let mut dt2 = vec![T::zero(); d];
    linear_backward(&tape.t2, 1, &p.time_out, &dcond, &mut g.time_out, Some(&mut dt2));
    let dt1: Vec<T> = dt2.iter().zip(&tape.t1).map(|(&a, &x)| a * silu_grad(x)).collect();
    linear_backward(&tape.features, 1, &p.time_in, &dt1, &mut g.time_in, None);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_semantic_is_pure_time() {
        let cfg = ModelConfig::toy();
        let mut p = ModelParams::<f64>::random(&cfg, 1).unwrap();
        let zero = vec![0.0; cfg.semantic_dim];
        let a = cond_forward(&p, 0.3, &zero).unwrap();
        p.semantic_proj.bias.fill(0.0);
        let a0 = cond_forward(&p, 0.3, &zero).unwrap();
        p.semantic_proj.weight.fill(0.0);
        let b = cond_forward(&p, 0.3, &zero).unwrap();
        assert_eq!(a0.cond, b.cond);
        assert_ne!(a.cond, b.cond);
    }

    #[test]
    fn distinct_sigmas_distinct_vectors() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let zero = vec![0.0; cfg.semantic_dim];
        let lo = libm::log(0.1) / 4.0;
        let hi = libm::log(10.0) / 4.0;
        assert_ne!(cond_forward(&p, lo, &zero).unwrap().cond, cond_forward(&p, hi, &zero).unwrap().cond);
    }

    #[test]
    fn rejects_wrong_semantic_dim() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        assert!(cond_forward(&p, 0.0, &[0.0; 3]).is_err());
    }
}
