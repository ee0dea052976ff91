//! EDM formulation: preconditioning, training noise and loss, the rho-spaced
//! sigma schedule, deterministic Euler/Heun sampling and LR-mean initial
//! noise.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::geometry::GenerationPlan;
use crate::model::{ForwardMode, Model, ModelInput, ModelParams, StreamStats};
use crate::rng::{normal, Rng};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Euler,
    #[default]
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EdmConfig {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    pub sampler: Sampler,
    /// Start sampling from the upsampled LR image plus noise rather than
    /// from pure noise.
    pub lr_init: bool,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            p_mean: -1.0,
            p_std: 1.4,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 20,
            sampler: Sampler::Heun,
            lr_init: true,
        }
    }
}

impl EdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(invalid!("need 0 < sigma_min < sigma_max"));
        }
        if self.steps == 0 {
            return Err(invalid!("steps must be >= 1"));
        }
        if !(self.p_std > 0.0) || !(self.sigma_data > 0.0) || !(self.rho > 0.0) {
            return Err(invalid!("p_std, sigma_data and rho must be positive"));
        }
        Ok(())
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn at(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / libm::sqrt(s2),
            c_in: 1.0 / libm::sqrt(s2),
            c_noise: libm::log(sigma) / 4.0,
        }
    }
}

/// Loss weight `(sigma^2 + sigma_d^2) / (sigma * sigma_d)^2`.
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / ((sigma * sigma_data) * (sigma * sigma_data))
}

/// `sigma = exp(z)`, `z ~ N(p_mean, p_std^2)`.
pub fn sample_train_sigma(cfg: &EdmConfig, rng: &mut Rng) -> f64 {
    libm::exp(cfg.p_mean + cfg.p_std * normal::<f64>(rng))
}

/// `c_skip * x + c_out * raw`, where `raw` is the network output on
/// `c_in * x`.
pub fn precondition<T: Scalar>(x: &Tensor<T>, raw: &Tensor<T>, pc: &Precond) -> Result<Tensor<T>> {
    if x.shape() != raw.shape() {
        return Err(crate::error::shape_err!("denoiser output {:?} vs input {:?}", raw.shape(), x.shape()));
    }
    let (s, o) = (T::of(pc.c_skip), T::of(pc.c_out));
    Tensor::new(x.shape(), x.data().iter().zip(raw.data()).map(|(&a, &b)| s * a + o * b).collect())
}

/// Everything the network needs besides the noisy state.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub lr_up: &'a Tensor<T>,
    pub semantic: &'a [T],
    pub offset: (usize, usize),
}

/// Preconditioned denoiser `D(x; sigma)` evaluated with the chosen forward
/// path.
pub fn denoise<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    sigma: f64,
    cond: &Conditioning<'_, T>,
    mode: ForwardMode<'_>,
    sigma_data: f64,
) -> Result<(Tensor<T>, Option<StreamStats>)> {
    if !(sigma > 0.0) {
        return Err(invalid!("denoiser needs sigma > 0, got {sigma}"));
    }
    let pc = Precond::at(sigma, sigma_data);
    let scaled = x.map(|v| v * T::of(pc.c_in));
    let input = ModelInput {
        noisy: &scaled,
        lr_up: cond.lr_up,
        c_noise: T::of(pc.c_noise),
        semantic: cond.semantic,
        offset: cond.offset,
    };
    let (raw, stats) = model.forward(&input, mode)?;
    Ok((precondition(x, &raw, &pc)?, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub sigma: f64,
}

/// Weighted denoising loss at a given `sigma` and noise draw, with the
/// denoiser supplied as a closure.
pub fn edm_loss_with<T: Scalar>(
    x0: &Tensor<T>,
    sigma: f64,
    noise: &Tensor<T>,
    sigma_data: f64,
    mut denoiser: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<f64> {
    let s = T::of(sigma);
    let noisy = Tensor::new(x0.shape(), x0.data().iter().zip(noise.data()).map(|(&a, &n)| a + s * n).collect())?;
    let d = denoiser(&noisy, sigma)?;
    let mse = d
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&a, &b)| (a - b).f64() * (a - b).f64())
        .sum::<f64>()
        / x0.len() as f64;
    Ok(loss_weight(sigma, sigma_data) * mse)
}

pub fn draw_noise<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| normal::<T>(rng))
}

/// Draws `sigma` and noise, returns the loss.
pub fn edm_loss<T: Scalar>(
    model: &Model<T>,
    x0: &Tensor<T>,
    cond: &Conditioning<'_, T>,
    cfg: &EdmConfig,
    rng: &mut Rng,
) -> Result<LossEval> {
    let sigma = sample_train_sigma(cfg, rng);
    let noise = draw_noise(x0.shape(), rng);
    let loss = edm_loss_with(x0, sigma, &noise, cfg.sigma_data, |x, s| {
        denoise(model, x, s, cond, ForwardMode::Full, cfg.sigma_data).map(|(d, _)| d)
    })?;
    Ok(LossEval { loss, sigma })
}

/// Loss and parameter gradient at a fixed `sigma` and noise draw.
pub fn edm_loss_grad_at<T: Scalar>(
    model: &Model<T>,
    x0: &Tensor<T>,
    sigma: f64,
    noise: &Tensor<T>,
    cond: &Conditioning<'_, T>,
    sigma_data: f64,
) -> Result<(f64, ModelParams<T>)> {
    let pc = Precond::at(sigma, sigma_data);
    let s = T::of(sigma);
    let noisy = Tensor::new(x0.shape(), x0.data().iter().zip(noise.data()).map(|(&a, &n)| a + s * n).collect())?;
    let scaled = noisy.map(|v| v * T::of(pc.c_in));
    let input = ModelInput {
        noisy: &scaled,
        lr_up: cond.lr_up,
        c_noise: T::of(pc.c_noise),
        semantic: cond.semantic,
        offset: cond.offset,
    };
    let (raw, tape) = model.forward_full_with_tape(&input)?;
    let d = precondition(&noisy, &raw, &pc)?;
    let n = x0.len() as f64;
    let w = loss_weight(sigma, sigma_data);
    let mut sq = 0.0;
    let coef = T::of(2.0 * w * pc.c_out / n);
    let d_raw: Vec<T> = d
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&a, &b)| {
            let e = a - b;
            sq += e.f64() * e.f64();
            coef * e
        })
        .collect();
    let d_raw = Tensor::new(x0.shape(), d_raw)?;
    let grads = model.backward(&tape, &d_raw)?;
    Ok((w * sq / n, grads))
}

/// `[sigma_0 .. sigma_{steps-1}, 0]`, rho-spaced between `sigma_max` and
/// `sigma_min`.
pub fn sigma_schedule(cfg: &EdmConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.steps == 1 {
        return Ok(alloc::vec![cfg.sigma_max, 0.0]);
    }
    let inv = 1.0 / cfg.rho;
    let (a, b) = (libm::pow(cfg.sigma_max, inv), libm::pow(cfg.sigma_min, inv));
    let last = (cfg.steps - 1) as f64;
    let mut out: Vec<f64> = (0..cfg.steps)
        .map(|i| libm::pow(a + i as f64 / last * (b - a), cfg.rho))
        .collect();
    out[0] = cfg.sigma_max;
    out[cfg.steps - 1] = cfg.sigma_min;
    out.push(0.0);
    Ok(out)
}

fn axpy<T: Scalar>(x: &Tensor<T>, a: T, d: &[T]) -> Tensor<T> {
    let data = x.data().iter().zip(d).map(|(&xv, &dv)| xv + a * dv).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn derivative<T: Scalar>(x: &Tensor<T>, denoised: &Tensor<T>, sigma: f64) -> Vec<T> {
    let inv = T::of(1.0 / sigma);
    x.data().iter().zip(denoised.data()).map(|(&a, &b)| (a - b) * inv).collect()
}

/// One deterministic step from `sigma` to `sigma_next`.
pub fn sampler_step<T: Scalar>(
    x: &Tensor<T>,
    sigma: f64,
    sigma_next: f64,
    denoise_fn: &mut impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
    sampler: Sampler,
) -> Result<Tensor<T>> {
    if !(sigma > sigma_next && sigma_next >= 0.0) {
        return Err(invalid!("sampler step needs sigma {sigma} > sigma_next {sigma_next} >= 0"));
    }
    let d0 = derivative(x, &denoise_fn(x, sigma)?, sigma);
    let h = T::of(sigma_next - sigma);
    let euler = axpy(x, h, &d0);
    if sampler == Sampler::Euler || sigma_next == 0.0 {
        return Ok(euler);
    }
    let d1 = derivative(&euler, &denoise_fn(&euler, sigma_next)?, sigma_next);
    let half = T::of(0.5);
    let avg: Vec<T> = d0.iter().zip(&d1).map(|(&a, &b)| (a + b) * half).collect();
    Ok(axpy(x, h, &avg))
}

/// Runs the full schedule from `x_t`.
pub fn sample<T: Scalar>(
    x_t: Tensor<T>,
    cfg: &EdmConfig,
    mut denoise_fn: impl FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let sigmas = sigma_schedule(cfg)?;
    let mut x = x_t;
    for w in sigmas.windows(2) {
        x = sampler_step(&x, w[0], w[1], &mut denoise_fn, cfg.sampler)?;
        x.check_finite("sampler step")?;
    }
    Ok(x)
}

/// `lr_up + sigma_max * eps`, or plain `sigma_max * eps` when `lr_mean` is off.
pub fn init_noise_from_lr<T: Scalar>(lr_up: &Tensor<T>, sigma_max: f64, lr_mean: bool, rng: &mut Rng) -> Tensor<T> {
    let s = T::of(sigma_max);
    let data = lr_up
        .data()
        .iter()
        .map(|&m| {
            let e = s * normal::<T>(rng);
            if lr_mean {
                m + e
            } else {
                e
            }
        })
        .collect();
    Tensor::new(lr_up.shape(), data).expect("same shape")
}

/// Samples with the model under the chosen forward path; returns the final
/// state and the largest cache high-water mark seen.
pub fn sample_with_model<T: Scalar>(
    model: &Model<T>,
    x_t: Tensor<T>,
    cond: &Conditioning<'_, T>,
    cfg: &EdmConfig,
    plan: Option<&GenerationPlan>,
) -> Result<(Tensor<T>, StreamStats)> {
    let mut agg = StreamStats::default();
    let mode = plan.map_or(ForwardMode::Full, ForwardMode::Streamed);
    let out = sample(x_t, cfg, |x, s| {
        let (d, stats) = denoise(model, x, s, cond, mode, cfg.sigma_data)?;
        if let Some(st) = stats {
            agg.high_water_blocks = agg.high_water_blocks.max(st.high_water_blocks);
            agg.high_water_bytes = agg.high_water_bytes.max(st.high_water_bytes);
            agg.peak_tile_bytes = agg.peak_tile_bytes.max(st.peak_tile_bytes);
            if agg.residency.is_empty() {
                agg.residency = st.residency;
            }
        }
        Ok(d)
    })?;
    Ok((out, agg))
}
