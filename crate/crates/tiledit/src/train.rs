//! Toy training: crop, degrade, upsample the degraded input, EDM loss,
//! hand-written backward, Adam or SGD with momentum.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use tiledit_core::diffusion::{draw_noise, edm_loss_grad_at, sample_train_sigma, Conditioning};
use tiledit_core::imaging::{crop_training, degrade, resize_bicubic, DegradationConfig, Image};
use tiledit_core::model::{Model, ModelParams};
use tiledit_core::rng::{derive_seed, rng};
use tiledit_core::semantic::{SemanticEncoder, ToyEncoder};
use tiledit_core::{Scalar, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{EmbeddingSource, OptimizerKind, RunConfig};
use crate::error::{Error, Result};
use crate::io::{load_image, ImageFormat};

pub struct TrainState<T> {
    pub model: Model<T>,
    /// Completed optimizer steps.
    pub step: usize,
    /// First moment (Adam) or velocity (SGD).
    pub m: ModelParams<T>,
    /// Second moment; unused by SGD.
    pub v: ModelParams<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>) -> Self {
        let m = model.params.zeros_like();
        let v = model.params.zeros_like();
        Self { model, step: 0, m, v }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.model.params;
        let tensors = p
            .tensors()
            .into_iter()
            .chain(self.m.tensors().into_iter().map(|(n, t)| (format!("opt.m.{n}"), t)))
            .chain(self.v.tensors().into_iter().map(|(n, t)| (format!("opt.v.{n}"), t)));
        let meta = BTreeMap::from([("step".to_string(), self.step.to_string())]);
        checkpoint::encode(&self.model.cfg, tensors, &meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Restores a training checkpoint. Plain model checkpoints resume with
    /// fresh optimizer state at step 0.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let model = ck.model::<T>(Some(&cfg.model))?;
        let mut state = Self::new(model);
        if let Some(step) = ck.meta.get("step") {
            state.step = step
                .parse()
                .map_err(|_| Error::malformed("checkpoint", format!("bad step {step:?}")))?;
            ck.fill(&mut state.m, "opt.m.")?;
            ck.fill(&mut state.v, "opt.v.")?;
        }
        Ok(state)
    }

    pub fn load(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Mean EDM loss over the batch.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub sigmas: Vec<f64>,
    /// Patch-grid offsets of each sample's top-left token.
    pub offsets: Vec<(usize, usize)>,
}

/// One training example drawn for (`step`, `slot`).
pub struct Example<T> {
    pub x0: Tensor<T>,
    pub lr_up: Tensor<T>,
    pub semantic: Vec<T>,
    pub offset: (usize, usize),
    pub sigma: f64,
    pub noise: Tensor<T>,
}

pub fn training_encoder(cfg: &RunConfig) -> Result<ToyEncoder> {
    match cfg.embedding {
        EmbeddingSource::Toy { seed } => Ok(ToyEncoder::new(cfg.model.semantic_dim, seed)),
        EmbeddingSource::File { .. } => Err(Error::Config("training computes embeddings with the built-in encoder".into())),
    }
}

/// Deterministic in (`cfg.seed`, `step`, `slot`).
pub fn draw_example<T: Scalar>(
    data: &[Image],
    cfg: &RunConfig,
    enc: &ToyEncoder,
    step: usize,
    slot: usize,
) -> Result<Example<T>> {
    let seed = derive_seed(derive_seed(cfg.seed, step as u64), slot as u64);
    let mut r = rng(seed);
    let img = &data[r.random_range(0..data.len())];
    let hr = crop_training(img, &cfg.train.crop, derive_seed(seed, 1))?;
    let b = cfg.model.block_size;
    if hr.height() % b != 0 || hr.width() % b != 0 {
        return Err(Error::Config(format!(
            "training crop {}x{} is not a multiple of the block size {b}",
            hr.height(),
            hr.width()
        )));
    }
    let deg = DegradationConfig { factor: cfg.factor, seed: derive_seed(seed, 2), ..cfg.train.degradation.clone() };
    let lr = degrade(&hr, &deg)?;
    let lr_up = resize_bicubic(&lr, hr.height(), hr.width())?;
    let semantic = enc.encode_image(&lr).values.iter().map(|&v| T::of(v as f64)).collect();
    let max = cfg.train.max_offset;
    let offset = (r.random_range(0..=max), r.random_range(0..=max));
    let sigma = sample_train_sigma(&cfg.edm, &mut r);
    let x0: Tensor<T> = hr.to_model_range();
    let noise = draw_noise(x0.shape(), &mut r);
    Ok(Example { x0, lr_up: lr_up.to_model_range(), semantic, offset, sigma, noise })
}

pub fn grad_norm<T: Scalar>(g: &ModelParams<T>) -> f64 {
    g.tensors().iter().map(|(_, t)| t.sum_sq().f64()).sum::<f64>().sqrt()
}

/// One optimizer step on `cfg.train.batch_size` fresh examples.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[Image],
    cfg: &RunConfig,
    enc: &ToyEncoder,
) -> Result<StepLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::new()));
    }
    let batch = cfg.train.batch_size;
    let mut total = state.model.params.zeros_like();
    let mut loss = 0.0;
    let mut sigmas = Vec::with_capacity(batch);
    let mut offsets = Vec::with_capacity(batch);
    for slot in 0..batch {
        let ex = draw_example::<T>(data, cfg, enc, state.step, slot)?;
        let cond = Conditioning { lr_up: &ex.lr_up, semantic: &ex.semantic, offset: ex.offset };
        let (l, g) = edm_loss_grad_at(&state.model, &ex.x0, ex.sigma, &ex.noise, &cond, cfg.edm.sigma_data)?;
        loss += l;
        for ((_, acc), (_, gt)) in total.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(gt)?;
        }
        sigmas.push(ex.sigma);
        offsets.push(ex.offset);
    }
    let inv = T::of(1.0 / batch as f64);
    for (_, t) in total.tensors_mut() {
        t.scale(inv);
    }
    let norm = grad_norm(&total);
    if !norm.is_finite() {
        return Err(tiledit_core::Error::NonFinite("gradient").into());
    }
    if let Some(clip) = cfg.train.grad_clip {
        if norm > clip {
            let s = T::of(clip / norm);
            for (_, t) in total.tensors_mut() {
                t.scale(s);
            }
        }
    }
    apply_update(state, &total, cfg);
    state.step += 1;
    Ok(StepLog { step: state.step, loss: loss / batch as f64, grad_norm: norm, sigmas, offsets })
}

fn apply_update<T: Scalar>(state: &mut TrainState<T>, g: &ModelParams<T>, cfg: &RunConfig) {
    let t = &cfg.train;
    let grads = g.tensors();
    let params = state.model.params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    match t.optimizer {
        OptimizerKind::Adam => {
            let k = (state.step + 1) as i32;
            let c1 = 1.0 - t.beta1.powi(k);
            let c2 = 1.0 - t.beta2.powi(k);
            let (b1, b2) = (T::of(t.beta1), T::of(t.beta2));
            let (lr, eps) = (T::of(t.lr_at(state.step)), T::of(t.eps));
            let (c1, c2) = (T::of(c1), T::of(c2));
            let one = T::one();
            let wd = T::of(t.weight_decay);
            for (((_, p), (_, m)), ((_, v), (_, gt))) in params.into_iter().zip(ms).zip(vs.into_iter().zip(&grads)) {
                for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(gt.data()) {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let mhat = *mv / c1;
                    let vhat = *vv / c2;
                    *pv = *pv - lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                }
            }
        }
        OptimizerKind::Sgd => {
            let (mu, lr) = (T::of(t.momentum), T::of(t.lr_at(state.step)));
            let wd = T::of(t.weight_decay);
            for (((_, p), (_, m)), (_, gt)) in params.into_iter().zip(ms).zip(&grads) {
                for ((pv, mv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(gt.data()) {
                    *mv = mu * *mv + gv;
                    *pv = *pv - lr * (*mv + wd * *pv);
                }
            }
        }
    }
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    data: &[Image],
    cfg: &RunConfig,
    until: usize,
    mut on_step: impl FnMut(&TrainState<T>, &StepLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let enc = training_encoder(cfg)?;
    while state.step < until {
        let log = train_step(state, data, cfg, &enc)?;
        on_step(state, &log)?;
    }
    Ok(())
}

/// Every PNG/PPM file directly inside `dir`, in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    paths.iter().map(load_image).collect()
}
