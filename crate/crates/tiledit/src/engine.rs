//! Upsampling runs, memory reports and the streamed/full equivalence check.

use std::fmt;

use tiledit_core::diffusion::{init_noise_from_lr, sample_with_model, Conditioning};
use tiledit_core::geometry::{peak_memory_estimate, plan_generation_with, GenerationPlan, Trajectory};
use tiledit_core::imaging::{resize_bicubic, Image};
use tiledit_core::model::{Model, ModelConfig, ModelInput, StreamStats};
use tiledit_core::rng::{derive_seed, normal, rng};
use tiledit_core::semantic::{text_guidance, SemanticEmbedding, SemanticEncoder, ToyEncoder};
use tiledit_core::{Precision, Scalar, Tensor};

use crate::config::{EmbeddingSource, RunConfig};
use crate::embedding::load_embedding_file;
use crate::error::{Error, Result};

const NOISE_STREAM: u64 = 0x1A17;

/// Global embedding for `lr` per the configured source, with prompt guidance
/// when prompts are set.
pub fn semantic_embedding(lr: &Image, cfg: &RunConfig) -> Result<SemanticEmbedding> {
    let dim = cfg.model.semantic_dim;
    match &cfg.embedding {
        EmbeddingSource::Toy { seed } => {
            let enc = ToyEncoder::new(dim, *seed);
            let e = enc.encode_image(lr);
            if cfg.guidance.is_active() {
                let g = &cfg.guidance;
                Ok(text_guidance(&e, &g.positive, &g.negative, g.alpha, &enc)?)
            } else {
                Ok(e)
            }
        }
        EmbeddingSource::File { path } => {
            if cfg.guidance.is_active() {
                return Err(Error::Config(
                    "prompt guidance needs the built-in encoder; apply guidance before writing the embedding file".into(),
                ));
            }
            load_embedding_file(path, Some(dim))
        }
    }
}

/// Rounds up to whole blocks.
pub fn padded_dims(h: usize, w: usize, block: usize) -> (usize, usize) {
    (h.div_ceil(block) * block, w.div_ceil(block) * block)
}

/// Fails with a suggested tile size when the estimated peak exceeds the
/// configured budget.
pub fn check_budget(cfg: &RunConfig, plan: &GenerationPlan, bytes_per_scalar: usize) -> Result<()> {
    let Some(budget) = cfg.memory_budget_bytes else {
        return Ok(());
    };
    let m = &cfg.model;
    let scan = plan.residency_bound() - plan.n;
    let needed_for = |n: usize| {
        peak_memory_estimate(
            n,
            scan,
            m.working_bytes_per_block(bytes_per_scalar),
            m.cache_bytes_per_block(bytes_per_scalar),
            0,
        )
    };
    let needed = needed_for(plan.n);
    if needed <= budget {
        return Ok(());
    }
    let suggested = (1..plan.n).rev().find(|&k| needed_for(k) <= budget).unwrap_or(1);
    Err(Error::OverBudget { n: plan.n, needed, budget, suggested })
}

#[derive(Debug, Clone)]
pub struct Upsampled {
    pub image: Image,
    /// Largest cache residency observed over all denoiser evaluations.
    pub stats: StreamStats,
    pub plan: GenerationPlan,
}

/// Upsamples `lr` by `cfg.factor` with the streamed sampler.
pub fn upsample<T: Scalar>(lr: &Image, model: &Model<T>, cfg: &RunConfig) -> Result<Upsampled> {
    cfg.validate()?;
    let semantic = semantic_embedding(lr, cfg)?;
    upsample_with_embedding(lr, model, cfg, &semantic)
}

pub fn upsample_with_embedding<T: Scalar>(
    lr: &Image,
    model: &Model<T>,
    cfg: &RunConfig,
    semantic: &SemanticEmbedding,
) -> Result<Upsampled> {
    if semantic.dim() != model.cfg.semantic_dim {
        return Err(Error::EmbeddingDim { found: semantic.dim(), expected: model.cfg.semantic_dim });
    }
    let (h, w) = lr.dims();
    let (th, tw) = (h * cfg.factor, w * cfg.factor);
    let b = model.cfg.block_size;
    let (ph, pw) = padded_dims(th, tw, b);
    let up = resize_bicubic(lr, th, tw)?.reflect_pad(ph, pw)?;
    let lr_up: Tensor<T> = up.to_model_range();

    let plan = plan_generation_with(ph / b, pw / b, cfg.tiles_n, cfg.trajectory)?;
    check_budget(cfg, &plan, T::BYTES)?;

    let sem: Vec<T> = semantic.values.iter().map(|&v| T::of(v as f64)).collect();
    let cond = Conditioning { lr_up: &lr_up, semantic: &sem, offset: (0, 0) };
    let mut r = rng(derive_seed(cfg.seed, NOISE_STREAM));
    let x_t = init_noise_from_lr(&lr_up, cfg.edm.sigma_max, cfg.edm.lr_init, &mut r);
    let (x0, stats) = sample_with_model(model, x_t, &cond, &cfg.edm, Some(&plan))?;
    let image = Image::from_model_range(&x0)?.crop(0, 0, th, tw)?;
    Ok(Upsampled { image, stats, plan })
}

/// Seed of round `round`; round 0 uses the master seed itself.
pub fn round_seed(master: u64, round: usize) -> u64 {
    if round == 0 {
        master
    } else {
        derive_seed(master, round as u64)
    }
}

/// Feeds each round's output back in as the next round's input.
pub fn iterative_upsample<T: Scalar>(
    img: &Image,
    rounds: usize,
    model: &Model<T>,
    cfg: &RunConfig,
) -> Result<(Image, Vec<Upsampled>)> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be >= 1".into()));
    }
    let mut current = img.clone();
    let mut runs = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let c = RunConfig { seed: round_seed(cfg.seed, round), ..cfg.clone() };
        let run = upsample(&current, model, &c)?;
        current = run.image.clone();
        runs.push(run);
    }
    Ok((current, runs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    /// Grid in blocks after padding.
    pub grid: (usize, usize),
    pub n: usize,
    pub trajectory: Trajectory,
    pub schedule: String,
    pub per_batch: Vec<usize>,
    pub high_water_blocks: usize,
    pub bound_blocks: usize,
    /// Working bytes per block of a tile.
    pub m1: usize,
    /// Cached bytes per block.
    pub m2: usize,
    /// Parameter bytes.
    pub c: usize,
    pub estimate_bytes: usize,
    pub measured_bytes: Option<usize>,
}

impl MemoryReport {
    pub fn cache_term(&self) -> usize {
        self.bound_blocks * self.m2
    }
}

/// Schedule and `n^2 M1 + (w + n) M2 + C` breakdown for an image of
/// `height x width` pixels.
pub fn plan_report(
    height: usize,
    width: usize,
    model: &ModelConfig,
    n: usize,
    trajectory: Option<Trajectory>,
    precision: Precision,
) -> Result<MemoryReport> {
    model.validate()?;
    let bytes = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let b = model.block_size;
    let (ph, pw) = padded_dims(height, width, b);
    let plan = plan_generation_with(ph / b, pw / b, n, trajectory)?;
    plan.validate()?;
    let res = plan.simulate_residency();
    let m1 = model.working_bytes_per_block(bytes);
    let m2 = model.cache_bytes_per_block(bytes);
    let c = tiledit_core::model::ModelParams::<f32>::expected_shapes(model)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum::<usize>()
        * bytes;
    let bound = plan.residency_bound();
    Ok(MemoryReport {
        grid: (plan.h, plan.w),
        n,
        trajectory: plan.trajectory,
        schedule: plan.report(),
        per_batch: res.per_batch,
        high_water_blocks: res.high_water,
        bound_blocks: bound,
        m1,
        m2,
        c,
        estimate_bytes: peak_memory_estimate(n, bound - n, m1, m2, c),
        measured_bytes: None,
    })
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.schedule)?;
        writeln!(f, "high_water_blocks {} bound {}", self.high_water_blocks, self.bound_blocks)?;
        writeln!(
            f,
            "tile_bytes {} cache_bytes {} param_bytes {} estimate_bytes {}",
            self.n * self.n * self.m1,
            self.cache_term(),
            self.c,
            self.estimate_bytes
        )?;
        if let Some(m) = self.measured_bytes {
            writeln!(f, "measured_cache_bytes {m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceCase {
    pub grid: (usize, usize),
    pub n: usize,
    pub max_abs: f64,
    pub tolerance: f64,
}

impl EquivalenceCase {
    pub fn pass(&self) -> bool {
        self.max_abs <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub precision: Precision,
    pub cases: Vec<EquivalenceCase>,
}

impl EquivalenceReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(EquivalenceCase::pass)
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "grid {}x{} n={} max_abs={:.3e} tol={:.0e} {}",
                c.grid.0,
                c.grid.1,
                c.n,
                c.max_abs,
                c.tolerance,
                if c.pass() { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.pass() { "PASS" } else { "FAIL" })
    }
}

pub const EQUIVALENCE_GRIDS: [(usize, usize); 4] = [(1, 1), (2, 3), (3, 2), (4, 4)];

/// Random-weight toy model: streamed forward against the whole-image
/// forward for every grid and `n` in `{1, 2, max}`.
pub fn verify_equivalence(seed: u64, precision: Precision) -> Result<EquivalenceReport> {
    let cases = match precision {
        Precision::F32 => equivalence_cases::<f32>(seed, 1e-5)?,
        Precision::F64 => equivalence_cases::<f64>(seed, 1e-10)?,
    };
    Ok(EquivalenceReport { precision, cases })
}

fn equivalence_cases<T: Scalar>(seed: u64, tolerance: f64) -> Result<Vec<EquivalenceCase>> {
    let cfg = ModelConfig::toy();
    let model = Model::<T>::random(cfg, seed)?;
    let b = cfg.block_size;
    let mut out = Vec::new();
    for (k, &(gh, gw)) in EQUIVALENCE_GRIDS.iter().enumerate() {
        let mut r = rng(derive_seed(seed, k as u64 + 1));
        let shape = [gh * b, gw * b, 3];
        let noisy = Tensor::from_fn(&shape, |_| normal::<T>(&mut r));
        let lr_up = Tensor::from_fn(&shape, |_| normal::<T>(&mut r) * T::of(0.5));
        let semantic: Vec<T> = (0..cfg.semantic_dim).map(|_| normal::<T>(&mut r)).collect();
        let input = ModelInput { noisy: &noisy, lr_up: &lr_up, c_noise: T::of(0.3), semantic: &semantic, offset: (3, 5) };
        let full = model.forward_full(&input)?;
        let mut ns = vec![1, 2, gh.max(gw)];
        ns.dedup();
        for n in ns {
            let plan = plan_generation_with(gh, gw, n, None)?;
            let (streamed, _) = model.forward_streamed(&input, &plan)?;
            out.push(EquivalenceCase {
                grid: (gh, gw),
                n,
                max_abs: full.max_abs_diff(&streamed)?.f64(),
                tolerance,
            });
        }
    }
    Ok(out)
}
