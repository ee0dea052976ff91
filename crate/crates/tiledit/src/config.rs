//! JSON run configuration. Every key is optional; missing keys take the
//! defaults below. CLI flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiledit_core::diffusion::EdmConfig;
use tiledit_core::geometry::Trajectory;
use tiledit_core::imaging::{CropMode, CropPolicy, DegradationConfig};
use tiledit_core::model::ModelConfig;
use tiledit_core::Precision;

use crate::error::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "TILEDIT_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub edm: EdmConfig,
    /// Upsampling factor per round.
    pub factor: usize,
    /// Tile side in blocks for streamed generation.
    pub tiles_n: usize,
    /// Tile order; `null` picks row-major unless the image is wider than tall.
    pub trajectory: Option<Trajectory>,
    pub seed: u64,
    pub precision: Precision,
    pub guidance: Guidance,
    pub embedding: EmbeddingSource,
    /// Refuse tiles whose estimated working memory exceeds this.
    pub memory_budget_bytes: Option<usize>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            edm: EdmConfig::default(),
            factor: 4,
            tiles_n: 2,
            trajectory: None,
            seed: 0,
            precision: Precision::F32,
            guidance: Guidance::default(),
            embedding: EmbeddingSource::default(),
            memory_budget_bytes: None,
            train: TrainConfig::default(),
        }
    }
}

/// Prompt-difference guidance of the image embedding; inactive while both
/// prompts are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Guidance {
    pub positive: String,
    pub negative: String,
    pub alpha: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Self { positive: String::new(), negative: String::new(), alpha: 0.5 }
    }
}

impl Guidance {
    pub fn is_active(&self) -> bool {
        !(self.positive.is_empty() && self.negative.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingSource {
    /// The built-in seeded encoder applied to the low-resolution input.
    Toy { seed: u64 },
    /// A precomputed `SEMB` file.
    File { path: PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Toy { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    /// Linear decay from `lr` after warmup to zero at `steps`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Images per gradient step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Linear ramp of the learning rate over the first steps.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `null` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub crop: CropPolicy,
    /// `factor` and `seed` are overwritten per sample by the training loop.
    pub degradation: DegradationConfig,
    /// Largest random patch-grid offset of the crop's top-left token.
    pub max_offset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            batch_size: 320,
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            schedule: LrSchedule::Linear,
            warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(0.1),
            checkpoint_every: 0,
            crop: CropPolicy { target: 512, mode: CropMode::RandomChoice },
            degradation: DegradationConfig::default(),
            max_offset: 256,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = step.saturating_sub(self.warmup_steps) as f64 / span;
                (1.0 - t).max(0.0)
            }
        };
        self.lr * warm * decay
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Explicit path, else the path in [`CONFIG_ENV`], else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("factor must be >= 1".into()));
        }
        if self.tiles_n == 0 {
            return Err(Error::Config("tiles_n must be >= 1".into()));
        }
        self.model.validate()?;
        self.edm.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("train: need lr > 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::from_json(r#"{"seed": 9, "model": {"layers": 2}, "train": {"lr": 0.001}}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.layers, 2);
        assert_eq!(c.model.hidden, ModelConfig::toy().hidden);
        assert_eq!(c.factor, 4);
        assert_eq!(c.guidance.alpha, 0.5);
        assert_eq!(c.train.beta2, 0.99);
        assert_eq!(c.train.lr, 0.001);
    }

    #[test]
    fn lr_schedule_shapes() {
        let mut t = TrainConfig {
            lr: 1.0,
            steps: 100,
            warmup_steps: 10,
            schedule: LrSchedule::Constant,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 0.1);
        assert_eq!(t.lr_at(9), 1.0);
        assert_eq!(t.lr_at(50), 1.0);
        t.schedule = LrSchedule::Linear;
        assert_eq!(t.lr_at(9), 1.0);
        assert!((t.lr_at(55) - 0.5).abs() < 1e-12);
        assert!(t.lr_at(99) < 0.02);
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.embedding = EmbeddingSource::File { path: "x.semb".into() };
        c.trajectory = Some(Trajectory::ColumnMajor);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values_and_unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"factor": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tiles_n": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tile_n": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"head_dim": 6, "hidden": 24}}"#).is_err());
    }
}
