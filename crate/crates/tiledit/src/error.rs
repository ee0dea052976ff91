use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tiledit_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("checkpoint tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("checkpoint tensor `{0}` is truncated")]
    TruncatedTensor(String),
    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was written for a different model config: {0}")]
    ConfigMismatch(String),
    #[error("embedding has dim {found}, model expects {expected}")]
    EmbeddingDim { found: usize, expected: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("tile of {n}x{n} blocks needs about {needed} bytes but the budget is {budget}; try --tiles-n {suggested}")]
    OverBudget { n: usize, needed: usize, budget: usize, suggested: usize },
    #[error("no training images in {0}")]
    EmptyDataset(PathBuf),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed { what, detail: detail.into() }
    }

    /// Stable identifier for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::UnsupportedFormat(_) => "unsupported_format",
            Error::Malformed { .. } => "malformed",
            Error::MissingTensor(_) => "missing_tensor",
            Error::TruncatedTensor(_) => "truncated_tensor",
            Error::TensorShape { .. } => "tensor_shape",
            Error::Version { .. } => "version",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::EmbeddingDim { .. } => "embedding_dim",
            Error::Config(_) => "config",
            Error::OverBudget { .. } => "over_budget",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::CheckFailed(_) => "check_failed",
        }
    }
}
