use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("run diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("problem size {size} exceeds cap {cap}; {hint}")]
    SizeCap { size: usize, cap: usize, hint: &'static str },

    #[error("Euler step {eta} is unstable; largest stable step is {max_eta}")]
    Unstable { eta: f64, max_eta: f64 },

    #[error("activation `{0}` has no uniform bound (g7 absent)")]
    UnboundedActivation(&'static str),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
