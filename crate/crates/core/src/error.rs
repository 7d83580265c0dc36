use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("model is not stable (spectral radius {0})")]
    Unstable(f64),
    #[error("matrix is singular: {0}")]
    Singular(&'static str),
    #[error("simulator has not settled (output spread {spread} over pre-step window)")]
    NotSettled { spread: f64 },
    #[error("step amplitude must be nonzero")]
    ZeroAmplitude,
    #[error("Hankel matrix has numerical rank 0")]
    RankDeficient,
    #[error("not enough samples: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("unknown PMU id {0} (expected 1..=6)")]
    UnknownPmu(u8),
    #[error("model file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
