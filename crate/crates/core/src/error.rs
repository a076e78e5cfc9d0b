use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at step {step}, epoch {epoch}: {reason}")]
    Divergence {
        step: usize,
        epoch: usize,
        reason: String,
    },

    #[error("optimizer received a non-finite gradient at update {update}")]
    NonFiniteGradient { update: u64 },

    #[error("numerical overflow in coupling layer {layer}")]
    NumericalOverflow { layer: usize },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u8, supported: u8 },

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("extrapolation failed: {0}")]
    Extrapolation(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("call budget exceeded: declared {declared}, used {used} (over by {})", used - declared)]
    BudgetExceeded { declared: u64, used: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
