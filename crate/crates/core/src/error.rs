use std::path::PathBuf;

use thiserror::Error;

/// Shape and numeric failures raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?} for {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Top-level error for everything above the tensor layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("checkpoint format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 2: usage/configuration, 3: data or model incompatibility (including
    /// corrupt files), 4: numerical failure, 1: anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Incompatible(_) | Error::Json { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Tensor(TensorError::NonFinite(_)) => 4,
            Error::Tensor(_) => 3,
            Error::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
