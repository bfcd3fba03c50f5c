use std::path::PathBuf;

use cats_autodiff::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::nifti::NiftiError;

#[derive(Debug, Error)]
pub enum CatsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: NiftiError,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName { kind: &'static str, name: String, available: String },
}

impl CatsError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CatsError::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatsError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CatsError::Config { .. } | CatsError::UnknownName { .. } => 2,
            CatsError::Numerical(_) => 4,
            CatsError::Tensor(_) => 4,
            CatsError::Io { .. } | CatsError::Nifti { .. } | CatsError::Checkpoint(_) | CatsError::Data(_) => 3,
        }
    }
}

pub type Result<T, E = CatsError> = std::result::Result<T, E>;
