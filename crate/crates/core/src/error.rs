use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("model is fully pruned: no alive non-zero parameter left")]
    FullyPruned,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: bad IDX magic 0x{found:08x}", path.display())]
    BadMagic { path: PathBuf, found: u32 },

    #[error("{}: truncated payload, expected {expected} bytes but found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
