use std::path::PathBuf;

use crate::trainer::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("derivative order {order} unsupported by activation {activation}")]
    OrderUnsupported { order: usize, activation: String },

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),

    #[error("problem requires u_yy but none was supplied")]
    MissingSecondDerivative,

    #[error("empty {0} batch")]
    EmptyBatch(&'static str),

    #[error("non-finite gradient entry at flat index {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_checkpoint: Option<Box<Checkpoint>>,
    },

    #[error("eigen-decomposition failed: {0}")]
    EigenFailure(String),

    #[error("spectrum has eigenvalue {re} + {im}i; the real-spectrum hypothesis is violated")]
    ComplexSpectrum { re: f64, im: f64 },

    #[error("only {found} usable eigenvalues in window, at least {needed} required")]
    InsufficientSpectrum { found: usize, needed: usize },

    #[error("every sample lies inside the classification dead zone")]
    AllUnclassified,

    #[error("invalid run spec:\n  - {}", .0.join("\n  - "))]
    InvalidSpec(Vec<String>),

    #[error("output directory {0} already exists (use force to overwrite)")]
    OutputExists(PathBuf),

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
