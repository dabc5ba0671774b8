use thiserror::Error;

use crate::network::ModelParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("noise is not orthogonal to the signal (|cos| = {cosine:e})")]
    NonOrthogonal { cosine: f64 },

    #[error("Gram matrix of the signal-noise basis is singular")]
    SingularGram,

    #[error("theory regime violated: log argument {argument} must exceed 1")]
    RegimeViolated { argument: f64 },

    /// Training produced a non-finite loss or gradient. `checkpoint` holds the
    /// parameters that were the input of the offending step.
    #[error("non-finite {quantity} at epoch {epoch}")]
    NonFinite {
        epoch: u64,
        quantity: &'static str,
        checkpoint: Box<ModelParams>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
