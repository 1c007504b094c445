use std::path::PathBuf;

use crate::tensor::Shape;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("node {index} does not belong to this graph")]
    Detached { index: usize },

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("cosine similarity of a zero-norm vector")]
    ZeroNorm,

    #[error("FFT size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("ppm {path}: {reason}")]
    Ppm { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {components}")]
    NonFinite { iteration: usize, components: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
