use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("kernel {kernel:?} larger than input {input:?}")]
    KernelTooLarge { kernel: (usize, usize), input: (usize, usize) },
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("prior branch configured but no box given")]
    MissingBox,
    #[error("box width and height must be positive, got ({0}, {1})")]
    NonPositiveBox(f32, f32),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any parameter")]
    DisconnectedLoss,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("at most {max} glyph classes are available, requested {requested}")]
    TooManyClasses { requested: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("exclusion box covers the whole map")]
    EmptyExterior,
    #[error("map has no positive value")]
    NonPositiveMax,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("implementations disagree: max abs diff {diff:e} > {tol:e}")]
    Disagreement { diff: f64, tol: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shapes(lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
