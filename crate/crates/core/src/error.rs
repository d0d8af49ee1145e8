use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("cannot reshape {from} elements into {to} elements")]
    ElementCountMismatch { from: usize, to: usize },
    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite evaluation during finite-difference check at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("orthogonality loss needs at least 2 latent rows, got {0}")]
    TooFewLatents(usize),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("diffusion step {step} out of range for {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unknown interaction class {0:?}")]
    UnknownClass(String),
    #[error("format or version mismatch: {0}")]
    FormatVersionMismatch(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
