use std::io;

use thiserror::Error;

/// Errors raised by the numeric, training and evaluation routines.
#[derive(Debug, Error)]
pub enum Co2Error {
    #[error("cannot normalize a vector with norm {norm:e}")]
    ZeroVector { norm: f64 },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("support violation at index {index}: p = {p} but q = 0")]
    SupportViolation { index: usize, p: f64 },

    #[error("not a probability vector: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label smoothing epsilon must lie in [0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("batch of {batch} keys exceeds queue capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },

    #[error("queue capacity {capacity} is not a multiple of batch size {batch}")]
    IndivisibleCapacity { batch: usize, capacity: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes in {0} file")]
    BadMagic(&'static str),

    #[error("unsupported {kind} file version {version}")]
    UnsupportedVersion { kind: &'static str, version: u16 },

    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("class {0} has no training examples")]
    DegenerateSplit(usize),

    #[error("not enough labelled examples: {0}")]
    InsufficientLabels(String),

    #[error("metrics stream is empty")]
    EmptyStream,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("metrics sink failed: {0}")]
    SinkFailure(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Co2Error>;
