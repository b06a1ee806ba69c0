use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the normalization threshold")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} patients")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("negative-pair probability requires distinct indices, got i = j = {0}")]
    SameIndex(usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("trace does not match parameters: {0}")]
    TraceMismatch(String),
    #[error("batch needs {requested} patients but the dataset has {available}")]
    InsufficientPatients { requested: usize, available: usize },
    #[error("invalid fold count k = {k} for {n} patients")]
    InvalidK { k: usize, n: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("k = {k} exceeds training set size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("AUC needs both classes present{}", context_suffix(.0))]
    SingleClass(Option<String>),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("covariance is degenerate (rank 0)")]
    DegenerateCovariance,
    #[error("t-test needs at least 2 samples per group, got {a} and {b}")]
    InsufficientSamples { a: usize, b: usize },
    #[error("t-test is degenerate: zero variance with different means")]
    DegenerateTest,
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },
    #[error("config error: {0}")]
    Config(String),
}

fn context_suffix(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { location: location.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
