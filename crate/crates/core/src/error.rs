use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum DemeshError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: {what} must be even, found {found}")]
    OddExtent {
        op: &'static str,
        what: &'static str,
        found: usize,
    },
    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: non-finite value encountered{context}")]
    NonFinite { op: &'static str, context: String },
    #[error("degenerate landmarks: eye centers coincide at ({x}, {y})")]
    DegenerateLandmarks { x: f64, y: f64 },
    #[error("{op}: mask value {value} at element {index} is not binary")]
    NonBinaryMask {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("unknown feature tap `{0}`")]
    UnknownTap(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step} (lr {lr:e}, batch {batch:?}): {msg}")]
    Diverged {
        step: usize,
        lr: f64,
        batch: Vec<String>,
        msg: String,
    },
}

impl DemeshError {
    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            DemeshError::ShapeMismatch { .. } => "shape_mismatch",
            DemeshError::OddExtent { .. } => "odd_extent",
            DemeshError::IndexOutOfBounds { .. } => "index_out_of_bounds",
            DemeshError::NonFinite { .. } => "non_finite",
            DemeshError::DegenerateLandmarks { .. } => "degenerate_landmarks",
            DemeshError::NonBinaryMask { .. } => "non_binary_mask",
            DemeshError::InvalidArgument { .. } => "invalid_argument",
            DemeshError::UnknownTap(_) => "unknown_tap",
            DemeshError::Format { .. } => "format",
            DemeshError::Config { .. } => "config",
            DemeshError::Io { .. } => "io",
            DemeshError::Diverged { .. } => "diverged",
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        DemeshError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DemeshError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        DemeshError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DemeshError>;
