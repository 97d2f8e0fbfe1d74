use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    Dimension { op: &'static str, reason: String },

    #[error("{op}: empty tensor")]
    EmptyTensor { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("landmark {index} at ({x}, {y}) lies outside the {grid}x{grid} grid")]
    LandmarkOutOfGrid { index: usize, x: i64, y: i64, grid: usize },

    #[error("indicator for landmark {index} is degenerate ({reason})")]
    DegenerateIndicator { index: usize, reason: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model file: bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("model file: unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },

    #[error("model file truncated while reading {what}")]
    Truncated { what: String },

    #[error("model file header: {0}")]
    ModelHeader(String),

    #[error("manifest entry {entry}: {reason}")]
    Manifest { entry: String, reason: String },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset too small: {size} samples (need at least {min})")]
    DatasetTooSmall { size: usize, min: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
