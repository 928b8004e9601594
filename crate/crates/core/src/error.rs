use std::path::PathBuf;

use lapstyle_autograd::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("missing layer {0}")]
    MissingLayer(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step}: {terms}")]
    NonFiniteLoss { step: u64, terms: String },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn archive(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Archive { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
