use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;
