use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: index {index} out of range for axis of size {size}")]
    IndexOutOfRange { op: &'static str, index: usize, size: usize },

    #[error("expected a single-element tensor, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter `{name}`: gradient shape {grad:?} does not match {param:?}")]
    GradientShape { name: String, param: Vec<usize>, grad: Vec<usize> },
}
