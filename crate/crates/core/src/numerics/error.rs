use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got a {rows}x{cols} tensor")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("standard deviation must be positive (found {value} at index {index})")]
    NonPositiveStd { index: usize, value: f64 },
    #[error("non-finite gradient in parameter tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },
}
