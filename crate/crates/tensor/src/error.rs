use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Failure kinds raised by tensor construction, tape operations and gradient checks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    /// Shapes or ranks do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A scalar parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// The caller broke an API contract (foreign variable, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// NaN or infinity where a finite value was required.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            detail: format!("incompatible shapes {a:?} and {b:?}"),
        }
    }
}
