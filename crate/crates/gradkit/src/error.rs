use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward seed must be a scalar node, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("graph has no parameter store bound")]
    NoParamStore,
}

impl GradError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GradError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, reason: impl Into<String>) -> Self {
        GradError::Degenerate {
            op,
            reason: reason.into(),
        }
    }
}
