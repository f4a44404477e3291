use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but buffer has {actual}")]
    BufferLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },
    #[error("{op}: {channels} channels are not divisible by {groups} groups")]
    Groups {
        op: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown variable {0}")]
    UnknownVar(usize),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        msg: msg.into(),
    })
}
