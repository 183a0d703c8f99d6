use alloc::string::String;
use alloc::vec::Vec;

/// Failures raised by tensor operations, layers, losses and the data tools.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("extent along axis {axis} would be {extent}")]
    ExtentUnderflow { axis: usize, extent: i64 },
    #[error("backward requires a scalar loss, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    StaleGraph,
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("training diverged: non-finite {term} at epoch {epoch}, subject {subject}, patch {patch}")]
    Diverged {
        term: &'static str,
        epoch: usize,
        subject: String,
        patch: usize,
    },
    #[error("mask contains values other than 0 and 1")]
    NonBinaryMask,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
