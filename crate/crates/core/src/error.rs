use thiserror::Error;

/// Errors raised by tensor arithmetic, module construction and evaluation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("structure mismatch: {0}")]
    Structure(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("missing sharpness entry for kind `{0}`")]
    MissingKind(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
