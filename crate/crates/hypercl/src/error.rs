//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Index (e.g. a class label) out of range.
    #[error("index out of range in {context}: got {index}, bound {bound}")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A named entity (task, head, parameter) is missing or duplicated.
    #[error("registry error: {0}")]
    Registry(String),

    /// Malformed input file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Bad experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn registry(msg: impl Into<String>) -> Self {
        Error::Registry(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
