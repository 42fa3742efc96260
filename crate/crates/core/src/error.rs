use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Variants are grouped by the kind of failure so front-ends can map them to
/// exit codes: configuration problems, malformed input data, corrupt or
/// mismatched compressed streams, and numerical failures during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("stream integrity error: {0}")]
    Stream(String),

    #[error("ans stack underflow: {0}")]
    Underflow(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: u64, reason: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn stream(msg: impl Into<String>) -> Self {
        Error::Stream(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
