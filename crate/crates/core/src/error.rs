use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("domain `{0}` is not registered")]
    UnknownDomain(String),

    #[error("domain `{0}` is already registered")]
    DuplicateDomain(String),

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
