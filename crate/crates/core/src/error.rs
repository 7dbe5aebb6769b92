use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape {0} has a zero dimension")]
    ZeroDim(Shape),

    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength { shape: Shape, len: usize, expected: usize },

    /// A single named dimension disagrees between two operands.
    #[error("{op}: {dim} mismatch, expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: incompatible shapes {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}")]
    Groups {
        groups: usize,
        in_channels: usize,
        out_channels: usize,
    },

    #[error("backward needs a 1x1x1x1 loss, got {0}")]
    NonScalarLoss(Shape),

    #[error("batch norm running statistics were never updated; run a train-mode pass or load a checkpoint")]
    StatsUninitialized,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFiniteLoss { step: usize, lr: f64, loss: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
