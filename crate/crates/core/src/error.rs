use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value {value} at flat index {index} in {context}")]
    NonFinite { context: String, index: usize, value: f64 },

    #[error("layer {index} ({kind}) is not supported by {op}")]
    UnsupportedLayer { index: usize, kind: String, op: &'static str },

    #[error("layer {index}: {detail}")]
    Layer { index: usize, detail: String },

    #[error("batch normalization layer {index} has no running statistics yet; run a training pass first")]
    MissingRunningStats { index: usize },

    #[error("{path}: {detail} (byte offset {offset})")]
    Format { path: PathBuf, offset: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("every probe returned a non-finite value: {probes:?}")]
    AllProbesDiverged { probes: Vec<f64> },

    #[error("model file {path}: {detail}")]
    Model { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by NaN/Inf showing up in a computation.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::AllProbesDiverged { .. })
    }

    /// True for failures caused by malformed or missing input files.
    pub fn is_data(&self) -> bool {
        matches!(self, Error::Format { .. } | Error::Io { .. } | Error::Model { .. })
    }
}
