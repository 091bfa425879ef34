use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("divergence at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f32,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("truncated file {path}: {len} bytes is not a whole number of {record}-byte records (trailing record starts at byte offset {offset})")]
    Truncated {
        path: PathBuf,
        len: u64,
        record: u64,
        offset: u64,
    },

    #[error("genotype: field `{field}`: {msg}")]
    Genotype { field: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGeometry(_) => "geometry",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::Genotype { .. } => "genotype",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn geometry(msg: impl Into<String>) -> Error {
    Error::InvalidGeometry(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
