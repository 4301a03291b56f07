use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("log of non-positive value {value} at element {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward root must hold exactly one element, found {0}")]
    RootNotScalar(usize),

    #[error("class id {id} out of range (n = {n})")]
    ClassOutOfRange { id: usize, n: usize },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid loss parameters: {0}")]
    LossParams(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("anchor clustering: {0}")]
    Anchors(String),

    #[error("mosaic requires exactly 4 images, got {0}")]
    MosaicArity(usize),

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Process exit status: 3 for numerical aborts, 2 for everything else
    /// (usage, validation, I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
