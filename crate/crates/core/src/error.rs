use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload in record {record}")]
    Truncated { record: usize },

    #[error("truncated header: {0}")]
    TruncatedHeader(String),

    #[error("record count mismatch: header declares {declared}, payload holds {found}")]
    CountMismatch { declared: usize, found: usize },

    #[error("malformed JSON header: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-finite {component} loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, component: &'static str },

    #[error("layer {layer} out of range (model has {layers})")]
    LayerOutOfRange { layer: usize, layers: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
