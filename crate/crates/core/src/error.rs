use std::path::PathBuf;

use pmk_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, not a tensor container")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported container version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: dtype mismatch, file holds {found}, caller expects {expected}")]
    DTypeMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: malformed header: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// A caller-side validation failure outside any one operation.
    pub fn invalid_input(detail: impl Into<String>) -> Self {
        CoreError::Invalid {
            op: "input",
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Invalid {
            op,
            detail: detail.into(),
        }
    }
}
