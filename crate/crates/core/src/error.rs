use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MergeError>;

#[derive(Debug, Error)]
pub enum MergeError {
    /// Malformed container bytes.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Declared shapes and byte ranges disagree.
    #[error("integrity error in tensor `{key}`: {message}")]
    Integrity { key: String, message: String },

    #[error("unsupported dtype `{dtype}`")]
    Capability { dtype: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite or otherwise unusable values.
    #[error("data error in `{key}`: {message}")]
    Data { key: String, message: String },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl MergeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MergeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(key: impl Into<String>, message: impl Into<String>) -> Self {
        MergeError::Data {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MergeError::Config(_) => 2,
            MergeError::Io { .. }
            | MergeError::Format { .. }
            | MergeError::Integrity { .. }
            | MergeError::Capability { .. } => 3,
            MergeError::Data { .. } | MergeError::Structural(_) | MergeError::Numerical(_) => 4,
        }
    }
}
