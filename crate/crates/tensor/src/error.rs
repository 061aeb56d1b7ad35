use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("format error{}: {msg}", name.as_ref().map(|n| format!(" in tensor '{n}'")).unwrap_or_default())]
    Format { name: Option<String>, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Dimension { op, msg: msg.into() }
    }

    pub(crate) fn format(name: Option<&str>, msg: impl Into<String>) -> Self {
        TensorError::Format { name: name.map(str::to_owned), msg: msg.into() }
    }
}
