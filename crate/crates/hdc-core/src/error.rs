use std::path::PathBuf;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (usage 2, io/format 3, numeric 4).
#[derive(Debug, thiserror::Error)]
pub enum HdcError {
    /// A caller violated an operation contract (bad shape, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric invariant broke at runtime (non-finite value, degenerate
    /// matrix, non-convergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed on-disk data (manifest, PGM, checkpoint).
    #[error("format error: {0}")]
    Format(String),
}

impl HdcError {
    pub fn contract(msg: impl Into<String>) -> Self {
        HdcError::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        HdcError::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        HdcError::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HdcError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HdcError>;
