//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor primitive was applied to non-conforming shapes.
    #[error("shape mismatch in `{primitive}`: {lhs:?} vs {rhs:?}")]
    Shape {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tape node id was used with a tape that does not contain it.
    #[error("node {node} is not on this tape (len {len})")]
    NodeNotOnTape { node: usize, len: usize },

    /// Backward was requested from a non-scalar node.
    #[error("loss node must be scalar-shaped, got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A forward evaluation produced a non-finite value.
    #[error("non-finite value in `{context}`")]
    NonFinite { context: String },

    /// A gradient fed to the optimizer was NaN or infinite.
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Parallel data streams disagree on sentence or token counts.
    #[error("misaligned data: {0}")]
    Misaligned(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
