use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by node {node}")]
    NonFinite { node: String },

    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },

    #[error("missing graph input `{0}`")]
    MissingInput(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("backward seed must be scalar, node {node} has shape {shape:?}")]
    NonScalarSeed { node: String, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid spec field `{field}`: {detail}")]
    InvalidSpec { field: String, detail: String },

    #[error("architecture fingerprint mismatch in fields: {}", fields.join(", "))]
    Fingerprint { fields: Vec<String> },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error("sample {sample} violates invariant: {detail}")]
    Invariant { sample: usize, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn spec(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::InvalidSpec { .. } | Error::Fingerprint { .. } | Error::Shape { .. }
        )
    }
}
