use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("cosine undefined: {0}")]
    ZeroVector(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
