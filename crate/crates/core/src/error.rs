use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric fault: non-finite values in {0}")]
    NumericFault(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (supported up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Data errors (bad files, malformed manifests) as opposed to usage or
    /// numeric problems.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Load { .. }
                | Error::BadMagic
                | Error::UnsupportedVersion { .. }
                | Error::Integrity(_)
                | Error::MissingTensor(_)
                | Error::ShapeMismatch { .. }
                | Error::Io(_)
                | Error::Image(_)
                | Error::InvalidInput(_)
        )
    }
}
