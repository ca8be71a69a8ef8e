//! Workspace error type and process exit-code mapping.

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact: bad magic, truncation, checksum mismatch.
    #[error("format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    /// A required input artifact (volume, checkpoint, manifest) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Numeric failure: divergent training, non-finite guidance state.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Process exit code: 0 ok, 2 config error, 3 missing artifact,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Numeric(_) => 4,
            Error::Tensor(TensorError::NonFinite { .. }) => 4,
            Error::Tensor(TensorError::NonFiniteGrad { .. }) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
