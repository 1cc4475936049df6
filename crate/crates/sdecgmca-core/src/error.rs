//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the transforms, generators and solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something structurally wrong (sizes, ranges, flags).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A convolution kernel vanishes (or is too short) where it is needed.
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    /// A random generator could not satisfy its constraints.
    #[error("generation failed: {0}")]
    GenerationFailure(String),

    /// A least-squares system could not be factorized. Happens when the
    /// regularization is switched off at a degree where the kernels leave
    /// nothing to invert.
    #[error("singular system at degree l = {l}")]
    SingularSystem { l: usize },

    /// Initialization (e.g. the PCA warm start) could not produce the
    /// requested number of components.
    #[error("initialization failed: {0}")]
    InitializationFailure(String),

    /// Generic numerical breakdown (non-finite values, failed iteration).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A file exists but does not follow the expected layout.
    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    /// Convenience constructor used all over the crate.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
