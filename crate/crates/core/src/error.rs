use thiserror::Error;

/// Errors raised by the library.
///
/// The variants are grouped so that a driver can map them onto exit codes:
/// configuration problems, data validation problems, numerical failures and
/// I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("response {value} at ({row}, {col}) is outside the support of {family}")]
    InvalidResponse {
        value: f64,
        row: usize,
        col: usize,
        family: &'static str,
    },

    #[error("{constant} is unbounded on the configured parameter domain")]
    UnboundedConstant { constant: &'static str },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("sampler diverged at step {step}: {reason}")]
    SamplerDivergence { step: usize, reason: String },

    #[error("failed to converge: {0}")]
    NonConvergence(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty chain")]
    EmptyChain,

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Broad category used by drivers for exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter(_) | Error::Unsupported(_) | Error::UnboundedConstant { .. } => {
                ErrorCategory::Config
            }
            Error::ShapeMismatch(_) | Error::InvalidResponse { .. } | Error::Format { .. } => {
                ErrorCategory::Data
            }
            Error::SamplerDivergence { .. }
            | Error::NonConvergence(_)
            | Error::Numerical(_)
            | Error::EmptyChain => ErrorCategory::Numerical,
            Error::Io(_) => ErrorCategory::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Io,
}
