use thiserror::Error;

/// Errors raised by the library.
///
/// Variants are grouped so the CLI can map them onto exit codes: input and
/// data problems, numerical failures, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("sinkhorn did not converge on segment {segment} (marginal error {error:.3e})")]
    SinkhornFailed { segment: usize, error: f64 },

    #[error("refit iteration {iteration}: {source}")]
    Refit {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPsd { .. }
            | Error::Degenerate(_)
            | Error::NonFinite { .. }
            | Error::SinkhornFailed { .. } => true,
            Error::Refit { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
