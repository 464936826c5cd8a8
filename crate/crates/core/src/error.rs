use alloc::string::String;

/// Errors raised by the estimation and inference routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("input kind error: {0}")]
    Kind(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("all evaluation points fall below the variance floor")]
    DegenerateVariance,

    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("replicate {index} failed: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn kind(msg: impl Into<String>) -> Self {
        Error::Kind(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures of the numerical kernels (factorizations, non-finite values).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::DegenerateVariance => true,
            Error::Replicate { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
