use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite after jitter up to {jitter:e}: {what}")]
    NotPositiveDefinite { what: String, jitter: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("exhaustive enumeration of {assignments} assignments exceeds the limit of {limit}")]
    TooLarge { assignments: f64, limit: f64 },
}

impl Error {
    /// True for failures caused by floating point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite { .. } | Error::NonFinite(_))
    }
}
