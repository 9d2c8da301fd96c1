//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined moment: {0}")]
    UndefinedMoment(String),

    #[error("required sample size {required} exceeds cap {cap}")]
    CapExceeded { required: u64, cap: u64 },

    #[error("degenerate mixture fit: {0}")]
    DegenerateFit(String),

    #[error("a prior distribution is required for this rule")]
    MissingPrior,

    #[error("unknown sweep field `{0}`")]
    UnknownField(String),

    #[error("sampler did not converge: {0}")]
    Convergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
