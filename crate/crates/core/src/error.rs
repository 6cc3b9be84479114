use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0} must be symmetric positive semidefinite")]
    NotPositiveSemidefinite(&'static str),

    #[error("spectral radius {0} >= 1: no stationary covariance")]
    NonStationary(f64),

    #[error("ill-posed normal equations: {0}")]
    IllPosed(String),

    #[error("parameter not identifiable: {0}")]
    Unidentifiable(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("augmented smoother diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input")]
    Empty,
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
