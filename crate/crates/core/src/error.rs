use thiserror::Error;

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("covariance not PSD")]
    CovarianceNotPsd,
    #[error("degenerate density")]
    DegenerateDensity,
    #[error("degenerate innovation")]
    DegenerateInnovation,
    #[error("filter diverged")]
    FilterDiverged,
    #[error("total likelihood underflow")]
    LikelihoodUnderflow,
    #[error("ensemble collapse")]
    EnsembleCollapse,
    #[error("undefined NMSE: truth has zero norm")]
    UndefinedNmse,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
