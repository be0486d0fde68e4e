use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: region index {index} outside 1..={n_regions}")]
    RegionOutOfRange {
        line: usize,
        index: usize,
        n_regions: usize,
    },

    #[error("line {line}: self-loop on region {region}")]
    SelfLoop { line: usize, region: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("quadrature did not reach tolerance: {0}")]
    Quadrature(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
