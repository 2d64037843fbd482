use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/operator shape validation failed. The message carries the full
    /// shape diagnostic (operator, offending extents).
    #[error("shape error: {0}")]
    Shape(String),

    /// A naming-string or config field failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Invalid configuration (bad field combination, unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure: non-finite loss/gradient, divergence, degenerate input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A chain-analysis routine was handed a chain it cannot analyze
    /// (downsampling or projection shortcuts inside the chain).
    #[error("unsupported chain: {0}")]
    UnsupportedChain(String),

    /// Network build rejected the requested structure.
    #[error("build error: {0}")]
    Build(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Weight container is malformed or incompatible.
    #[error("weight format error: {0}")]
    WeightFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
