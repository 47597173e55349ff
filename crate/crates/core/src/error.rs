use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file exists but its contents do not parse (bad magic, truncated
    /// payload, invalid label values, malformed JSON).
    #[error("malformed file: {0}")]
    Format(String),
    /// Dimensions or tensor shapes that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),
    /// The data itself makes the requested operation impossible
    /// (degenerate dataset, infeasible phantom, empty cohort).
    #[error("bad data: {0}")]
    Data(String),
    /// Numerical failure in training (non-finite loss).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
