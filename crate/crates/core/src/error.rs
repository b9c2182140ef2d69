use thiserror::Error;

/// Errors raised by the estimation, loss and design routines.
#[derive(Debug, Error)]
pub enum Error {
    /// The regressor matrix does not have full column rank.
    #[error("model unidentifiable: regressor matrix has rank {rank}, need {expected}")]
    RankDeficient { rank: usize, expected: usize },

    /// A matrix that must be inverted is singular or not positive definite.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A scalar parameter lies outside its admissible range.
    #[error("{name} = {value} is out of range: {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: String,
    },

    /// Dimensions of the inputs do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid design, space or configuration.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The residual degrees of freedom are exhausted (n = rk(H)).
    #[error("no residual degrees of freedom: n = {n}, rank(H) = {rank}")]
    NoDegreesOfFreedom { n: usize, rank: usize },

    /// An optimizer could not produce any admissible candidate.
    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
