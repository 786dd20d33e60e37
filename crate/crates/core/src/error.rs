use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid material parameters: {0}")]
    InvalidParams(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("inference diverged at depth {depth} with omega = {omega}: residual {residual:e} exceeds 10x its minimum {minimum:e}")]
    Divergence {
        omega: f64,
        depth: usize,
        residual: f64,
        minimum: f64,
    },

    #[error("design matrix is rank deficient (sigma_min/sigma_max = {ratio:e}, rank {rank} of {unknowns}); null combination weight per input channel: {channel_weights:?}")]
    Multicollinearity {
        rank: usize,
        unknowns: usize,
        ratio: f64,
        /// Share of the null-space direction carried by each input channel.
        channel_weights: Vec<f64>,
    },

    #[error("identifiability precondition violated: {0}")]
    Identifiability(String),
}

impl Error {
    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular(_) | Error::NotConverged(_) | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
