//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions between policy, environment or config.
    #[error("configuration error: {0}")]
    Config(String),

    /// A batch fed to an on-policy update no longer matches the policy.
    #[error("off-policy batch: stored log-probabilities deviate by {max_dev} (tolerance {tol})")]
    OffPolicy { max_dev: f64, tol: f64 },

    /// A network or loss produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Linear algebra failure (non-PD kernel, singular system).
    #[error("linear algebra: {0}")]
    LinAlg(String),

    /// Learning-rate schedule violating the two-timescale conditions.
    #[error("schedule rejected: {0}")]
    Schedule(String),

    /// Self-play exceeded its termination guard, indicating the game is
    /// not extended transitive.
    #[error("self-play did not terminate within {cap} deviations (transitivity violation?)")]
    SelfPlayGuard { cap: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
