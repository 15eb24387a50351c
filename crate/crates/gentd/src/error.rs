use thiserror::Error;

/// Errors raised by model construction, solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("chain is not ergodic: stationary mass {mass:e} at pair {index}")]
    NonErgodic { index: usize, mass: f64 },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("rank-deficient features: {0}")]
    RankDeficient(String),
    #[error("policy is not softmax-parameterized")]
    NotParameterized,
    #[error("case has no sampling model")]
    NoSampler,
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
