use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("segmentation failed: client holds {available} samples but k * s_min = {k} * {s_min} = {required} are required")]
    Segmentation {
        available: usize,
        k: usize,
        s_min: usize,
        required: usize,
    },

    #[error("split failed: {0}")]
    Split(String),

    #[error("exact Shapley supports at most {max} clients (got {n}); use the Monte Carlo estimator instead")]
    TooManyClients { n: usize, max: usize },

    #[error("utility evaluation failed: {0}")]
    Utility(String),

    #[error("attack diverged: {0}")]
    Divergence(String),

    #[error("zero transmission rate for {0}")]
    ZeroRate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for this error: 2 for configuration problems,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) | Error::ZeroRate(_) | Error::Utility(_) | Error::Io(_) | Error::Csv(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
