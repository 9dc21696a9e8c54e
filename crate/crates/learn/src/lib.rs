//! Learned RB allocation.
//!
//! - [`neuralnet`]: dense networks with manual backprop and Adam
//! - [`trainer`]: the smoothed primal-dual loss, training loop, inference and evaluation

pub mod neuralnet;
pub mod trainer;

pub use neuralnet::{Activation, Direction, Network};
pub use trainer::{Checkpoint, Metrics, Mode, TrainConfig, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward pass used a cache from before the last parameter update")]
    StaleCache,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Core(#[from] rballoc_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LearnError>;
