//! Configuration files, batch experiment drivers and the `rballoc` CLI.

pub mod bench;
pub mod cli;
pub mod config;
pub mod experiments;

pub use config::{ConfigFile, SystemFile};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad user input: malformed or inconsistent configuration, wrong dataset shape.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rballoc_core::Error),
    #[error(transparent)]
    Learn(#[from] rballoc_learn::LearnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 for usage and configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(rballoc_core::Error::InvalidConfig { .. }) => 2,
            Self::Learn(rballoc_learn::LearnError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
