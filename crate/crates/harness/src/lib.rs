//! Experiment orchestration: configuration, runs, reports and exports.

pub mod config;
pub mod export;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, PeSpec};
pub use report::{compare_trends, TrendReport};
pub use runner::{run_experiment, RunOptions, RunRecord};

/// Environment variable naming the results root directory.
pub const RESULTS_ENV: &str = "LGPE_RESULTS";

pub fn results_root() -> std::path::PathBuf {
    std::env::var_os(RESULTS_ENV).map_or_else(|| "results".into(), Into::into)
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("records mix tasks `{0}` and `{1}`")]
    MismatchedTasks(String, String),
    #[error("unsupported export format `{0}`")]
    UnsupportedFormat(String),
    #[error(transparent)]
    Transformer(#[from] lgpe_transformer::TransformerError),
    #[error(transparent)]
    Task(#[from] lgpe_core::tasks::TaskError),
    #[error(transparent)]
    Pe(#[from] lgpe_core::pe::PeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
