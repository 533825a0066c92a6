//! Small decoder-only transformer for length-generalization experiments.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod train;

use lgpe_core::pe::PeError;
use lgpe_core::tasks::TaskError;

pub use config::{ModelConfig, PeKind, TrainConfig};
pub use model::{Model, NamedParam, ParamKind, SeqRef};
pub use train::{
    evaluate_per_scale, evaluate_with, select_best_checkpoint, train, Checkpoint, EvalSpec, Metrics, TrainEvent,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum TransformerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Pe(#[from] PeError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
