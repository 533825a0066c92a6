//! Position embeddings: relation functions and their realizations.
//!
//! A position embedding is described by its positional relation function
//! (PRF), which maps a (query, key) pair to a discrete relation value. The
//! same PRF can be realized additively on the keys, through rotations, or
//! through a learned mixture over relation values.

mod learnable;
mod linalg;
mod prf;
mod rotary;

use thiserror::Error;

use crate::tasks::TaskKind;

pub use learnable::{
    additive_key_attention, lbpe_embed, lbpe_embed_backward, lbpe_rotary, lbpe_rotary_grad,
    mix_rows, EmbeddingTable, LearnablePrf, LearnablePrfConfig, PrfCache, TopKTable,
};
pub use linalg::Matrix;
pub use prf::{
    generic_sh_prf, ipe_prf, ipe_sh_prf, standard_prf, Prf, PrfSh, PrfTable, Relation,
    StandardKind,
};
pub use rotary::{rotary_decomposed, rotary_general, rotate_pairs, RotaryAngles};

#[derive(Debug, Error, PartialEq)]
pub enum PeError {
    #[error("no ideal PRF defined for task {0}")]
    UnsupportedTask(TaskKind),
    #[error("relation value {value} outside 0..{s_max}")]
    ValueOutOfRange { value: usize, s_max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rotary embeddings need an even dimension, got {0}")]
    OddDimension(usize),
    #[error("relation distribution is off the simplex (sum {sum}, min {min})")]
    SimplexViolation { sum: f64, min: f64 },
    #[error("scale hint required")]
    MissingScaleHint,
}
