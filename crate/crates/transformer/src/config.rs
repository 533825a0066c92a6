use serde::{Deserialize, Serialize};

use lgpe_core::tasks::TaskKind;

/// Position embedding plugged into the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeKind {
    /// Learned absolute table added to the token embeddings.
    Ape,
    /// Key-only additive embedding indexed by `i - j`.
    Rpe,
    /// Rotary embedding with the decomposable PRF `i - j`.
    Rope { base: f64 },
    /// Key-only additive embedding indexed by the task's ideal PRF.
    Ipe { task: TaskKind, target_length: usize },
    /// Ideal PRF with the instance scale as an extra argument.
    IpeSh { task: TaskKind },
    /// Learned PRF mixed over `s_max` embedding rows.
    Lbpe { s_max: usize, hidden: usize },
    /// Learned PRF with scale hint.
    LbpeSh { s_max: usize, hidden: usize },
}

impl PeKind {
    pub fn label(&self) -> &'static str {
        match self {
            PeKind::Ape => "ape",
            PeKind::Rpe => "rpe",
            PeKind::Rope { .. } => "rope",
            PeKind::Ipe { .. } => "ipe",
            PeKind::IpeSh { .. } => "ipe_sh",
            PeKind::Lbpe { .. } => "lbpe",
            PeKind::LbpeSh { .. } => "lbpe_sh",
        }
    }

    pub fn needs_scale(&self) -> bool {
        matches!(self, PeKind::IpeSh { .. } | PeKind::LbpeSh { .. })
    }

    pub fn is_learned_prf(&self) -> bool {
        matches!(self, PeKind::Lbpe { .. } | PeKind::LbpeSh { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// MLP width as a multiple of `hidden`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Longest sequence the position tables must cover.
    pub max_len: usize,
    pub pe: PeKind,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 1 head, 128 hidden units.
    pub fn desk(vocab: usize, max_len: usize, pe: PeKind) -> Self {
        Self { vocab, layers: 2, heads: 1, hidden: 128, mlp_ratio: 4, max_len, pe }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            epochs: 10,
            lr: 5e-4,
            weight_decay: 1.0,
            warmup_ratio: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 200,
        }
    }
}
