//! AdamW training with answer-masked loss, periodic per-scale evaluation
//! and best-average checkpoint selection.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lgpe_core::tasks::{generate, TaskInstance, TaskKind};

use crate::config::TrainConfig;
use crate::model::{Model, SeqRef};
use crate::TransformerError;

/// Sequences per forward/backward pass; larger batches accumulate gradients.
const MICRO_BATCH: usize = 64;

/// Per-purpose RNG stream offsets.
const DATA_STREAM: u64 = 0x6461_7461;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Exact-match accuracy per evaluation scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scales: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl Metrics {
    pub fn mean(&self) -> f64 {
        if self.accuracy.is_empty() {
            return 0.0;
        }
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }

    /// Mean accuracy over scales strictly above `train_max`.
    pub fn mean_above(&self, train_max: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .scales
            .iter()
            .zip(&self.accuracy)
            .filter(|(s, _)| **s > train_max)
            .map(|(_, a)| *a)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub metrics: Metrics,
    /// Parameter snapshot; kept only for the running best to bound memory.
    #[serde(skip)]
    pub params: Option<Vec<f64>>,
}

/// Evaluation protocol applied at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub task: TaskKind,
    pub scales: Vec<usize>,
    pub samples_per_scale: usize,
    pub seed: u64,
    #[serde(default)]
    pub aligned: bool,
    #[serde(default)]
    pub target_length: Option<usize>,
}

/// One streamed training event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Step { step: usize, loss: f64, lr: f64 },
    Checkpoint { step: usize, metrics: Metrics },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<f64>,
    pub total_steps: usize,
}

/// Learning rate at `step` (0-based): linear warmup then cosine decay to 0.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = ((cfg.warmup_ratio * total as f64).round() as usize).min(total);
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    0.5 * cfg.lr * (1.0 + (PI * progress).cos())
}

/// Trains in place and returns the checkpoint trace. When `eval` is given,
/// every `checkpoint_every` steps (and at the final step) the model is
/// evaluated per scale; the best checkpoint keeps a parameter snapshot.
/// Training is single-threaded and fully determined by `cfg.seed`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &[TaskInstance],
    eval: Option<&EvalSpec>,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome, TransformerError> {
    if data.is_empty() {
        return Err(TransformerError::EmptyDataset);
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(TransformerError::InvalidConfig("batch and epochs must be positive".into()));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let total = steps_per_epoch * cfg.epochs;
    let decay: Vec<bool> = {
        let mut v = vec![false; model.n_params()];
        for np in model.named_params() {
            if np.decays() {
                v[np.range.clone()].iter_mut().for_each(|x| *x = true);
            }
        }
        v
    };
    let mut m1 = vec![0.0; model.n_params()];
    let mut m2 = vec![0.0; model.n_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let (loss, grad) = accumulate(model, data, chunk)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TransformerError::NonFiniteLoss { step, loss });
            }
            let lr = lr_at(cfg, step, total);
            adamw_step(model, cfg, &decay, &grad, &mut m1, &mut m2, step + 1, lr);
            losses.push(loss);
            on_event(&TrainEvent::Step { step, loss, lr });
            step += 1;
            let at_ckpt = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if let Some(spec) = eval {
                if at_ckpt || step == total {
                    let metrics = evaluate_spec(model, spec)?;
                    on_event(&TrainEvent::Checkpoint { step, metrics: metrics.clone() });
                    let mean = metrics.mean();
                    let mut ck = Checkpoint { step, metrics, params: None };
                    if best.map_or(true, |(b, _)| mean > b) {
                        if let Some((_, idx)) = best {
                            checkpoints[idx].params = None;
                        }
                        ck.params = Some(model.params.clone());
                        best = Some((mean, checkpoints.len()));
                    }
                    checkpoints.push(ck);
                }
            }
        }
    }
    Ok(TrainOutcome { checkpoints, losses, total_steps: total })
}

/// Token-weighted mean loss and gradient over a batch of dataset indices.
fn accumulate(model: &Model, data: &[TaskInstance], idx: &[usize]) -> Result<(f64, Vec<f64>), TransformerError> {
    let mut grad = vec![0.0; model.n_params()];
    let mut loss = 0.0;
    let mut tokens = 0usize;
    for mb in idx.chunks(MICRO_BATCH) {
        let seqs: Vec<SeqRef> = mb.iter().map(|&i| SeqRef::from(&data[i])).collect();
        let (l, g, n) = model.loss_and_grad(&seqs)?;
        let w = n as f64;
        loss += l * w;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b * w;
        }
        tokens += n;
    }
    let t = tokens.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= t);
    Ok((loss / t, grad))
}

#[allow(clippy::too_many_arguments)]
fn adamw_step(
    model: &mut Model,
    cfg: &TrainConfig,
    decay: &[bool],
    grad: &[f64],
    m1: &mut [f64],
    m2: &mut [f64],
    t: usize,
    lr: f64,
) {
    let mut scale = 1.0;
    if cfg.grad_clip > 0.0 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            scale = cfg.grad_clip / norm;
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..grad.len() {
        let g = grad[i] * scale;
        m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
        m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
        let p = &mut model.params[i];
        if decay[i] {
            *p -= lr * cfg.weight_decay * *p;
        }
        *p -= lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + cfg.eps);
    }
}

fn evaluate_spec(model: &Model, spec: &EvalSpec) -> Result<Metrics, TransformerError> {
    evaluate_per_scale(
        model,
        spec.task,
        &spec.scales,
        spec.samples_per_scale,
        spec.seed,
        spec.aligned,
        spec.target_length,
    )
}

/// Samples the evaluation instances for one scale. The stream depends only
/// on `(seed, scale)`, so every checkpoint sees the same instances.
pub fn eval_instances(
    task: TaskKind,
    scale: usize,
    samples: usize,
    seed: u64,
    aligned: bool,
    target_length: Option<usize>,
) -> Result<Vec<TaskInstance>, TransformerError> {
    let mut rng = ChaCha8Rng::seed_from_u64((seed ^ EVAL_STREAM).wrapping_mul(1_000_003).wrapping_add(scale as u64));
    (0..samples)
        .map(|_| generate(task, scale, aligned, target_length, &mut rng).map_err(Into::into))
        .collect()
}

/// Exact-match accuracy of greedy decoding over the answer region, one
/// value per scale.
pub fn evaluate_per_scale(
    model: &Model,
    task: TaskKind,
    scales: &[usize],
    samples_per_scale: usize,
    seed: u64,
    aligned: bool,
    target_length: Option<usize>,
) -> Result<Metrics, TransformerError> {
    let mut accuracy = Vec::with_capacity(scales.len());
    for &n in scales {
        let inst = eval_instances(task, n, samples_per_scale, seed, aligned, target_length)?;
        let mut correct = 0usize;
        for chunk in inst.chunks(MICRO_BATCH) {
            let seqs: Vec<SeqRef> = chunk.iter().map(SeqRef::from).collect();
            correct += model.exact_match(&seqs)?.into_iter().filter(|&b| b).count();
        }
        accuracy.push(correct as f64 / samples_per_scale.max(1) as f64);
    }
    Ok(Metrics { scales: scales.to_vec(), accuracy })
}

/// Same protocol with an arbitrary predictor mapping a prompt to its
/// answer tokens.
pub fn evaluate_with(
    predictor: &dyn Fn(&[u32]) -> Vec<u32>,
    task: TaskKind,
    scales: &[usize],
    samples_per_scale: usize,
    seed: u64,
) -> Result<Metrics, TransformerError> {
    let mut accuracy = Vec::with_capacity(scales.len());
    for &n in scales {
        let inst = eval_instances(task, n, samples_per_scale, seed, false, None)?;
        let correct = inst.iter().filter(|i| predictor(i.prompt()) == i.answer()).count();
        accuracy.push(correct as f64 / samples_per_scale.max(1) as f64);
    }
    Ok(Metrics { scales: scales.to_vec(), accuracy })
}

/// Highest mean accuracy; ties go to the earliest step.
pub fn select_best_checkpoint(checkpoints: &[Checkpoint]) -> Result<&Checkpoint, TransformerError> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        best = match best {
            Some(b) if c.metrics.mean() > b.metrics.mean() || (c.metrics.mean() == b.metrics.mean() && c.step < b.step) => Some(c),
            None => Some(c),
            keep => keep,
        };
    }
    best.ok_or(TransformerError::NoCheckpoints)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ck(step: usize, acc: f64) -> Checkpoint {
        Checkpoint { step, metrics: Metrics { scales: vec![1], accuracy: vec![acc] }, params: None }
    }

    #[test]
    fn best_checkpoint_rules() {
        assert_eq!(select_best_checkpoint(&[ck(5, 0.3)]).unwrap().step, 5);
        let tied = [ck(10, 0.2), ck(20, 0.9), ck(30, 0.9)];
        assert_eq!(select_best_checkpoint(&tied).unwrap().step, 20);
        let inc = [ck(1, 0.1), ck(2, 0.2), ck(3, 0.3)];
        assert_eq!(select_best_checkpoint(&inc).unwrap().step, 3);
        assert!(matches!(select_best_checkpoint(&[]), Err(TransformerError::NoCheckpoints)));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let cfg = TrainConfig { lr: 1.0, warmup_ratio: 0.1, ..TrainConfig::default() };
        assert!((lr_at(&cfg, 9, 100) - 1.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 0, 100) < 0.2);
        assert!(lr_at(&cfg, 99, 100) < 1e-2);
        assert!(lr_at(&cfg, 50, 100) < lr_at(&cfg, 20, 100));
    }

    #[test]
    fn mean_above_train_range() {
        let m = Metrics { scales: vec![4, 5, 6, 7], accuracy: vec![1.0, 1.0, 0.5, 0.0] };
        assert_eq!(m.mean_above(5), Some(0.25));
        assert_eq!(m.mean_above(7), None);
    }
}
