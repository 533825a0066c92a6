//! Runs every (PE, seed) pair of an experiment on a worker pool and
//! persists one record per pair.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use lgpe_core::tasks::sample_dataset;
use lgpe_transformer::{checkpoint, select_best_checkpoint, train, Checkpoint, EvalSpec, Model, PeKind, TrainEvent};

use crate::config::ExperimentConfig;
use crate::HarnessError;

/// Outcome of one (PE, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_digest: String,
    pub task: String,
    pub pe: String,
    pub pe_kind: PeKind,
    pub seed: u64,
    pub train_scales: [usize; 2],
    pub checkpoints: Vec<Checkpoint>,
    pub selected: Option<Checkpoint>,
    pub wall_clock_secs: f64,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.error.is_none() && self.selected.is_some()
    }
}

/// Data seeds are derived from the run seed so that every PE of a seed
/// sees identical training and evaluation instances.
fn data_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

pub fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(2)
}

pub fn run_id(cfg: &ExperimentConfig, pe: &PeKind, seed: u64) -> String {
    format!("{}-{}-{}-s{seed}", cfg.name, &cfg.digest()[..12], pe_tag(pe))
}

/// Label plus the parameters that distinguish PEs of the same kind.
pub fn pe_tag(pe: &PeKind) -> String {
    match pe {
        PeKind::Lbpe { s_max, hidden } | PeKind::LbpeSh { s_max, hidden } => format!("{}{s_max}x{hidden}", pe.label()),
        other => other.label().to_string(),
    }
}

pub fn experiment_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(&cfg.name)
}

/// Writes `bytes` to `path` atomically via a sibling temp file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn load_record(path: &Path) -> Option<RunRecord> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// All records under an experiment directory, sorted by run id.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".record.json")) {
            if let Some(r) = load_record(&path) {
                out.push(r);
            }
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

/// Options that do not affect results.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    pub save_checkpoints: bool,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            save_checkpoints: true,
            verbose: false,
        }
    }
}

/// Runs (or resumes) an experiment. Completed pairs found on disk are
/// reused; failed or missing pairs are (re)run. Every record is persisted
/// before this returns; the result is ordered by PE then seed.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, opts: &RunOptions) -> Result<Vec<RunRecord>, HarnessError> {
    run_experiment_with(cfg, root, opts, &|cfg, pe, seed, dir| run_one(cfg, pe, seed, dir, opts))
}

/// Per-run body, replaceable for testing the orchestration.
pub type RunFn<'a> = dyn Fn(&ExperimentConfig, &PeKind, u64, &Path) -> Result<RunRecord, HarnessError> + Sync + 'a;

pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    root: &Path,
    opts: &RunOptions,
    body: &RunFn,
) -> Result<Vec<RunRecord>, HarnessError> {
    cfg.validate()?;
    let dir = experiment_dir(root, cfg);
    fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let mut jobs = Vec::new();
    for pe in &cfg.pes {
        let kind = pe.resolve(cfg)?;
        for &seed in &cfg.seeds {
            jobs.push((kind.clone(), seed));
        }
    }
    let slots: Vec<Mutex<Option<RunRecord>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let mut pending = Vec::new();
    for (idx, (pe, seed)) in jobs.iter().enumerate() {
        let path = dir.join(format!("{}.record.json", run_id(cfg, pe, *seed)));
        match load_record(&path) {
            Some(r) if r.is_complete() => *slots[idx].lock().unwrap() = Some(r),
            _ => pending.push(idx),
        }
    }
    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&idx) = pending.get(k) else { break };
                let (pe, seed) = &jobs[idx];
                let id = run_id(cfg, pe, *seed);
                let started = Instant::now();
                let outcome = catch_unwind(AssertUnwindSafe(|| body(cfg, pe, *seed, &dir)));
                let record = match outcome {
                    Ok(Ok(r)) => r,
                    Ok(Err(e)) => error_record(cfg, pe, *seed, e.to_string(), started),
                    Err(panic) => {
                        let msg = panic
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        error_record(cfg, pe, *seed, format!("panicked: {msg}"), started)
                    }
                };
                let path = dir.join(format!("{id}.record.json"));
                let json = serde_json::to_string_pretty(&record).expect("record serializes");
                if let Err(e) = write_atomic(&path, json.as_bytes()) {
                    eprintln!("failed to persist {id}: {e}");
                }
                if opts.verbose {
                    eprintln!(
                        "{id}: {}",
                        record.error.as_deref().map_or_else(
                            || format!("best mean {:.3}", record.selected.as_ref().map_or(0.0, |c| c.metrics.mean())),
                            |e| format!("error: {e}")
                        )
                    );
                }
                *slots[idx].lock().unwrap() = Some(record);
            });
        }
    });
    Ok(slots.into_iter().map(|s| s.into_inner().unwrap().expect("every job produces a record")).collect())
}

fn error_record(cfg: &ExperimentConfig, pe: &PeKind, seed: u64, error: String, started: Instant) -> RunRecord {
    RunRecord {
        run_id: run_id(cfg, pe, seed),
        config_digest: cfg.digest(),
        task: cfg.task.name().to_string(),
        pe: pe_tag(pe),
        pe_kind: pe.clone(),
        seed,
        train_scales: cfg.train_scales,
        checkpoints: Vec::new(),
        selected: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        error: Some(error),
    }
}

/// Generates data, trains, evaluates every checkpoint and selects the best.
pub fn run_one(cfg: &ExperimentConfig, pe: &PeKind, seed: u64, dir: &Path, opts: &RunOptions) -> Result<RunRecord, HarnessError> {
    let started = Instant::now();
    let id = run_id(cfg, pe, seed);
    let target = cfg.aligned.then_some(cfg.width_max());
    let data = sample_dataset(cfg.task, cfg.train_range(), cfg.train_samples, cfg.aligned, target, data_seed(seed))?;
    let mut model = Model::new(cfg.model_config(pe.clone()), seed)?;
    let train_cfg = lgpe_transformer::TrainConfig { seed, ..cfg.train.clone() };
    let eval = EvalSpec {
        task: cfg.task,
        scales: cfg.eval_list(),
        samples_per_scale: cfg.eval_samples,
        seed: eval_seed(seed),
        aligned: cfg.aligned,
        target_length: target,
    };
    let mut events = String::new();
    let mut on_event = |e: &TrainEvent| {
        events.push_str(&serde_json::to_string(e).expect("event serializes"));
        events.push('\n');
    };
    let outcome = train(&mut model, &train_cfg, &data, Some(&eval), &mut on_event)?;
    write_atomic(&dir.join(format!("{id}.events.jsonl")), events.as_bytes())?;
    let best = select_best_checkpoint(&outcome.checkpoints)?.clone();
    if opts.save_checkpoints {
        if let Some(p) = &best.params {
            model.params.clone_from(p);
            checkpoint::save(dir, &id, &model, best.step, Some(&best.metrics))?;
        }
    }
    let selected = Checkpoint { params: None, ..best };
    Ok(RunRecord {
        run_id: id,
        config_digest: cfg.digest(),
        task: cfg.task.name().to_string(),
        pe: pe_tag(pe),
        pe_kind: pe.clone(),
        seed,
        train_scales: cfg.train_scales,
        checkpoints: outcome.checkpoints.into_iter().map(|c| Checkpoint { params: None, ..c }).collect(),
        selected: Some(selected),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        error: None,
    })
}
