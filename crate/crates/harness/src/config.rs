//! Declarative experiment configuration and its canonical digest.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lgpe_core::tasks::{TaskKind, Vocabulary};
use lgpe_transformer::{ModelConfig, PeKind, TrainConfig};

use crate::HarnessError;

/// A PE named by its short label, or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PeSpec {
    Name(String),
    Full(PeKind),
}

pub const DEFAULT_LBPE_S_MAX: usize = 8;
pub const DEFAULT_LBPE_HIDDEN: usize = 32;

impl PeSpec {
    /// Resolves labels against the experiment: ideal PEs take the task and
    /// the alignment target, learned PEs the default table size.
    pub fn resolve(&self, cfg: &ExperimentConfig) -> Result<PeKind, HarnessError> {
        let name = match self {
            PeSpec::Full(k) => return Ok(k.clone()),
            PeSpec::Name(n) => n.as_str(),
        };
        Ok(match name {
            "ape" => PeKind::Ape,
            "rpe" => PeKind::Rpe,
            "rope" => PeKind::Rope { base: 10_000.0 },
            "ipe" => PeKind::Ipe { task: cfg.task, target_length: cfg.width_max() },
            "ipe_sh" => PeKind::IpeSh { task: cfg.task },
            "lbpe" => PeKind::Lbpe { s_max: DEFAULT_LBPE_S_MAX, hidden: DEFAULT_LBPE_HIDDEN },
            "lbpe_sh" => PeKind::LbpeSh { s_max: DEFAULT_LBPE_S_MAX, hidden: DEFAULT_LBPE_HIDDEN },
            other => return Err(HarnessError::Config(format!("unknown PE `{other}`"))),
        })
    }
}

/// Architecture overrides on top of the desk-scale defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOverrides {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub mlp_ratio: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskKind,
    pub pes: Vec<PeSpec>,
    #[serde(default)]
    pub aligned: bool,
    #[serde(default)]
    pub target_length: Option<usize>,
    /// Inclusive `[min, max]`.
    pub train_scales: [usize; 2],
    pub eval_scales: [usize; 2],
    pub seeds: Vec<u64>,
    pub train_samples: usize,
    pub eval_samples: usize,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainConfig,
    /// Trend thresholds consumed by reports and acceptance checks.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let [tlo, thi] = self.train_scales;
        let [elo, ehi] = self.eval_scales;
        if tlo == 0 || tlo > thi || elo > ehi {
            return bad(format!("bad scale ranges {:?} / {:?}", self.train_scales, self.eval_scales));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.pes.is_empty() {
            return bad("at least one PE is required".into());
        }
        if self.aligned {
            match self.target_length {
                Some(t) if t >= ehi.max(thi) => {}
                _ => return bad("aligned experiments need target_length >= every scale".into()),
            }
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        for pe in &self.pes {
            pe.resolve(self)?;
        }
        Ok(())
    }

    pub fn train_range(&self) -> RangeInclusive<usize> {
        self.train_scales[0]..=self.train_scales[1]
    }

    /// Evaluation scales: the union of the train range and the eval range,
    /// so reports cover both in-distribution and extrapolation accuracy.
    pub fn eval_list(&self) -> Vec<usize> {
        let lo = self.train_scales[0].min(self.eval_scales[0]);
        let hi = self.train_scales[1].max(self.eval_scales[1]);
        (lo..=hi).collect()
    }

    /// Operand width of the longest instance.
    pub fn width_max(&self) -> usize {
        if self.aligned {
            self.target_length.unwrap_or(self.eval_scales[1])
        } else {
            self.eval_scales[1].max(self.train_scales[1])
        }
    }

    pub fn model_config(&self, pe: PeKind) -> ModelConfig {
        let vocab = Vocabulary::for_task(self.task).len();
        let max_len = self.task.sequence_len(self.width_max());
        let mut m = ModelConfig::desk(vocab, max_len, pe);
        let o = &self.model;
        m.layers = o.layers.unwrap_or(m.layers);
        m.heads = o.heads.unwrap_or(m.heads);
        m.hidden = o.hidden.unwrap_or(m.hidden);
        m.mlp_ratio = o.mlp_ratio.unwrap_or(m.mlp_ratio);
        m
    }

    /// SHA-256 over the canonical JSON form (object keys sorted), so the
    /// digest is independent of field order in the source document.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        digest_value(&value)
    }
}

pub fn digest_value(value: &serde_json::Value) -> String {
    let canonical = canonical_json(value);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"{"name":"t","task":"copy","pes":["ipe","ape",{"kind":"lbpe","s_max":4,"hidden":8}],
        "aligned":true,"target_length":10,"train_scales":[1,5],"eval_scales":[6,10],"seeds":[0,1],
        "train_samples":100,"eval_samples":10}"#;

    #[test]
    fn digest_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":{"b":[1,2],"a":null}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":{"a":null,"b":[1,2]},"x":1}"#).unwrap();
        assert_eq!(digest_value(&a), digest_value(&b));
        let cfg = ExperimentConfig::from_json(CFG).unwrap();
        let reordered = ExperimentConfig::from_json(
            r#"{"seeds":[0,1],"task":"copy","name":"t","pes":["ipe","ape",{"hidden":8,"s_max":4,"kind":"lbpe"}],
            "target_length":10,"aligned":true,"eval_scales":[6,10],"train_scales":[1,5],
            "eval_samples":10,"train_samples":100}"#,
        )
        .unwrap();
        assert_eq!(cfg.digest(), reordered.digest());
        let mut changed = cfg.clone();
        changed.seeds.push(2);
        assert_ne!(cfg.digest(), changed.digest());
    }

    #[test]
    fn resolves_labels_and_rejects_bad_configs() {
        let cfg = ExperimentConfig::from_json(CFG).unwrap();
        assert_eq!(cfg.pes[0].resolve(&cfg).unwrap(), PeKind::Ipe { task: TaskKind::Copy, target_length: 10 });
        assert_eq!(cfg.eval_list(), (1..=10).collect::<Vec<_>>());
        assert_eq!(cfg.model_config(PeKind::Ape).max_len, 21);
        let mut bad = cfg.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.pes.push(PeSpec::Name("nope".into()));
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.target_length = Some(5);
        assert!(bad.validate().is_err());
    }
}
