//! Trend comparison across PEs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::runner::RunRecord;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub higher: String,
    pub lower: String,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub task: String,
    /// Mean extrapolation accuracy per PE, best first.
    pub means: Vec<(String, f64)>,
    /// e.g. `ipe > rpe > ape`, or `tied`.
    pub ordering: String,
    pub gaps: Vec<PairGap>,
    /// Completed runs contributing per PE.
    pub runs: BTreeMap<String, usize>,
}

impl TrendReport {
    pub fn mean_of(&self, pe: &str) -> Option<f64> {
        self.means.iter().find(|(p, _)| p == pe).map(|(_, m)| *m)
    }

    pub fn gap(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.mean_of(a)? - self.mean_of(b)?)
    }
}

/// Gaps below this are reported as ties.
pub const TIE_EPS: f64 = 1e-12;

/// Mean selected-checkpoint accuracy over scales above each record's train
/// range, averaged over seeds, grouped by PE. Failed runs are skipped.
pub fn compare_trends(records: &[RunRecord]) -> Result<TrendReport, HarnessError> {
    let task = records.first().map(|r| r.task.clone()).unwrap_or_default();
    if let Some(r) = records.iter().find(|r| r.task != task) {
        return Err(HarnessError::MismatchedTasks(task, r.task.clone()));
    }
    let mut per_pe: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.pe) {
            order.push(r.pe.clone());
        }
        let Some(sel) = &r.selected else { continue };
        if let Some(m) = sel.metrics.mean_above(r.train_scales[1]) {
            per_pe.entry(r.pe.clone()).or_default().push(m);
        }
    }
    let mut means: Vec<(String, f64)> = order
        .iter()
        .filter_map(|pe| per_pe.get(pe).map(|v| (pe.clone(), v.iter().sum::<f64>() / v.len() as f64)))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut gaps = Vec::new();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            gaps.push(PairGap { higher: means[i].0.clone(), lower: means[j].0.clone(), gap: means[i].1 - means[j].1 });
        }
    }
    let ordering = if means.len() < 2 {
        means.first().map(|m| m.0.clone()).unwrap_or_default()
    } else if gaps.iter().all(|g| g.gap.abs() <= TIE_EPS) {
        "tied".to_string()
    } else {
        let mut s = means[0].0.clone();
        for w in means.windows(2) {
            s.push_str(if w[0].1 - w[1].1 > TIE_EPS { " > " } else { " = " });
            s.push_str(&w[1].0);
        }
        s
    };
    let runs = per_pe.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    Ok(TrendReport { task, means, ordering, gaps, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgpe_transformer::{Checkpoint, Metrics, PeKind};

    pub(crate) fn record(pe: &str, seed: u64, acc: &[f64]) -> RunRecord {
        let scales: Vec<usize> = (1..=acc.len()).collect();
        let ck = Checkpoint { step: 10, metrics: Metrics { scales, accuracy: acc.to_vec() }, params: None };
        RunRecord {
            run_id: format!("r-{pe}-{seed}"),
            config_digest: "d".into(),
            task: "copy".into(),
            pe: pe.into(),
            pe_kind: PeKind::Ape,
            seed,
            train_scales: [1, 2],
            checkpoints: vec![ck.clone()],
            selected: Some(ck),
            wall_clock_secs: 0.0,
            error: None,
        }
    }

    #[test]
    fn identical_records_tie() {
        let rs = vec![record("ipe", 0, &[1.0, 1.0, 0.5]), record("ape", 0, &[1.0, 1.0, 0.5])];
        let rep = compare_trends(&rs).unwrap();
        assert_eq!(rep.ordering, "tied");
        assert!(rep.gaps.iter().all(|g| g.gap == 0.0));
    }

    #[test]
    fn hand_built_ordering() {
        let rs = vec![
            record("ape", 0, &[1.0, 1.0, 0.1]),
            record("ipe", 0, &[1.0, 1.0, 0.95]),
            record("rpe", 0, &[1.0, 1.0, 0.6]),
        ];
        let rep = compare_trends(&rs).unwrap();
        assert_eq!(rep.ordering, "ipe > rpe > ape");
        assert!((rep.gap("ipe", "ape").unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(rep.gaps.len(), 3);
    }

    #[test]
    fn single_pe_is_degenerate_and_tasks_must_match() {
        let rep = compare_trends(&[record("ipe", 0, &[1.0, 1.0, 0.3]), record("ipe", 1, &[1.0, 1.0, 0.5])]).unwrap();
        assert!(rep.gaps.is_empty());
        assert!((rep.mean_of("ipe").unwrap() - 0.4).abs() < 1e-12);
        let mut other = record("ape", 0, &[1.0]);
        other.task = "parity".into();
        assert!(compare_trends(&[record("ipe", 0, &[1.0]), other]).is_err());
    }
}
