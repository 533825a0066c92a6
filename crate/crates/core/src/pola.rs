//! Position-only linear attention (POLA).
//!
//! The model is `f(x, n; A) = x^T A e_n` with `A` upper triangular. A PRF
//! reparameterizes `A` as `sum_s U_s q_s` over disjoint indicator masks.
//!
//! Indexing is 1-based throughout this module: row `i` is the key, column
//! `j` the query, and only `i <= j` may be nonzero. PRFs from [`crate::pe`]
//! are 0-based `(query, key)` and are converted by [`prf_to_indicators`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pe::Prf;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_GD_STEPS: usize = 100_000;
pub const DEFAULT_GD_TOL: f64 = 1e-10;
const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum PolaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("position {n} outside 1..={max}")]
    PositionOutOfRange { n: usize, max: usize },
    #[error("entry ({i}, {j}) below the diagonal is nonzero")]
    NotUpperTriangular { i: usize, j: usize },
    #[error("entry ({i}, {j}) is not finite")]
    NonFinite { i: usize, j: usize },
    #[error("relation value {value} at ({i}, {j}) outside 0..{s_max}")]
    PrfValueOutOfRange { i: usize, j: usize, value: usize, s_max: usize },
    #[error("target has increasing complexity: {prefix} classes in the prefix, {full} overall")]
    IncreasingLrc { prefix: usize, full: usize },
    #[error("class {class} is observed with values {first} and {other}")]
    InconsistentClass { class: usize, first: f64, other: f64 },
    #[error("gradient descent diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
}

/// Upper-triangular `n x n` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    pub n: usize,
    pub entries: Vec<f64>,
}

impl AttentionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, entries: vec![0.0; n * n] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, PolaError> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(PolaError::DimensionMismatch { expected: n, got: row.len() });
            }
            m.entries[r * n..(r + 1) * n].copy_from_slice(row);
        }
        m.validate()?;
        Ok(m)
    }

    /// Checks the upper-triangular and finiteness invariants.
    pub fn validate(&self) -> Result<(), PolaError> {
        if self.entries.len() != self.n * self.n {
            return Err(PolaError::DimensionMismatch {
                expected: self.n * self.n,
                got: self.entries.len(),
            });
        }
        for i in 1..=self.n {
            for j in 1..=self.n {
                let v = self.get(i, j);
                if !v.is_finite() {
                    return Err(PolaError::NonFinite { i, j });
                }
                if i > j && v != 0.0 {
                    return Err(PolaError::NotUpperTriangular { i, j });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i - 1) * self.n + (j - 1)]
    }

    /// Sets an upper-triangular entry. Panics below the diagonal.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i <= j, "({i}, {j}) is below the diagonal");
        self.entries[(i - 1) * self.n + (j - 1)] = v;
    }

    /// The leading `n0 x n0` block.
    pub fn prefix(&self, n0: usize) -> Self {
        let n0 = n0.min(self.n);
        let mut m = Self::zeros(n0);
        for i in 1..=n0 {
            for j in i..=n0 {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// Upper-triangular cells `(i, j)` with `j <= max_col`.
    fn cells(&self, max_col: usize) -> impl Iterator<Item = (usize, usize)> {
        let max_col = max_col.min(self.n);
        (1..=max_col).flat_map(|j| (1..=j).map(move |i| (i, j)))
    }
}

/// Disjoint, covering binary masks over the upper triangle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorFamily {
    pub n: usize,
    pub s_max: usize,
    /// `members[s]` is a row-major `n x n` mask.
    pub members: Vec<Vec<bool>>,
}

impl IndicatorFamily {
    /// Class of cell `(i, j)`, if covered.
    pub fn class_of(&self, i: usize, j: usize) -> Option<usize> {
        let idx = (i - 1) * self.n + (j - 1);
        self.members.iter().position(|m| m[idx])
    }

    fn class_table(&self) -> Vec<Option<usize>> {
        let mut t = vec![None; self.n * self.n];
        for (s, m) in self.members.iter().enumerate() {
            for (idx, &on) in m.iter().enumerate() {
                if on {
                    t[idx] = Some(s);
                }
            }
        }
        t
    }

    /// `sum_s U_s q_s`.
    pub fn compose(&self, q: &PolaParams) -> Result<AttentionMatrix, PolaError> {
        if q.q.len() != self.s_max {
            return Err(PolaError::DimensionMismatch { expected: self.s_max, got: q.q.len() });
        }
        let mut a = AttentionMatrix::zeros(self.n);
        for (idx, c) in self.class_table().into_iter().enumerate() {
            if let Some(s) = c {
                a.entries[idx] = q.q[s];
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolaParams {
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolaPair {
    pub x: Vec<f64>,
    pub n: usize,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolaDataset {
    pub pairs: Vec<PolaPair>,
}

impl PolaDataset {
    /// All `(e_i, n)` with `i <= n <= n0`, labelled by the target.
    pub fn basis(a_star: &AttentionMatrix, n0: usize) -> Self {
        let n = a_star.n;
        let pairs = a_star
            .cells(n0)
            .map(|(i, col)| {
                let mut x = vec![0.0; n];
                x[i - 1] = 1.0;
                PolaPair { x, n: col, label: a_star.get(i, col) }
            })
            .collect();
        Self { pairs }
    }
}

pub fn pola_forward(x: &[f64], n: usize, a: &AttentionMatrix) -> Result<f64, PolaError> {
    if x.len() != a.n {
        return Err(PolaError::DimensionMismatch { expected: a.n, got: x.len() });
    }
    if n == 0 || n > a.n {
        return Err(PolaError::PositionOutOfRange { n, max: a.n });
    }
    Ok((1..=a.n).map(|i| x[i - 1] * a.get(i, n)).sum())
}

/// Masks `U_s` with cell `(i, j)` in class `prf(j - 1, i - 1)`.
pub fn prf_to_indicators(prf: &Prf, n: usize) -> Result<IndicatorFamily, PolaError> {
    let s_max = prf.s_max();
    let mut members = vec![vec![false; n * n]; s_max];
    for j in 1..=n {
        for i in 1..=j {
            let value = prf.value(j - 1, i - 1);
            if value >= s_max {
                return Err(PolaError::PrfValueOutOfRange { i, j, value, s_max });
            }
            members[value][(i - 1) * n + (j - 1)] = true;
        }
    }
    Ok(IndicatorFamily { n, s_max, members })
}

/// Groups values by sorting and splitting at gaps wider than `tol`.
/// Returns one representative (the smallest member) per group.
fn group_values(values: &mut [f64], tol: f64) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut reps: Vec<f64> = Vec::new();
    let mut last: Option<f64> = None;
    for &v in values.iter() {
        match last {
            Some(l) if v - l <= tol => {}
            _ => reps.push(v),
        }
        last = Some(v);
    }
    reps
}

/// Group of `v` among sorted group minima: the last minimum `<= v`.
fn class_index(reps: &[f64], v: f64) -> Option<usize> {
    reps.partition_point(|&r| r <= v).checked_sub(1)
}

fn nonzero_entries(a: &AttentionMatrix, max_col: usize, tol: f64) -> Vec<f64> {
    a.cells(max_col).map(|(i, j)| a.get(i, j)).filter(|v| v.abs() > tol).collect()
}

/// Number of distinct nonzero values (entries with `|v| <= tol` count as zero).
pub fn lrc_of_matrix(a: &AttentionMatrix, tol: f64) -> usize {
    group_values(&mut nonzero_entries(a, a.n, tol), tol).len()
}

/// Distinct nonzero values in columns `1..=n0`.
pub fn lrc_of_prefix_function(a_star: &AttentionMatrix, n0: usize) -> usize {
    group_values(&mut nonzero_entries(a_star, n0, DEFAULT_TOL), DEFAULT_TOL).len()
}

/// Class table of a matrix: value classes `0..k` for the groups in `reps`
/// and `k` for everything else.
fn classes_prf(name: &str, a: &AttentionMatrix, reps: Vec<f64>, tol: f64) -> Prf {
    let n = a.n;
    let k = reps.len();
    let mut all = nonzero_entries(a, n, tol);
    all.sort_by(f64::total_cmp);
    // Map each cell to the group of its value if that group is in `reps`.
    let full_reps = group_values(&mut all, tol);
    let mut table = vec![k; n * n];
    for (i, j) in a.cells(n) {
        let v = a.get(i, j);
        if v.abs() <= tol {
            continue;
        }
        let g = class_index(&full_reps, v).expect("value is grouped");
        if let Some(c) = reps.iter().position(|&r| class_index(&full_reps, r) == Some(g)) {
            table[(i - 1) * n + (j - 1)] = c;
        }
    }
    Prf::new(name, k + 1, move |q, key| {
        if q < n && key <= q {
            table[key * n + q]
        } else {
            k
        }
    })
}

/// One relation value per value class of `a_star` and a final catch-all
/// value for the zero cells.
pub fn nonincreasing_prf(a_star: &AttentionMatrix, n0: usize) -> Result<Prf, PolaError> {
    let prefix = lrc_of_prefix_function(a_star, n0);
    let full = lrc_of_matrix(a_star, DEFAULT_TOL);
    if prefix != full {
        return Err(PolaError::IncreasingLrc { prefix, full });
    }
    let reps = group_values(&mut nonzero_entries(a_star, a_star.n, DEFAULT_TOL), DEFAULT_TOL);
    Ok(classes_prf("nonincreasing", a_star, reps, DEFAULT_TOL))
}

/// The same construction built only from what the prefix block shows:
/// values first seen outside columns `1..=n0` fall into the catch-all.
pub fn prefix_prf(a_star: &AttentionMatrix, n0: usize) -> Prf {
    let reps = group_values(&mut nonzero_entries(a_star, n0, DEFAULT_TOL), DEFAULT_TOL);
    classes_prf("prefix", a_star, reps, DEFAULT_TOL)
}

/// Least-norm `q` interpolating the observed block `b0`: the shared value of
/// each observed class, zero for unobserved classes.
pub fn min_norm_solution(
    b0: &AttentionMatrix,
    indicators: &IndicatorFamily,
) -> Result<PolaParams, PolaError> {
    if b0.n > indicators.n {
        return Err(PolaError::DimensionMismatch { expected: indicators.n, got: b0.n });
    }
    let mut seen: Vec<Option<f64>> = vec![None; indicators.s_max];
    let table = indicators.class_table();
    for (i, j) in b0.cells(b0.n) {
        let Some(s) = table[(i - 1) * indicators.n + (j - 1)] else {
            continue;
        };
        let v = b0.get(i, j);
        match seen[s] {
            None => seen[s] = Some(v),
            Some(first) if (first - v).abs() > DEFAULT_TOL => {
                return Err(PolaError::InconsistentClass { class: s, first, other: v });
            }
            Some(_) => {}
        }
    }
    Ok(PolaParams { q: seen.into_iter().map(|v| v.unwrap_or(0.0)).collect() })
}

/// Outcome of [`train_pola_gd`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdResult {
    pub params: PolaParams,
    pub steps: usize,
    pub converged: bool,
    pub final_loss: f64,
}

fn features(data: &PolaDataset, indicators: &IndicatorFamily) -> Result<Vec<Vec<f64>>, PolaError> {
    let table = indicators.class_table();
    let n = indicators.n;
    data.pairs
        .iter()
        .map(|p| {
            if p.x.len() != n {
                return Err(PolaError::DimensionMismatch { expected: n, got: p.x.len() });
            }
            if p.n == 0 || p.n > n {
                return Err(PolaError::PositionOutOfRange { n: p.n, max: n });
            }
            let mut f = vec![0.0; indicators.s_max];
            for i in 1..=p.n {
                if let Some(s) = table[(i - 1) * n + (p.n - 1)] {
                    f[s] += p.x[i - 1];
                }
            }
            Ok(f)
        })
        .collect()
}

/// `1 / (2 tr(Phi^T Phi))`, below `2 / lambda_max` for the squared loss.
pub fn default_lr(data: &PolaDataset, indicators: &IndicatorFamily) -> Result<f64, PolaError> {
    let tr: f64 = features(data, indicators)?
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok(if tr > 0.0 { 1.0 / (2.0 * tr) } else { 1.0 })
}

/// Full-batch gradient descent on `0.5 * sum (f(x, n) - label)^2` from
/// `q = 0`. Stops once the gradient's max-norm is at most `tol`.
pub fn train_pola_gd(
    data: &PolaDataset,
    indicators: &IndicatorFamily,
    lr: f64,
    steps: usize,
    tol: f64,
) -> Result<GdResult, PolaError> {
    let phi = features(data, indicators)?;
    let s = indicators.s_max;
    let mut q = vec![0.0; s];
    let loss_and_grad = |q: &[f64]| {
        let mut grad = vec![0.0; s];
        let mut loss = 0.0;
        for (f, p) in phi.iter().zip(&data.pairs) {
            let r: f64 = f.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() - p.label;
            loss += 0.5 * r * r;
            for (g, v) in grad.iter_mut().zip(f) {
                *g += r * v;
            }
        }
        (loss, grad)
    };
    let (initial, _) = loss_and_grad(&q);
    let guard = DIVERGENCE_GUARD * initial.max(1.0);
    for step in 0..=steps {
        let (loss, grad) = loss_and_grad(&q);
        if !loss.is_finite() || loss > guard {
            return Err(PolaError::Diverged { step, loss });
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= tol || step == steps {
            return Ok(GdResult {
                params: PolaParams { q },
                steps: step,
                converged: gmax <= tol,
                final_loss: loss,
            });
        }
        for (qv, g) in q.iter_mut().zip(&grad) {
            *qv -= lr * g;
        }
    }
    unreachable!("loop returns on the last step")
}

/// Result of an exhaustive length-generalization check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgReport {
    pub exact: bool,
    pub max_error: f64,
    /// `(i, n)`: the basis input `e_i` at position `n` with the largest error.
    pub witness: Option<(usize, usize)>,
}

/// Compares predictions with the target for every basis input `e_i` and
/// position `n <= n_max`; by linearity this covers all inputs.
pub fn verify_lg(
    q: &PolaParams,
    indicators: &IndicatorFamily,
    a_star: &AttentionMatrix,
    n_max: usize,
    tol: f64,
) -> Result<LgReport, PolaError> {
    if a_star.n != indicators.n {
        return Err(PolaError::DimensionMismatch { expected: indicators.n, got: a_star.n });
    }
    let a = indicators.compose(q)?;
    let mut max_error = 0.0;
    let mut arg = None;
    for (i, n) in a_star.cells(n_max) {
        let err = (a.get(i, n) - a_star.get(i, n)).abs();
        if arg.is_none() || err > max_error {
            max_error = err;
            arg = Some((i, n));
        }
    }
    let exact = max_error <= tol;
    Ok(LgReport { exact, max_error, witness: if exact { None } else { arg } })
}

fn random_value(rng: &mut impl Rng, avoid: &[f64]) -> f64 {
    loop {
        let v: f64 = rng.gen_range(0.5..5.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if avoid.iter().all(|a| (a - v).abs() > 0.1) {
            return v;
        }
    }
}

fn fill_from_palette(n: usize, n0: usize, palette: &[f64], rng: &mut impl Rng) -> AttentionMatrix {
    let mut a = AttentionMatrix::zeros(n);
    for (i, j) in a.cells(n).collect::<Vec<_>>() {
        if rng.gen_bool(0.7) {
            a.set(i, j, palette[rng.gen_range(0..palette.len())]);
        }
    }
    // Every palette value must be visible inside the prefix block.
    let mut prefix_cells: Vec<(usize, usize)> = a.cells(n0).collect();
    for &v in palette {
        let k = rng.gen_range(0..prefix_cells.len());
        let (i, j) = prefix_cells.swap_remove(k);
        a.set(i, j, v);
    }
    a
}

/// A random target whose value classes (at most four, and no more than the
/// prefix block has cells) all appear in the prefix block. Requires `n0 >= 1`.
pub fn random_nonincreasing_target(n: usize, n0: usize, rng: &mut impl Rng) -> AttentionMatrix {
    let k = rng.gen_range(1..=(n0 * (n0 + 1) / 2).min(4));
    let mut palette = Vec::with_capacity(k);
    for _ in 0..k {
        let v = random_value(rng, &palette);
        palette.push(v);
    }
    fill_from_palette(n, n0, &palette, rng)
}

/// A random target with at least one value that first appears in a column
/// beyond `n0`. Requires `n > n0`.
pub fn random_increasing_target(n: usize, n0: usize, rng: &mut impl Rng) -> AttentionMatrix {
    assert!(n > n0, "need columns beyond the prefix");
    let mut a = random_nonincreasing_target(n, n0, rng);
    let palette = group_values(&mut nonzero_entries(&a, n, DEFAULT_TOL), DEFAULT_TOL);
    let fresh = random_value(rng, &palette);
    let plants = rng.gen_range(1..=3);
    for _ in 0..plants {
        let j = rng.gen_range(n0 + 1..=n);
        let i = rng.gen_range(1..=j);
        a.set(i, j, fresh);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::{standard_prf, StandardKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Minimal number of value-constant blocks over all partitions of the
    /// nonzero support.
    fn partition_oracle(a: &AttentionMatrix) -> usize {
        let vals: Vec<f64> = a.cells(a.n).map(|(i, j)| a.get(i, j)).filter(|v| *v != 0.0).collect();
        let mut best = usize::MAX;
        let mut blocks: Vec<Vec<f64>> = Vec::new();
        fn rec(vals: &[f64], blocks: &mut Vec<Vec<f64>>, best: &mut usize) {
            if blocks.len() >= *best {
                return;
            }
            let Some((&v, rest)) = vals.split_first() else {
                *best = blocks.len();
                return;
            };
            for b in 0..blocks.len() {
                if blocks[b].iter().all(|&u| u == v) {
                    blocks[b].push(v);
                    rec(rest, blocks, best);
                    blocks[b].pop();
                }
            }
            blocks.push(vec![v]);
            rec(rest, blocks, best);
            blocks.pop();
        }
        rec(&vals, &mut blocks, &mut best);
        best
    }

    fn upper(rows: &[&[f64]]) -> AttentionMatrix {
        AttentionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let a = upper(&[&[0.0, 2.0, 0.0], &[0.0, 3.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(pola_forward(&[1.0, 2.0, 3.0], 2, &a).unwrap(), 8.0);
        assert_eq!(pola_forward(&[1.0, 2.0, 3.0], 2, &AttentionMatrix::zeros(3)).unwrap(), 0.0);
        let mut e = AttentionMatrix::zeros(2);
        e.set(1, 1, 1.0);
        assert_eq!(pola_forward(&[1.0, 0.0], 1, &e).unwrap(), 1.0);
        assert!(matches!(pola_forward(&[1.0], 1, &e), Err(PolaError::DimensionMismatch { .. })));
        assert!(matches!(pola_forward(&[1.0, 0.0], 3, &e), Err(PolaError::PositionOutOfRange { .. })));
    }

    #[test]
    fn lower_entries_rejected() {
        let r = AttentionMatrix::from_rows(&[vec![1.0, 0.0], vec![5.0, 1.0]]);
        assert_eq!(r, Err(PolaError::NotUpperTriangular { i: 2, j: 1 }));
    }

    #[test]
    fn rpe_indicators_are_diagonals() {
        let ind = prf_to_indicators(&standard_prf(StandardKind::Rpe, 3), 3).unwrap();
        assert_eq!(ind.s_max, 3);
        for i in 1..=3 {
            for j in i..=3 {
                assert_eq!(ind.class_of(i, j), Some(j - i));
            }
        }
    }

    #[test]
    fn ape_indicators_are_singletons() {
        let ind = prf_to_indicators(&standard_prf(StandardKind::Ape, 4), 4).unwrap();
        let nonempty: Vec<usize> = ind.members.iter().map(|m| m.iter().filter(|&&b| b).count()).filter(|&c| c > 0).collect();
        assert_eq!(nonempty.len(), 10);
        assert!(nonempty.iter().all(|&c| c == 1));
    }

    #[test]
    fn constant_prf_single_mask() {
        let ind = prf_to_indicators(&Prf::new("one", 2, |_, _| 1), 3).unwrap();
        assert_eq!(ind.members[1].iter().filter(|&&b| b).count(), 6);
        assert!(ind.members[0].iter().all(|&b| !b));
        let bad = Prf::new("bad", 1, |_, _| 1);
        assert!(matches!(prf_to_indicators(&bad, 2), Err(PolaError::PrfValueOutOfRange { .. })));
    }

    #[test]
    fn lrc_examples() {
        assert_eq!(lrc_of_matrix(&AttentionMatrix::zeros(3), DEFAULT_TOL), 0);
        let a = upper(&[&[2.0, 2.0, 0.0], &[0.0, 5.0, 0.0], &[0.0, 0.0, 0.0]]);
        assert_eq!(lrc_of_matrix(&a, DEFAULT_TOL), 2);
        assert_eq!(partition_oracle(&a), 2);
        let mut id = AttentionMatrix::zeros(4);
        for i in 1..=4 {
            id.set(i, i, 1.0);
        }
        assert_eq!(lrc_of_matrix(&id, DEFAULT_TOL), 1);
    }

    #[test]
    fn prefix_lrc_witness() {
        let mut a = AttentionMatrix::zeros(4);
        a.set(1, 1, 1.0);
        a.set(1, 2, 1.0);
        a.set(2, 3, 1.0);
        a.set(1, 4, 7.0);
        assert_eq!(lrc_of_prefix_function(&a, 2), 1);
        assert_eq!(lrc_of_matrix(&a, DEFAULT_TOL), 2);
        assert!(matches!(nonincreasing_prf(&a, 2), Err(PolaError::IncreasingLrc { prefix: 1, full: 2 })));
    }

    fn toeplitz(n: usize, diag: &[f64]) -> AttentionMatrix {
        let mut a = AttentionMatrix::zeros(n);
        for j in 1..=n {
            for i in 1..=j {
                if let Some(&v) = diag.get(j - i) {
                    a.set(i, j, v);
                }
            }
        }
        a
    }

    #[test]
    fn toeplitz_prf_follows_diagonals() {
        let a = toeplitz(6, &[1.5, -2.0, 3.0]);
        assert_eq!(lrc_of_prefix_function(&a, 4), 3);
        assert_eq!(lrc_of_matrix(&a, DEFAULT_TOL), 3);
        let prf = nonincreasing_prf(&a, 4).unwrap();
        assert_eq!(prf.s_max(), 4);
        for q in 0..6 {
            for k in 0..=q {
                for q2 in 0..6 {
                    for k2 in 0..=q2 {
                        if q - k == q2 - k2 {
                            assert_eq!(prf.value(q, k), prf.value(q2, k2));
                        }
                    }
                }
            }
        }
        assert_eq!(prf.value(5, 0), 3);
    }

    #[test]
    fn constant_target_uses_one_class() {
        let a = toeplitz(4, &[2.5; 4]);
        let prf = nonincreasing_prf(&a, 2).unwrap();
        assert_eq!(prf.s_max(), 2);
        assert!((0..4).all(|q| (0..=q).all(|k| prf.value(q, k) == 0)));
    }

    #[test]
    fn min_norm_examples() {
        let ind = prf_to_indicators(&Prf::new("c", 2, |_, _| 0), 3).unwrap();
        let b0 = toeplitz(2, &[4.0, 4.0]);
        assert_eq!(min_norm_solution(&b0, &ind).unwrap().q, vec![4.0, 0.0]);
        assert_eq!(min_norm_solution(&AttentionMatrix::zeros(0), &ind).unwrap().q, vec![0.0, 0.0]);
        let bad = upper(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(min_norm_solution(&bad, &ind), Err(PolaError::InconsistentClass { class: 0, .. })));
    }

    #[test]
    fn gd_matches_closed_form_on_toeplitz() {
        let a = toeplitz(8, &[1.0, -0.5, 2.0]);
        let prf = nonincreasing_prf(&a, 5).unwrap();
        let ind = prf_to_indicators(&prf, 8).unwrap();
        let data = PolaDataset::basis(&a, 5);
        let lr = default_lr(&data, &ind).unwrap();
        let gd = train_pola_gd(&data, &ind, lr, DEFAULT_GD_STEPS, DEFAULT_GD_TOL).unwrap();
        assert!(gd.converged);
        let closed = min_norm_solution(&a.prefix(5), &ind).unwrap();
        for (x, y) in gd.params.q.iter().zip(&closed.q) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(verify_lg(&closed, &ind, &a, 8, 1e-8).unwrap().exact);
    }

    #[test]
    fn gd_zero_target_stays_zero() {
        let a = AttentionMatrix::zeros(4);
        let ind = prf_to_indicators(&standard_prf(StandardKind::Rpe, 4), 4).unwrap();
        let gd = train_pola_gd(&PolaDataset::basis(&a, 3), &ind, 0.1, 100, DEFAULT_GD_TOL).unwrap();
        assert!(gd.params.q.iter().all(|&v| v == 0.0));
        assert_eq!(gd.steps, 0);
    }

    #[test]
    fn gd_large_lr_diverges() {
        let a = toeplitz(5, &[1.0, 2.0]);
        let ind = prf_to_indicators(&nonincreasing_prf(&a, 3).unwrap(), 5).unwrap();
        let data = PolaDataset::basis(&a, 3);
        // The Gram matrix is diagonal with class counts; 2 / lambda_max < 1.
        let r = train_pola_gd(&data, &ind, 1e3, 1000, DEFAULT_GD_TOL);
        assert!(matches!(r, Err(PolaError::Diverged { .. })));
    }

    #[test]
    fn verify_lg_reports_witness() {
        let a = toeplitz(3, &[0.0, 1.0]);
        let ind = prf_to_indicators(&standard_prf(StandardKind::Rpe, 3), 3).unwrap();
        let r = verify_lg(&PolaParams { q: vec![0.0; 3] }, &ind, &a, 3, 1e-8).unwrap();
        assert!(!r.exact);
        let (i, n) = r.witness.unwrap();
        assert_eq!(n - i, 1);
    }

    #[test]
    fn prefix_pe_fails_beyond_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_increasing_target(12, 6, &mut rng);
            let ind = prf_to_indicators(&prefix_prf(&a, 6), 12).unwrap();
            let q = min_norm_solution(&a.prefix(6), &ind).unwrap();
            let r = verify_lg(&q, &ind, &a, 12, 1e-8).unwrap();
            assert!(!r.exact);
            assert!(r.witness.unwrap().1 > 6);
        }
    }

    #[test]
    fn json_roundtrip() {
        let a = toeplitz(3, &[1.0, 2.0]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<AttentionMatrix>(&s).unwrap(), a);
    }

    #[test]
    fn oracle_agrees_on_small_slice() {
        // A thinned version of the exhaustive sweep; the full sweep runs in
        // the acceptance suite.
        for code in (0..4096u32).step_by(7) {
            let mut a = AttentionMatrix::zeros(3);
            let mut c = code;
            for (i, j) in [(1, 1), (1, 2), (2, 2), (1, 3), (2, 3), (3, 3)] {
                a.set(i, j, (c % 4) as f64);
                c /= 4;
            }
            assert_eq!(lrc_of_matrix(&a, DEFAULT_TOL), partition_oracle(&a));
        }
    }

    fn arb_upper(n: usize) -> impl Strategy<Value = AttentionMatrix> {
        proptest::collection::vec(-3i32..=3, n * n).prop_map(move |v| {
            let mut a = AttentionMatrix::zeros(n);
            for i in 1..=n {
                for j in i..=n {
                    a.set(i, j, v[(i - 1) * n + j - 1] as f64 * 0.5);
                }
            }
            a
        })
    }

    proptest! {
        #[test]
        fn forward_is_linear(a in arb_upper(5), x in proptest::collection::vec(-2.0f64..2.0, 5),
                             y in proptest::collection::vec(-2.0f64..2.0, 5),
                             al in -3.0f64..3.0, be in -3.0f64..3.0, n in 1usize..=5) {
            let z: Vec<f64> = x.iter().zip(&y).map(|(u, v)| al * u + be * v).collect();
            let lhs = pola_forward(&z, n, &a).unwrap();
            let rhs = al * pola_forward(&x, n, &a).unwrap() + be * pola_forward(&y, n, &a).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn reparameterization_bounds_lrc(q in proptest::collection::vec(-2i32..=2, 4), shift in 0usize..3) {
            let prf = Prf::new("mod4", 4, move |i, j| (i - j + shift) % 4);
            let ind = prf_to_indicators(&prf, 6).unwrap();
            let params = PolaParams { q: q.iter().map(|&v| v as f64).collect() };
            let a = ind.compose(&params).unwrap();
            let mut distinct: Vec<i32> = q.iter().copied().filter(|&v| v != 0).collect();
            distinct.sort();
            distinct.dedup();
            prop_assert!(lrc_of_matrix(&a, DEFAULT_TOL) <= distinct.len());
        }

        #[test]
        fn lrc_matches_partition_oracle(a in arb_upper(3)) {
            prop_assert_eq!(lrc_of_matrix(&a, DEFAULT_TOL), partition_oracle(&a));
        }

        #[test]
        fn nonincreasing_targets_generalize(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_nonincreasing_target(10, 5, &mut rng);
            let ind = prf_to_indicators(&nonincreasing_prf(&a, 5).unwrap(), 10).unwrap();
            let q = min_norm_solution(&a.prefix(5), &ind).unwrap();
            prop_assert!(verify_lg(&q, &ind, &a, 10, 1e-8).unwrap().exact);
        }
    }
}
