//! Circuit representations of sequential computation.
//!
//! Positions are 1-based: `z_1..z_n` are inputs and each later position is
//! computed by one operator from earlier positions. Relation functions from
//! [`crate::pe`] are 0-based; step `i` with parent `j` is looked up at query
//! `i - 2` and key `j - 1`, i.e. at the token that predicts `z_i`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pe::{PrfSh, Relation};

const MAX_COUNTEREXAMPLES: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CircuitError {
    #[error("no circuit for input length {0}")]
    UndefinedLength(usize),
    #[error("step {position} references parent {parent}, which is not earlier")]
    BadParent { position: usize, parent: usize },
    #[error("operator {0} does not exist")]
    UnknownOperator(usize),
    #[error("operator {op} has arity {arity} but step {position} lists {got} parents")]
    ArityMismatch { op: usize, arity: usize, position: usize, got: usize },
    #[error("symbol {symbol} outside alphabet of size {size}")]
    SymbolOutOfRange { symbol: u32, size: u32 },
    #[error("operator table has {got} entries, expected {expected}")]
    BadTable { expected: usize, got: usize },
    #[error("search bounds exceeded: {0}")]
    BoundsExceeded(String),
}

/// A total operator `Sigma^arity -> Sigma`, tabulated in mixed radix with the
/// first argument most significant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitOperator {
    pub id: String,
    pub arity: usize,
    pub table: Vec<u32>,
}

impl UnitOperator {
    pub fn from_fn(id: &str, arity: usize, alphabet: u32, f: impl Fn(&[u32]) -> u32) -> Self {
        let size = (alphabet as usize).pow(arity as u32);
        let mut args = vec![0u32; arity];
        let table = (0..size)
            .map(|mut idx| {
                for slot in (0..arity).rev() {
                    args[slot] = (idx % alphabet as usize) as u32;
                    idx /= alphabet as usize;
                }
                f(&args) % alphabet
            })
            .collect();
        Self { id: id.to_string(), arity, table }
    }

    pub fn apply(&self, args: &[u32], alphabet: u32) -> u32 {
        let idx = args.iter().fold(0usize, |acc, &a| acc * alphabet as usize + a as usize);
        self.table[idx]
    }

    /// Extensional identity: arity and table, ignoring the name.
    fn signature(&self) -> (usize, &[u32]) {
        (self.arity, &self.table)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitStep {
    pub position: usize,
    /// Index into the family's operator list.
    pub op: usize,
    pub parents: Vec<usize>,
}

/// The circuit `C_n`. Input gates are implicit at positions `1..=input_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    pub n: usize,
    pub input_len: usize,
    pub steps: Vec<CircuitStep>,
}

impl Circuit {
    pub fn max_position(&self) -> usize {
        self.input_len + self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitFamily {
    pub name: String,
    pub alphabet: u32,
    pub operators: Vec<UnitOperator>,
    pub circuits: Vec<Circuit>,
}

impl CircuitFamily {
    pub fn circuit(&self, n: usize) -> Option<&Circuit> {
        self.circuits.iter().find(|c| c.n == n)
    }

    /// Checks step coverage, parent ordering, arities and table sizes.
    pub fn validate(&self) -> Result<(), CircuitError> {
        for op in &self.operators {
            let expected = (self.alphabet as usize).pow(op.arity as u32);
            if op.table.len() != expected {
                return Err(CircuitError::BadTable { expected, got: op.table.len() });
            }
            if let Some(&s) = op.table.iter().find(|&&s| s >= self.alphabet) {
                return Err(CircuitError::SymbolOutOfRange { symbol: s, size: self.alphabet });
            }
        }
        for c in &self.circuits {
            for (k, step) in c.steps.iter().enumerate() {
                let position = c.input_len + k + 1;
                if step.position != position {
                    return Err(CircuitError::BadParent { position: step.position, parent: position });
                }
                let op = self.operators.get(step.op).ok_or(CircuitError::UnknownOperator(step.op))?;
                if op.arity != step.parents.len() {
                    return Err(CircuitError::ArityMismatch {
                        op: step.op,
                        arity: op.arity,
                        position,
                        got: step.parents.len(),
                    });
                }
                if let Some(&p) = step.parents.iter().find(|&&p| p == 0 || p >= position) {
                    return Err(CircuitError::BadParent { position, parent: p });
                }
            }
        }
        Ok(())
    }

    /// Extensional class of every operator, numbered by first occurrence.
    fn operator_classes(&self) -> Vec<usize> {
        let mut seen: Vec<(usize, &[u32])> = Vec::new();
        self.operators
            .iter()
            .map(|op| {
                let sig = op.signature();
                match seen.iter().position(|s| *s == sig) {
                    Some(k) => k,
                    None => {
                        seen.push(sig);
                        seen.len() - 1
                    }
                }
            })
            .collect()
    }
}

/// Runs the circuit whose input length matches `x` and returns the outputs.
pub fn eval_circuit(family: &CircuitFamily, x: &[u32]) -> Result<Vec<u32>, CircuitError> {
    let c = family
        .circuits
        .iter()
        .find(|c| c.input_len == x.len())
        .ok_or(CircuitError::UndefinedLength(x.len()))?;
    if let Some(&s) = x.iter().find(|&&s| s >= family.alphabet) {
        return Err(CircuitError::SymbolOutOfRange { symbol: s, size: family.alphabet });
    }
    let mut z = x.to_vec();
    for step in &c.steps {
        let op = family.operators.get(step.op).ok_or(CircuitError::UnknownOperator(step.op))?;
        if op.arity != step.parents.len() {
            return Err(CircuitError::ArityMismatch {
                op: step.op,
                arity: op.arity,
                position: step.position,
                got: step.parents.len(),
            });
        }
        let mut args = Vec::with_capacity(op.arity);
        for &p in &step.parents {
            if p == 0 || p >= step.position || p > z.len() {
                return Err(CircuitError::BadParent { position: step.position, parent: p });
            }
            args.push(z[p - 1]);
        }
        z.push(op.apply(&args, family.alphabet));
    }
    Ok(z.split_off(c.input_len))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinFamily {
    Parity,
    /// Parity padded to `n_max` digits followed by a separator input that
    /// seeds the running XOR with 0.
    ParityAligned,
    Multiplication1N,
    IncrementChainA,
    IncrementChainB,
}

impl BuiltinFamily {
    pub const ALL: [BuiltinFamily; 5] = [
        Self::Parity,
        Self::ParityAligned,
        Self::Multiplication1N,
        Self::IncrementChainA,
        Self::IncrementChainB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parity => "parity",
            Self::ParityAligned => "parity_aligned",
            Self::Multiplication1N => "multiplication_1n",
            Self::IncrementChainA => "increment_chain_a",
            Self::IncrementChainB => "increment_chain_b",
        }
    }
}

impl std::str::FromStr for BuiltinFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown circuit family `{s}`"))
    }
}

fn step(position: usize, op: usize, parents: &[usize]) -> CircuitStep {
    CircuitStep { position, op, parents: parents.to_vec() }
}

/// The literal constructions. Multiplication is defined from `n = 2`.
pub fn builtin_family(kind: BuiltinFamily, n_max: usize) -> CircuitFamily {
    let n_max = n_max.max(1);
    let (alphabet, operators, circuits) = match kind {
        BuiltinFamily::Parity => {
            let ops = vec![
                UnitOperator::from_fn("g_id", 1, 2, |a| a[0]),
                UnitOperator::from_fn("g_xor", 2, 2, |a| a[0] ^ a[1]),
            ];
            let circuits = (1..=n_max)
                .map(|n| {
                    let mut steps = vec![step(n + 1, 0, &[1])];
                    steps.extend((2..=n).map(|k| step(n + k, 1, &[k, n + k - 1])));
                    Circuit { n, input_len: n, steps }
                })
                .collect();
            (2, ops, circuits)
        }
        BuiltinFamily::ParityAligned => {
            let ops = vec![UnitOperator::from_fn("g_xor", 2, 2, |a| a[0] ^ a[1])];
            let big = n_max;
            let circuits = (1..=n_max)
                .map(|n| Circuit {
                    n,
                    input_len: big + 1,
                    steps: (1..=big).map(|k| step(big + 1 + k, 0, &[k, big + k])).collect(),
                })
                .collect();
            (2, ops, circuits)
        }
        BuiltinFamily::Multiplication1N => {
            let ops = vec![
                UnitOperator::from_fn("g1", 2, 10, |a| a[0] * a[1] % 10),
                UnitOperator::from_fn("g2", 4, 10, |a| {
                    let low = a[0] * a[1] % 10;
                    (a[0] * a[2] % 10 + a[0] * a[1] / 10 + u32::from(a[3] < low)) % 10
                }),
                UnitOperator::from_fn("g3", 3, 10, |a| {
                    a[0] * a[1] / 10 + u32::from(a[2] < a[0] * a[1] % 10)
                }),
            ];
            let circuits = (2..=n_max.max(2))
                .map(|n| {
                    let mut steps = vec![step(n + 1, 0, &[1, 2])];
                    steps.extend((2..n).map(|k| step(n + k, 1, &[1, k, k + 1, n + k - 1])));
                    steps.push(step(2 * n, 2, &[1, n, 2 * n - 1]));
                    Circuit { n, input_len: n, steps }
                })
                .collect();
            (10, ops, circuits)
        }
        BuiltinFamily::IncrementChainA | BuiltinFamily::IncrementChainB => {
            let ops = vec![
                UnitOperator::from_fn("g1", 1, 10, |a| (a[0] + 1) % 10),
                UnitOperator::from_fn("g2", 1, 10, |a| (a[0] + 2) % 10),
            ];
            let circuits = (1..=n_max)
                .map(|n| {
                    let mut steps = vec![step(n + 1, 0, &[1])];
                    if kind == BuiltinFamily::IncrementChainA {
                        steps.extend((2..n).map(|k| step(n + k, 0, &[n + k - 1])));
                        if n >= 2 {
                            // At n = 2 the literal parent 2n - 2 is an input;
                            // the value two steps back is x_1 itself.
                            let parent = if n == 2 { 1 } else { 2 * n - 2 };
                            steps.push(step(2 * n, 1, &[parent]));
                        }
                    } else {
                        if n >= 2 {
                            steps.push(step(n + 2, 1, &[1]));
                        }
                        steps.extend((3..=n).map(|k| step(n + k, 1, &[n + k - 2])));
                    }
                    Circuit { n, input_len: n, steps }
                })
                .collect();
            (10, ops, circuits)
        }
    };
    CircuitFamily { name: kind.name().to_string(), alphabet, operators, circuits }
}

/// Number of distinct (extensional) operators referenced by some step.
pub fn src_upper_bound(family: &CircuitFamily) -> usize {
    let classes = family.operator_classes();
    family
        .circuits
        .iter()
        .flat_map(|c| c.steps.iter().map(|s| classes[s.op]))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Oracle `x -> y` used by the exhaustive search.
pub type SeqOracle<'a> = &'a dyn Fn(&[u32]) -> Vec<u32>;

fn all_inputs(alphabet: u32, n: usize) -> Vec<Vec<u32>> {
    let total = (alphabet as usize).pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut x = vec![0u32; n];
            for slot in (0..n).rev() {
                x[slot] = (idx % alphabet as usize) as u32;
                idx /= alphabet as usize;
            }
            x
        })
        .collect()
}

fn parent_tuples(position: usize, arity: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(arity);
    fn rec(position: usize, arity: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == arity {
            out.push(cur.clone());
            return;
        }
        for p in 1..position {
            if !cur.contains(&p) {
                cur.push(p);
                rec(position, arity, cur, out);
                cur.pop();
            }
        }
    }
    rec(position, arity, &mut cur, &mut out);
    out
}

/// Minimal number of operators (arity `1..=arity_max`, distinct parents)
/// over all circuit families reproducing `oracle` for every input of length
/// `1..=n_max`, or `None` if more than `ops_max` would be needed.
pub fn src_bruteforce(
    oracle: SeqOracle<'_>,
    alphabet: u32,
    n_max: usize,
    arity_max: usize,
    ops_max: usize,
) -> Result<Option<usize>, CircuitError> {
    if !(1..=3).contains(&alphabet) || n_max > 3 || arity_max > 2 || ops_max > 3 || arity_max == 0 {
        return Err(CircuitError::BoundsExceeded(format!(
            "alphabet {alphabet} (<= 3), n_max {n_max} (<= 3), arity {arity_max} (1..=2), ops {ops_max} (<= 3)"
        )));
    }
    // Each step, with its traces over all inputs, is an independent
    // constraint: some operator applied to some parent tuple must reproduce
    // it. Collect per step the partial tables any valid operator must match.
    struct Requirement {
        step: usize,
        arity: usize,
        entries: Vec<(usize, u32)>,
    }
    let mut requirements = Vec::new();
    let mut n_steps = 0;
    for n in 1..=n_max {
        let traces: Vec<Vec<u32>> = all_inputs(alphabet, n)
            .into_iter()
            .map(|x| {
                let mut z = x.clone();
                z.extend(oracle(&x));
                z
            })
            .collect();
        let len = traces[0].len();
        if traces.iter().any(|t| t.len() != len) {
            return Ok(None);
        }
        for position in n + 1..=len {
            let id = n_steps;
            n_steps += 1;
            for arity in 1..=arity_max {
                'tuples: for parents in parent_tuples(position, arity) {
                    let mut entries: BTreeMap<usize, u32> = BTreeMap::new();
                    for z in &traces {
                        let idx = parents.iter().fold(0usize, |a, &p| a * alphabet as usize + z[p - 1] as usize);
                        let want = z[position - 1];
                        if *entries.entry(idx).or_insert(want) != want {
                            continue 'tuples;
                        }
                    }
                    requirements.push(Requirement { step: id, arity, entries: entries.into_iter().collect() });
                }
            }
        }
    }
    if n_steps == 0 {
        return Ok(Some(0));
    }
    assert!(n_steps <= 64, "step count bounded by the guards");
    let mut masks: BTreeSet<u64> = BTreeSet::new();
    for arity in 1..=arity_max {
        let size = (alphabet as usize).pow(arity as u32);
        let count = (alphabet as usize).pow(size as u32);
        let reqs: Vec<&Requirement> = requirements.iter().filter(|r| r.arity == arity).collect();
        for code in 0..count {
            let mut table = vec![0u32; size];
            let mut c = code;
            for t in table.iter_mut() {
                *t = (c % alphabet as usize) as u32;
                c /= alphabet as usize;
            }
            let mask = reqs
                .iter()
                .filter(|r| r.entries.iter().all(|&(i, v)| table[i] == v))
                .fold(0u64, |m, r| m | (1 << r.step));
            if mask != 0 {
                masks.insert(mask);
            }
        }
    }
    let masks: Vec<u64> = masks.iter().copied().filter(|&m| !masks.iter().any(|&o| o != m && o & m == m)).collect();
    let full = if n_steps == 64 { u64::MAX } else { (1u64 << n_steps) - 1 };
    fn cover(masks: &[u64], start: usize, acc: u64, left: usize, full: u64) -> bool {
        if acc == full {
            return true;
        }
        if left == 0 {
            return false;
        }
        (start..masks.len()).any(|k| cover(masks, k + 1, acc | masks[k], left - 1, full))
    }
    Ok((1..=ops_max).find(|&k| cover(&masks, 0, 0, k, full)))
}

/// Which query positions enter the distinctness condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryDomain {
    /// Every position, input gates included (the definition read literally).
    AllPositions,
    /// Only positions that compute an output step.
    OutputSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Role {
    /// Extensional operator class.
    pub op_class: usize,
    pub op: usize,
    /// 1-based parent slot.
    pub slot: usize,
}

/// A (scale, step, key) site, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub n: usize,
    pub position: usize,
    pub key: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Counterexample {
    /// One relation value is used by two different roles.
    RoleClash { value: usize, first: (Site, Role), second: (Site, Role) },
    /// A pair that is never a (step, parent) edge shares a parent-edge value.
    NonParentCollision { value: usize, site: Site, parent: (Site, Role) },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub consistent: bool,
    pub distinct: bool,
    pub counterexamples: Vec<Counterexample>,
}

fn relation_at(prf: &dyn Relation, position: usize, key: usize, n: usize) -> usize {
    prf.relation(position - 2, key - 1, n)
}

/// Parent edges of a family: `(site, role)` for every step and parent slot.
fn parent_edges(family: &CircuitFamily, n_max: usize) -> Vec<(Site, Role)> {
    let classes = family.operator_classes();
    let mut out = Vec::new();
    for c in family.circuits.iter().filter(|c| c.n <= n_max) {
        for s in &c.steps {
            for (k, &j) in s.parents.iter().enumerate() {
                if s.parents[..k].contains(&j) {
                    continue;
                }
                out.push((
                    Site { n: c.n, position: s.position, key: j },
                    Role { op_class: classes[s.op], op: s.op, slot: k + 1 },
                ));
            }
        }
    }
    out
}

/// Checks consistency and distinctness of `prf` against the family for all
/// scales `<= n_max`, with the definition read literally.
pub fn check_prf_characterizes(
    prf: &dyn Relation,
    family: &CircuitFamily,
    n_max: usize,
) -> CharacterizationReport {
    check_prf_characterizes_in(prf, family, n_max, QueryDomain::AllPositions)
}

pub fn check_prf_characterizes_in(
    prf: &dyn Relation,
    family: &CircuitFamily,
    n_max: usize,
    domain: QueryDomain,
) -> CharacterizationReport {
    let edges = parent_edges(family, n_max);
    let mut counterexamples = Vec::new();
    let mut consistent = true;
    let mut owner: HashMap<usize, (Site, Role)> = HashMap::new();
    for &(site, role) in &edges {
        let v = relation_at(prf, site.position, site.key, site.n);
        match owner.get(&v) {
            None => {
                owner.insert(v, (site, role));
            }
            Some(&(first_site, first_role)) => {
                if (first_role.op_class, first_role.slot) != (role.op_class, role.slot) {
                    consistent = false;
                    if counterexamples.len() < MAX_COUNTEREXAMPLES {
                        counterexamples.push(Counterexample::RoleClash {
                            value: v,
                            first: (first_site, first_role),
                            second: (site, role),
                        });
                    }
                }
            }
        }
    }

    // Pairs that are a parent edge somewhere; scale-aware for hinted PRFs.
    let uses_scale = prf.uses_scale();
    let scale_key = |n: usize| if uses_scale { n } else { 0 };
    let edge_set: BTreeSet<(usize, usize, usize)> =
        edges.iter().map(|(s, _)| (scale_key(s.n), s.position, s.key)).collect();
    let step_positions: BTreeSet<(usize, usize)> = family
        .circuits
        .iter()
        .filter(|c| c.n <= n_max)
        .flat_map(|c| c.steps.iter().map(move |s| (scale_key(c.n), s.position)))
        .collect();

    let mut collisions = false;
    let mut visited: BTreeSet<(usize, usize, usize)> = BTreeSet::new();
    for c in family.circuits.iter().filter(|c| c.n <= n_max) {
        for position in 2..=c.max_position() {
            if domain == QueryDomain::OutputSteps && !step_positions.contains(&(scale_key(c.n), position)) {
                continue;
            }
            for key in 1..position {
                let id = (scale_key(c.n), position, key);
                if edge_set.contains(&id) || !visited.insert(id) {
                    continue;
                }
                let v = relation_at(prf, position, key, c.n);
                if let Some(&parent) = owner.get(&v) {
                    collisions = true;
                    if counterexamples.len() < MAX_COUNTEREXAMPLES {
                        counterexamples.push(Counterexample::NonParentCollision {
                            value: v,
                            site: Site { n: c.n, position, key },
                            parent,
                        });
                    }
                }
            }
        }
    }
    CharacterizationReport { consistent, distinct: consistent && !collisions, counterexamples }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub covered: bool,
    pub novel_values: BTreeSet<usize>,
}

/// Whether every parent-edge value used up to `n_test` was already used up
/// to `n_train`.
pub fn check_value_coverage(
    prf: &dyn Relation,
    family: &CircuitFamily,
    n_train: usize,
    n_test: usize,
) -> CoverageReport {
    let values = |n_max: usize| -> BTreeSet<usize> {
        parent_edges(family, n_max)
            .iter()
            .map(|(s, _)| relation_at(prf, s.position, s.key, s.n))
            .collect()
    };
    let train = values(n_train);
    let novel: BTreeSet<usize> = values(n_test).difference(&train).copied().collect();
    CoverageReport { covered: novel.is_empty(), novel_values: novel }
}

/// The scale-hinted PRF that numbers every (operator, slot) role: operator
/// `k` with arity `n_k` owns values `offset_k + 1 ..= offset_k + n_k`, and
/// every other triple maps to the catch-all `sum n_k + 1`.
pub fn build_prfsh(family: &CircuitFamily) -> PrfSh {
    let classes = family.operator_classes();
    let mut arities: Vec<usize> = Vec::new();
    for (op, &k) in classes.iter().enumerate() {
        if k == arities.len() {
            arities.push(family.operators[op].arity);
        }
    }
    let offsets: Vec<usize> = arities
        .iter()
        .scan(0, |acc, &a| {
            let o = *acc;
            *acc += a;
            Some(o)
        })
        .collect();
    let total: usize = arities.iter().sum();
    let catch_all = total + 1;
    let mut table: HashMap<(usize, usize, usize), usize> = HashMap::new();
    for (site, role) in parent_edges(family, usize::MAX) {
        table.insert(
            (site.position - 2, site.key - 1, site.n),
            offsets[role.op_class] + role.slot,
        );
    }
    let table = Arc::new(table);
    PrfSh::new(format!("prfsh-{}", family.name), catch_all + 1, move |i, j, n| {
        table.get(&(i, j, n)).copied().unwrap_or(catch_all)
    })
}
