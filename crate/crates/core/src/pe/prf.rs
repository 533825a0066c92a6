//! Positional relation functions.
//!
//! Positions are 0-based here: query `i`, key `j`, with `j <= i`. Value `0`
//! is the catch-all class in every ideal table.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PeError;
use crate::tasks::TaskKind;

type PairFn = dyn Fn(usize, usize) -> usize + Send + Sync;
type TripleFn = dyn Fn(usize, usize, usize) -> usize + Send + Sync;

/// Anything that assigns a relation value to a (query, key, scale) triple.
/// Scale-invariant functions ignore the scale argument.
pub trait Relation: Send + Sync {
    fn relation(&self, i: usize, j: usize, n: usize) -> usize;
    fn s_max(&self) -> usize;
    fn uses_scale(&self) -> bool;
    fn label(&self) -> &str;
}

/// A positional relation function `(i, j) -> s` with values in `0..s_max`.
#[derive(Clone)]
pub struct Prf {
    name: String,
    s_max: usize,
    map: Arc<PairFn>,
}

impl Prf {
    pub fn new(
        name: impl Into<String>,
        s_max: usize,
        map: impl Fn(usize, usize) -> usize + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            s_max,
            map: Arc::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> usize {
        (self.map)(i, j)
    }

    pub fn checked_value(&self, i: usize, j: usize) -> Result<usize, PeError> {
        let s = self.value(i, j);
        if s < self.s_max {
            Ok(s)
        } else {
            Err(PeError::ValueOutOfRange { value: s, s_max: self.s_max })
        }
    }

    /// Dense lower-triangular table for `0 <= j <= i < len`.
    pub fn table(&self, len: usize) -> PrfTable {
        PrfTable {
            name: self.name.clone(),
            s_max: self.s_max,
            len,
            scale: None,
            rows: (0..len)
                .map(|i| (0..=i).map(|j| self.value(i, j)).collect())
                .collect(),
        }
    }

    /// Relabels values through `f`, which must be injective for the result
    /// to carry the same partition.
    pub fn relabel(&self, s_max: usize, f: impl Fn(usize) -> usize + Send + Sync + 'static) -> Prf {
        let inner = self.map.clone();
        Prf::new(format!("{}-relabelled", self.name), s_max, move |i, j| f(inner(i, j)))
    }
}

impl fmt::Debug for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Prf")
            .field("name", &self.name)
            .field("s_max", &self.s_max)
            .finish()
    }
}

impl Relation for Prf {
    fn relation(&self, i: usize, j: usize, _n: usize) -> usize {
        self.value(i, j)
    }
    fn s_max(&self) -> usize {
        self.s_max
    }
    fn uses_scale(&self) -> bool {
        false
    }
    fn label(&self) -> &str {
        &self.name
    }
}

/// A positional relation function with scale hint `(i, j, n) -> s`.
#[derive(Clone)]
pub struct PrfSh {
    name: String,
    s_max: usize,
    map: Arc<TripleFn>,
}

impl PrfSh {
    pub fn new(
        name: impl Into<String>,
        s_max: usize,
        map: impl Fn(usize, usize, usize) -> usize + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            s_max,
            map: Arc::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, n: usize) -> usize {
        (self.map)(i, j, n)
    }

    pub fn table(&self, len: usize, n: usize) -> PrfTable {
        PrfTable {
            name: self.name.clone(),
            s_max: self.s_max,
            len,
            scale: Some(n),
            rows: (0..len)
                .map(|i| (0..=i).map(|j| self.value(i, j, n)).collect())
                .collect(),
        }
    }

    pub fn relabel(
        &self,
        s_max: usize,
        f: impl Fn(usize) -> usize + Send + Sync + 'static,
    ) -> PrfSh {
        let inner = self.map.clone();
        PrfSh::new(format!("{}-relabelled", self.name), s_max, move |i, j, n| {
            f(inner(i, j, n))
        })
    }
}

impl fmt::Debug for PrfSh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrfSh")
            .field("name", &self.name)
            .field("s_max", &self.s_max)
            .finish()
    }
}

impl Relation for PrfSh {
    fn relation(&self, i: usize, j: usize, n: usize) -> usize {
        self.value(i, j, n)
    }
    fn s_max(&self) -> usize {
        self.s_max
    }
    fn uses_scale(&self) -> bool {
        true
    }
    fn label(&self) -> &str {
        &self.name
    }
}

/// Dense export of a relation function over `0 <= j <= i < len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfTable {
    pub name: String,
    pub s_max: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    /// `rows[i][j]` for `j <= i`.
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardKind {
    Ape,
    Rpe,
}

/// APE as `i * K + j` with `K = n_max`, or RPE as `i - j`.
pub fn standard_prf(kind: StandardKind, n_max: usize) -> Prf {
    match kind {
        StandardKind::Rpe => Prf::new("rpe", n_max.max(1), |i, j| i - j),
        StandardKind::Ape => {
            let k = n_max.max(1);
            Prf::new("ape", k * k, move |i, j| i * k + j)
        }
    }
}

/// Ideal PRF for `task` with alignment target `big_n`, token layout as
/// produced by [`crate::tasks::generate`].
pub fn ipe_prf(task: TaskKind, big_n: usize) -> Result<Prf, PeError> {
    let n = big_n;
    let name = format!("ipe-{task}");
    let prf = match task {
        TaskKind::Copy => Prf::new(name, 2, move |i, j| usize::from(i - j == n)),
        TaskKind::Shift => Prf::new(name, 3, move |i, j| {
            if i + 1 == 2 * n && j == 0 {
                1
            } else if i + 1 < 2 * n && i - j + 1 == n {
                2
            } else {
                0
            }
        }),
        TaskKind::Parity => Prf::new(name, 3, move |i, j| match i - j {
            0 => 1,
            d if d == n => 2,
            _ => 0,
        }),
        TaskKind::Addition => Prf::new(name, 6, move |i, j| addition_rows(i - j, n)),
        TaskKind::Multiplication1N | TaskKind::DivisionN1 => {
            Prf::new(name, 5, move |i, j| one_digit_rows(i, j, n))
        }
        other => return Err(PeError::UnsupportedTask(other)),
    };
    Ok(prf)
}

fn addition_rows(d: usize, n: usize) -> usize {
    if d == 0 {
        1
    } else if d == n {
        2
    } else if d == n + 1 {
        3
    } else if d == 2 * n + 1 {
        4
    } else if d == 2 * n + 2 {
        5
    } else {
        0
    }
}

fn one_digit_rows(i: usize, j: usize, n: usize) -> usize {
    let d = i - j;
    if j == 0 {
        1
    } else if d == 0 {
        2
    } else if d == n {
        3
    } else if d == n + 1 {
        4
    } else {
        0
    }
}

/// Ideal PRF with scale hint: the ideal table with the alignment target
/// replaced by the instance scale.
pub fn ipe_sh_prf(task: TaskKind) -> Result<PrfSh, PeError> {
    let name = format!("ipe-sh-{task}");
    match task {
        TaskKind::Addition => Ok(PrfSh::new(name, 6, |i, j, n| addition_rows(i - j, n))),
        TaskKind::Multiplication1N | TaskKind::DivisionN1 => {
            Ok(PrfSh::new(name, 5, one_digit_rows))
        }
        other => Err(PeError::UnsupportedTask(other)),
    }
}

/// Task-agnostic scale-hint PRF `K * floor(d / n) + min(d mod n, K - 1)`
/// with `d = i - j`. `max_len` bounds the positions for `s_max`.
pub fn generic_sh_prf(k: usize, max_len: usize) -> PrfSh {
    assert!(k >= 1, "K must be positive");
    PrfSh::new(
        format!("generic-sh-k{k}"),
        k * max_len.max(1),
        move |i, j, n| {
            let d = i - j;
            let n = n.max(1);
            k * (d / n) + (d % n).min(k - 1)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rpe_and_ape_values() {
        let rpe = standard_prf(StandardKind::Rpe, 10);
        assert_eq!(rpe.value(5, 3), 2);
        assert!((0..10).all(|i| rpe.value(i, i) == 0));
        let ape = standard_prf(StandardKind::Ape, 10);
        assert_eq!(ape.value(5, 3), 53);
    }

    #[test]
    fn table_two_rows() {
        let copy = ipe_prf(TaskKind::Copy, 20).unwrap();
        assert_eq!(copy.value(25, 5), 1);
        assert_eq!(copy.value(25, 6), 0);

        let shift = ipe_prf(TaskKind::Shift, 10).unwrap();
        assert_eq!(shift.value(19, 0), 1);
        assert_eq!(shift.value(18, 9), 2);
        assert_eq!(shift.value(19, 10), 0);

        let add = ipe_prf(TaskKind::Addition, 20).unwrap();
        assert_eq!(add.value(41, 20), 3);
        assert_eq!(add.value(41, 41), 1);
        assert_eq!(add.value(41, 21), 2);
        assert_eq!(add.value(41, 0), 4);
        assert_eq!(add.value(42, 0), 5);
        assert_eq!(add.value(41, 1), 0);

        let mul = ipe_prf(TaskKind::Multiplication1N, 5).unwrap();
        assert_eq!(mul.value(0, 0), 1);
        assert_eq!(mul.value(9, 4), 3);
    }

    #[test]
    fn unsupported_tasks() {
        assert!(matches!(
            ipe_prf(TaskKind::Reverse, 10),
            Err(PeError::UnsupportedTask(TaskKind::Reverse))
        ));
        assert!(ipe_prf(TaskKind::SelectMiddle, 10).is_err());
        assert!(ipe_sh_prf(TaskKind::Copy).is_err());
    }

    #[test]
    fn scale_hint_rows() {
        let add = ipe_sh_prf(TaskKind::Addition).unwrap();
        assert_eq!(add.value(10, 7, 3), 2);
        assert_eq!(add.value(10, 6, 3), 3);
        let g = generic_sh_prf(5, 40);
        assert_eq!(g.value(4, 0, 3), 6);
        assert!((1..10).all(|n| g.value(7, 7, n) == 0));
    }

    #[test]
    fn checked_value_reports_range() {
        let bad = Prf::new("bad", 2, |_, _| 2);
        assert_eq!(
            bad.checked_value(0, 0),
            Err(PeError::ValueOutOfRange { value: 2, s_max: 2 })
        );
    }
}
