//! Algorithmic task generators and ground-truth oracles.
//!
//! Token layout (0-based positions) per task, with `n` the scale and `N` the
//! alignment target when aligned:
//!
//! | task | unaligned | aligned |
//! |------|-----------|---------|
//! | copy | `x1..xn = x1..xn` | `x1..xn 0..0 = x1..xn 0..0` |
//! | reverse | `x1..xn = xn..x1` | `x1..xn 0..0 = 0..0 xn..x1` |
//! | shift | `x1..xn = x2..xn x1` | `x1..xn 0..0 = x2..xn 0..0 x1` |
//! | parity | `x1..xn = y1..yn` | `x1..xn 0..0 = y1..yn yn..yn` |
//! | addition | `x1..xn + y1..yn = z1..z(n+1)` | every digit run padded to `N` (sum to `N+1`) |
//! | multiplication | `y1 * x1..xn = z1..z(n+1)` | `x` padded to `N`, `z` to `N+1` |
//! | division | `y1 \ xn..x1 = zn..z1` | `y1 \ 0..0 xn..x1 = 0..0 zn..z1` |
//! | select | `x1..xn = y` | not defined |
//!
//! Arithmetic operands are stored least-significant digit first except for
//! division, whose operands are written most-significant first.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("scale {scale} out of range (target length {target:?})")]
    ScaleOutOfRange { scale: usize, target: Option<usize> },
    #[error("{0} has no aligned format")]
    NoAlignedFormat(TaskKind),
    #[error("aligned instances need a target length")]
    MissingTargetLength,
    #[error("malformed input for {task}: {reason}")]
    Malformed { task: TaskKind, reason: String },
    #[error("empty scale range")]
    EmptyScaleRange,
    #[error("count must be positive")]
    EmptyCount,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    Shift,
    Parity,
    Addition,
    #[serde(rename = "multiplication_1n")]
    Multiplication1N,
    #[serde(rename = "division_n1")]
    DivisionN1,
    SelectFirst,
    SelectMiddle,
    SelectLast,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Shift,
        TaskKind::Parity,
        TaskKind::Addition,
        TaskKind::Multiplication1N,
        TaskKind::DivisionN1,
        TaskKind::SelectFirst,
        TaskKind::SelectMiddle,
        TaskKind::SelectLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Shift => "shift",
            TaskKind::Parity => "parity",
            TaskKind::Addition => "addition",
            TaskKind::Multiplication1N => "multiplication_1n",
            TaskKind::DivisionN1 => "division_n1",
            TaskKind::SelectFirst => "select_first",
            TaskKind::SelectMiddle => "select_middle",
            TaskKind::SelectLast => "select_last",
        }
    }

    /// Digit base of the element alphabet.
    pub fn base(self) -> u8 {
        match self {
            TaskKind::Parity => 2,
            TaskKind::Addition => 3,
            _ => 10,
        }
    }

    pub fn is_select(self) -> bool {
        matches!(
            self,
            TaskKind::SelectFirst | TaskKind::SelectMiddle | TaskKind::SelectLast
        )
    }

    pub fn supports_aligned(self) -> bool {
        !self.is_select()
    }

    /// Total token count of an instance. `width` is the per-operand digit
    /// count: the scale when unaligned, the target length when aligned.
    pub fn sequence_len(self, width: usize) -> usize {
        self.prompt_len(width) + self.answer_len(width)
    }

    /// Tokens up to and including `=`.
    pub fn prompt_len(self, width: usize) -> usize {
        match self {
            TaskKind::Addition => 2 * width + 2,
            TaskKind::Multiplication1N | TaskKind::DivisionN1 => width + 3,
            _ => width + 1,
        }
    }

    pub fn answer_len(self, width: usize) -> usize {
        match self {
            TaskKind::Addition | TaskKind::Multiplication1N => width + 1,
            TaskKind::SelectFirst | TaskKind::SelectMiddle | TaskKind::SelectLast => 1,
            _ => width,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

/// Format symbols that are not digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Digit(u8),
    Plus,
    Times,
    Divide,
    Equals,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Digit(d) => write!(f, "{d}"),
            Symbol::Plus => f.write_str("+"),
            Symbol::Times => f.write_str("*"),
            Symbol::Divide => f.write_str("\\"),
            Symbol::Equals => f.write_str("="),
        }
    }
}

/// Bijective symbol/id map: digits `0..base` first, then `+ * \ =`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    base: u8,
}

impl Vocabulary {
    pub fn new(base: u8) -> Self {
        assert!(base >= 2, "base must be at least 2");
        Self { base }
    }

    pub fn for_task(task: TaskKind) -> Self {
        Self::new(task.base())
    }

    pub fn base(&self) -> u8 {
        self.base
    }

    pub fn len(&self) -> usize {
        self.base as usize + 4
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, sym: Symbol) -> u32 {
        let b = self.base as u32;
        match sym {
            Symbol::Digit(d) => {
                assert!(d < self.base, "digit {d} outside base {}", self.base);
                d as u32
            }
            Symbol::Plus => b,
            Symbol::Times => b + 1,
            Symbol::Divide => b + 2,
            Symbol::Equals => b + 3,
        }
    }

    pub fn symbol(&self, id: u32) -> Option<Symbol> {
        let b = self.base as u32;
        match id {
            d if d < b => Some(Symbol::Digit(d as u8)),
            d if d == b => Some(Symbol::Plus),
            d if d == b + 1 => Some(Symbol::Times),
            d if d == b + 2 => Some(Symbol::Divide),
            d if d == b + 3 => Some(Symbol::Equals),
            _ => None,
        }
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).map_or("?".to_string(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub tokens: Vec<u32>,
    pub scale: usize,
    pub answer_start: usize,
    pub aligned: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_length: Option<usize>,
}

impl TaskInstance {
    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_start]
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start..]
    }
}

fn digits_to_biguint_lsb(digits: &[u8], base: u32) -> BigUint {
    let mut acc = BigUint::zero();
    for &d in digits.iter().rev() {
        acc = acc * base + d as u32;
    }
    acc
}

fn biguint_to_digits_lsb(mut v: BigUint, base: u32, width: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(width);
    for _ in 0..width {
        let d = (&v % base).to_u8().expect("digit fits");
        out.push(d);
        v /= base;
    }
    debug_assert!(v.is_zero(), "value does not fit in {width} digits");
    out
}

/// Answer digits for the non-arithmetic tasks.
fn answer_digits(task: TaskKind, xs: &[u8]) -> Vec<u8> {
    let w = xs.len();
    match task {
        TaskKind::Copy => xs.to_vec(),
        TaskKind::Reverse => xs.iter().rev().copied().collect(),
        TaskKind::Shift => {
            let mut out: Vec<u8> = xs[1..].to_vec();
            out.push(xs[0]);
            out
        }
        TaskKind::Parity => xs
            .iter()
            .scan(0u8, |acc, &x| {
                *acc ^= x;
                Some(*acc)
            })
            .collect(),
        TaskKind::SelectFirst => vec![xs[0]],
        TaskKind::SelectMiddle => vec![xs[w / 2]],
        TaskKind::SelectLast => vec![xs[w - 1]],
        TaskKind::Addition | TaskKind::Multiplication1N | TaskKind::DivisionN1 => {
            unreachable!("arithmetic answers are computed in oracle")
        }
    }
}

/// Parses a prompt (tokens up to and including `=`) and returns the answer
/// tokens. Works for aligned and unaligned prompts alike: padding never
/// changes the answer beyond its own padding.
pub fn oracle(task: TaskKind, prompt: &[u32]) -> Result<Vec<u32>, TaskError> {
    let vocab = Vocabulary::for_task(task);
    let malformed = |reason: &str| TaskError::Malformed {
        task,
        reason: reason.to_string(),
    };
    let syms: Vec<Symbol> = prompt
        .iter()
        .map(|&t| vocab.symbol(t).ok_or_else(|| malformed("token outside vocabulary")))
        .collect::<Result<_, _>>()?;
    if syms.last() != Some(&Symbol::Equals) {
        return Err(malformed("prompt must end with `=`"));
    }
    let body = &syms[..syms.len() - 1];
    let digits = |s: &[Symbol]| -> Result<Vec<u8>, TaskError> {
        s.iter()
            .map(|sym| match sym {
                Symbol::Digit(d) => Ok(*d),
                _ => Err(malformed("unexpected operator token")),
            })
            .collect()
    };
    let base = task.base() as u32;
    let answer: Vec<u8> = match task {
        TaskKind::Addition => {
            let plus = body
                .iter()
                .position(|s| *s == Symbol::Plus)
                .ok_or_else(|| malformed("missing `+`"))?;
            let xs = digits(&body[..plus])?;
            let ys = digits(&body[plus + 1..])?;
            if xs.len() != ys.len() || xs.is_empty() {
                return Err(malformed("addends must have equal, nonzero width"));
            }
            let sum = digits_to_biguint_lsb(&xs, base) + digits_to_biguint_lsb(&ys, base);
            biguint_to_digits_lsb(sum, base, xs.len() + 1)
        }
        TaskKind::Multiplication1N => {
            if body.len() < 3 || body[1] != Symbol::Times {
                return Err(malformed("expected `y * x..`"));
            }
            let y = digits(&body[..1])?[0];
            let xs = digits(&body[2..])?;
            let prod = digits_to_biguint_lsb(&xs, base) * y as u32;
            biguint_to_digits_lsb(prod, base, xs.len() + 1)
        }
        TaskKind::DivisionN1 => {
            if body.len() < 3 || body[1] != Symbol::Divide {
                return Err(malformed("expected `y \\ x..`"));
            }
            let y = digits(&body[..1])?[0];
            if y == 0 {
                return Err(malformed("division by zero"));
            }
            // Dividend is written most significant first.
            let mut xs = digits(&body[2..])?;
            xs.reverse();
            let q = digits_to_biguint_lsb(&xs, base) / y as u32;
            let mut qd = biguint_to_digits_lsb(q, base, xs.len());
            qd.reverse();
            qd
        }
        _ => {
            let xs = digits(body)?;
            if xs.is_empty() {
                return Err(malformed("empty input"));
            }
            answer_digits(task, &xs)
        }
    };
    Ok(answer.into_iter().map(|d| vocab.id(Symbol::Digit(d))).collect())
}

fn sample_digits(rng: &mut impl Rng, base: u8, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..base)).collect()
}

fn pad(mut v: Vec<u8>, width: usize) -> Vec<u8> {
    v.resize(width, 0);
    v
}

/// Generates one instance. Elements are i.i.d. uniform over the task's
/// digit alphabet; division samples divisor and quotient so the division is
/// exact and the dividend fits in `n` digits.
pub fn generate(
    task: TaskKind,
    n: usize,
    aligned: bool,
    target_length: Option<usize>,
    rng: &mut impl Rng,
) -> Result<TaskInstance, TaskError> {
    if n == 0 {
        return Err(TaskError::ScaleOutOfRange { scale: n, target: target_length });
    }
    let width = if aligned {
        if !task.supports_aligned() {
            return Err(TaskError::NoAlignedFormat(task));
        }
        let big_n = target_length.ok_or(TaskError::MissingTargetLength)?;
        if n > big_n {
            return Err(TaskError::ScaleOutOfRange { scale: n, target: target_length });
        }
        big_n
    } else {
        n
    };
    let vocab = Vocabulary::for_task(task);
    let base = task.base();
    let d = |x: u8| vocab.id(Symbol::Digit(x));
    let mut prompt: Vec<u32> = Vec::with_capacity(task.prompt_len(width));
    match task {
        TaskKind::Addition => {
            let xs = pad(sample_digits(rng, base, n), width);
            let ys = pad(sample_digits(rng, base, n), width);
            prompt.extend(xs.iter().map(|&x| d(x)));
            prompt.push(vocab.id(Symbol::Plus));
            prompt.extend(ys.iter().map(|&x| d(x)));
        }
        TaskKind::Multiplication1N => {
            let y = rng.gen_range(0..base);
            let xs = pad(sample_digits(rng, base, n), width);
            prompt.push(d(y));
            prompt.push(vocab.id(Symbol::Times));
            prompt.extend(xs.iter().map(|&x| d(x)));
        }
        TaskKind::DivisionN1 => {
            let y = rng.gen_range(1..base);
            let limit = BigUint::from(base as u32).pow(n as u32);
            let max_q: BigUint = (&limit - 1u32) / y as u32;
            let q = sample_below(rng, &(max_q + 1u32), base as u32);
            let dividend = q * y as u32;
            let mut xs = biguint_to_digits_lsb(dividend, base as u32, width);
            xs.reverse();
            prompt.push(d(y));
            prompt.push(vocab.id(Symbol::Divide));
            prompt.extend(xs.iter().map(|&x| d(x)));
        }
        _ => {
            let xs = pad(sample_digits(rng, base, n), width);
            prompt.extend(xs.iter().map(|&x| d(x)));
        }
    }
    prompt.push(vocab.id(Symbol::Equals));
    let answer = oracle(task, &prompt)?;
    let answer_start = prompt.len();
    prompt.extend(answer);
    Ok(TaskInstance {
        task,
        tokens: prompt,
        scale: n,
        answer_start,
        aligned,
        target_length: if aligned { target_length } else { None },
    })
}

/// Uniform sample in `[0, bound)` by rejection over digit strings.
fn sample_below(rng: &mut impl Rng, bound: &BigUint, base: u32) -> BigUint {
    let width = {
        let mut w = 0usize;
        let mut v = bound.clone();
        while !v.is_zero() {
            v /= base;
            w += 1;
        }
        w.max(1)
    };
    loop {
        let digits: Vec<u8> = (0..width).map(|_| rng.gen_range(0..base as u8)).collect();
        let v = digits_to_biguint_lsb(&digits, base);
        if &v < bound {
            return v;
        }
    }
}

/// Samples `count` instances with scales uniform over `scales`.
pub fn sample_dataset(
    task: TaskKind,
    scales: RangeInclusive<usize>,
    count: usize,
    aligned: bool,
    target_length: Option<usize>,
    seed: u64,
) -> Result<Vec<TaskInstance>, TaskError> {
    if scales.is_empty() {
        return Err(TaskError::EmptyScaleRange);
    }
    if count == 0 {
        return Err(TaskError::EmptyCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(scales.clone());
            generate(task, n, aligned, target_length, &mut rng)
        })
        .collect()
}

/// Serializes instances as JSON lines.
pub fn to_jsonl(instances: &[TaskInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<TaskInstance>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
