//! Learnable relation functions and the embeddings built on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{dot, Matrix};
use super::rotary::{rotate_pairs, RotaryAngles};
use super::PeError;

const SIMPLEX_TOL: f64 = 1e-6;

/// Relation-value embeddings `P` with one row per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, values: vec![0.0; rows * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = Matrix::from_rows(rows);
        Self { rows: m.rows, dim: m.cols, values: m.data }
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.dim..(s + 1) * self.dim]
    }
}

/// Key-only additive PE score `(h_key + P_s)^T W_K^T W_Q h_query`.
pub fn additive_key_attention(
    h_query: &[f64],
    h_key: &[f64],
    prf_value: usize,
    p: &EmbeddingTable,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<f64, PeError> {
    if prf_value >= p.rows {
        return Err(PeError::ValueOutOfRange { value: prf_value, s_max: p.rows });
    }
    if h_key.len() != p.dim {
        return Err(PeError::DimensionMismatch { expected: p.dim, got: h_key.len() });
    }
    let shifted: Vec<f64> = h_key.iter().zip(p.row(prf_value)).map(|(a, b)| a + b).collect();
    let k = wk.matvec(&shifted)?;
    let q = wq.matvec(h_query)?;
    if k.len() != q.len() {
        return Err(PeError::DimensionMismatch { expected: q.len(), got: k.len() });
    }
    Ok(dot(&k, &q))
}

/// Hyperparameters of a learnable PRF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnablePrfConfig {
    pub s_max: usize,
    pub hidden: usize,
    pub scale_hint: bool,
    /// Linear position features are divided by this.
    pub position_scale: f64,
    /// Angular frequencies of the sin/cos position features.
    pub frequencies: Vec<f64>,
}

impl LearnablePrfConfig {
    pub fn new(s_max: usize, scale_hint: bool) -> Self {
        Self {
            s_max,
            hidden: 32,
            scale_hint,
            position_scale: 16.0,
            frequencies: vec![std::f64::consts::PI / 32.0],
        }
    }

    pub fn feature_dim(&self) -> usize {
        let per = 1 + 2 * self.frequencies.len();
        let bases = if self.scale_hint { 6 } else { 3 };
        bases * per
    }

    pub fn n_params(&self) -> usize {
        let (f, h, s) = (self.feature_dim(), self.hidden, self.s_max);
        h * f + h + h * h + h + s * h + s
    }
}

/// A learnable PRF: a two-hidden-layer ReLU network over position features
/// followed by a softmax over `s_max` relation values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnablePrf {
    pub config: LearnablePrfConfig,
    pub theta: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PrfCache {
    features: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LearnablePrf {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(config: LearnablePrfConfig, rng: &mut impl Rng) -> Self {
        let (f, h, s) = (config.feature_dim(), config.hidden, config.s_max);
        let mut theta = Vec::with_capacity(config.n_params());
        let mut push_layer = |theta: &mut Vec<f64>, out: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            theta.extend((0..out * fan_in).map(|_| rng.gen_range(-bound..bound)));
            theta.extend(std::iter::repeat(0.0).take(out));
        };
        push_layer(&mut theta, h, f);
        push_layer(&mut theta, h, h);
        push_layer(&mut theta, s, h);
        Self { config, theta }
    }

    pub fn s_max(&self) -> usize {
        self.config.s_max
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn features(&self, i: usize, j: usize, n: Option<usize>) -> Vec<f64> {
        let c = &self.config;
        let d = i as f64 - j as f64;
        let mut bases = vec![i as f64, j as f64, d];
        if c.scale_hint {
            let n = n.unwrap_or(1).max(1);
            let di = i.saturating_sub(j);
            bases.extend([n as f64, (di % n) as f64, (di / n) as f64]);
        }
        let mut out = Vec::with_capacity(c.feature_dim());
        for b in bases {
            out.push(b / c.position_scale);
            for w in &c.frequencies {
                let (s, co) = (w * b).sin_cos();
                out.push(s);
                out.push(co);
            }
        }
        out
    }

    fn offsets(&self) -> [usize; 6] {
        let (f, h, s) = (self.config.feature_dim(), self.config.hidden, self.config.s_max);
        let w1 = 0;
        let b1 = w1 + h * f;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + s * h;
        let _ = s;
        [w1, b1, w2, b2, w3, b3]
    }

    pub fn forward_cached(&self, i: usize, j: usize, n: Option<usize>) -> Result<PrfCache, PeError> {
        if self.config.scale_hint && n.is_none() {
            return Err(PeError::MissingScaleHint);
        }
        let (f, h, s) = (self.config.feature_dim(), self.config.hidden, self.config.s_max);
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        let t = &self.theta;
        let features = self.features(i, j, n);
        let layer = |w: usize, b: usize, out: usize, fan_in: usize, x: &[f64], relu: bool| -> Vec<f64> {
            (0..out)
                .map(|r| {
                    let z = t[b + r] + dot(&t[w + r * fan_in..w + (r + 1) * fan_in], x);
                    if relu { z.max(0.0) } else { z }
                })
                .collect()
        };
        let a1 = layer(w1, b1, h, f, &features, true);
        let a2 = layer(w2, b2, h, h, &a1, true);
        let logits = layer(w3, b3, s, h, &a2, false);
        let probs = softmax(&logits);
        Ok(PrfCache { features, a1, a2, probs })
    }

    /// Probability vector over relation values.
    pub fn forward(&self, i: usize, j: usize, n: Option<usize>) -> Result<Vec<f64>, PeError> {
        Ok(self.forward_cached(i, j, n)?.probs)
    }

    /// Accumulates `d loss / d theta` into `dtheta` given `d loss / d probs`.
    pub fn backward(&self, cache: &PrfCache, dprobs: &[f64], dtheta: &mut [f64]) {
        let (f, h, s) = (self.config.feature_dim(), self.config.hidden, self.config.s_max);
        let [w1, b1, w2, b2, w3, b3] = self.offsets();
        let t = &self.theta;
        let p = &cache.probs;
        let inner = dot(p, dprobs);
        let dlogits: Vec<f64> = (0..s).map(|k| p[k] * (dprobs[k] - inner)).collect();

        let mut da2 = vec![0.0; h];
        for (r, &g) in dlogits.iter().enumerate() {
            dtheta[b3 + r] += g;
            let row = w3 + r * h;
            for c in 0..h {
                dtheta[row + c] += g * cache.a2[c];
                da2[c] += g * t[row + c];
            }
        }
        let mut da1 = vec![0.0; h];
        for r in 0..h {
            if cache.a2[r] <= 0.0 {
                continue;
            }
            let g = da2[r];
            dtheta[b2 + r] += g;
            let row = w2 + r * h;
            for c in 0..h {
                dtheta[row + c] += g * cache.a1[c];
                da1[c] += g * t[row + c];
            }
        }
        for r in 0..h {
            if cache.a1[r] <= 0.0 {
                continue;
            }
            let g = da1[r];
            dtheta[b1 + r] += g;
            let row = w1 + r * f;
            for c in 0..f {
                dtheta[row + c] += g * cache.features[c];
            }
        }
    }

    /// Top-`k` relation values per cell, most probable first.
    pub fn top_k(&self, len: usize, k: usize, n: Option<usize>) -> Result<TopKTable, PeError> {
        let mut rows = Vec::with_capacity(len);
        for i in 0..len {
            let mut row = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let p = self.forward(i, j, n)?;
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
                idx.truncate(k);
                row.push(idx);
            }
            rows.push(row);
        }
        Ok(TopKTable { len, k, scale: n, rows })
    }
}

/// Most probable relation values for each `(i, j)` with `j <= i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKTable {
    pub len: usize,
    pub k: usize,
    pub scale: Option<usize>,
    /// `rows[i][j][rank]`.
    pub rows: Vec<Vec<Vec<usize>>>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn check_simplex(p: &[f64]) -> Result<(), PeError> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL || !sum.is_finite() {
        return Err(PeError::SimplexViolation { sum, min });
    }
    Ok(())
}

/// `P^T phi(i, j[, n])` for a relation distribution `probs`.
pub fn mix_rows(probs: &[f64], p: &EmbeddingTable) -> Result<Vec<f64>, PeError> {
    if probs.len() != p.rows {
        return Err(PeError::DimensionMismatch { expected: p.rows, got: probs.len() });
    }
    check_simplex(probs)?;
    let mut out = vec![0.0; p.dim];
    for (s, &w) in probs.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(p.row(s)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Learning-based embedding `P^T phi(i, j[, n]; theta)`.
pub fn lbpe_embed(
    i: usize,
    j: usize,
    n: Option<usize>,
    lprf: &LearnablePrf,
    p: &EmbeddingTable,
) -> Result<Vec<f64>, PeError> {
    let probs = lprf.forward(i, j, n)?;
    mix_rows(&probs, p)
}

/// Backward pass of [`lbpe_embed`]: accumulates gradients for `P` and theta
/// given the upstream gradient `dout` of the embedding.
pub fn lbpe_embed_backward(
    cache: &PrfCache,
    lprf: &LearnablePrf,
    p: &EmbeddingTable,
    dout: &[f64],
    dp: &mut [f64],
    dtheta: &mut [f64],
) {
    let dprobs: Vec<f64> = (0..p.rows).map(|s| dot(p.row(s), dout)).collect();
    for (s, &w) in cache.probs.iter().enumerate() {
        for (c, g) in dout.iter().enumerate() {
            dp[s * p.dim + c] += w * g;
        }
    }
    lprf.backward(cache, &dprobs, dtheta);
}

fn lbpe_rotary_parts(
    x_q: &[f64],
    x_k: &[f64],
    probs: &[f64],
    angles: &RotaryAngles,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<(f64, Vec<f64>), PeError> {
    check_simplex(probs)?;
    let q = wq.matvec(x_q)?;
    let k = wk.matvec(x_k)?;
    if q.len() % 2 != 0 {
        return Err(PeError::OddDimension(q.len()));
    }
    if q.len() != k.len() {
        return Err(PeError::DimensionMismatch { expected: q.len(), got: k.len() });
    }
    // Mixed rotation applied to the query, then the bilinear form with the key.
    let mut mixed = vec![0.0; q.len()];
    let mut per_value = Vec::with_capacity(probs.len());
    for (s, &w) in probs.iter().enumerate() {
        let r = rotate_pairs(&q, s as f64, angles)?;
        per_value.push(dot(&r, &k));
        for (m, v) in mixed.iter_mut().zip(&r) {
            *m += w * v;
        }
    }
    Ok((dot(&mixed, &k), per_value))
}

/// Rotary score with the rotation replaced by the convex combination
/// `sum_s phi_s R(s)`.
#[allow(clippy::too_many_arguments)]
pub fn lbpe_rotary(
    x_q: &[f64],
    x_k: &[f64],
    i: usize,
    j: usize,
    n: Option<usize>,
    lprf: &LearnablePrf,
    angles: &RotaryAngles,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<f64, PeError> {
    let probs = lprf.forward(i, j, n)?;
    Ok(lbpe_rotary_parts(x_q, x_k, &probs, angles, wq, wk)?.0)
}

/// Score and its gradient with respect to theta.
#[allow(clippy::too_many_arguments)]
pub fn lbpe_rotary_grad(
    x_q: &[f64],
    x_k: &[f64],
    i: usize,
    j: usize,
    n: Option<usize>,
    lprf: &LearnablePrf,
    angles: &RotaryAngles,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<(f64, Vec<f64>), PeError> {
    let cache = lprf.forward_cached(i, j, n)?;
    let (score, per_value) = lbpe_rotary_parts(x_q, x_k, &cache.probs, angles, wq, wk)?;
    let mut dtheta = vec![0.0; lprf.n_params()];
    lprf.backward(&cache, &per_value, &mut dtheta);
    Ok((score, dtheta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0]])
    }

    #[test]
    fn one_hot_selects_row() {
        let p = table();
        assert_eq!(mix_rows(&[0.0, 1.0, 0.0], &p).unwrap(), vec![-1.0, 0.5]);
        let u = mix_rows(&[1.0 / 3.0; 3], &p).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 5.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_violation_detected() {
        assert!(matches!(
            mix_rows(&[0.5, 0.2, 0.2], &table()),
            Err(PeError::SimplexViolation { .. })
        ));
    }

    #[test]
    fn additive_attention_cases() {
        let wq = Matrix::identity(2);
        let zero = EmbeddingTable::zeros(2, 2);
        let hq = [0.5, -1.0];
        let hk = [2.0, 1.0];
        let plain = additive_key_attention(&hq, &hk, 1, &zero, &wq, &wq).unwrap();
        assert!((plain - dot(&hq, &hk)).abs() < 1e-12);
        let p = table();
        let only_pe = additive_key_attention(&hq, &[0.0, 0.0], 2, &p, &wq, &wq).unwrap();
        assert!((only_pe - dot(p.row(2), &hq)).abs() < 1e-12);
        let same = EmbeddingTable::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(
            additive_key_attention(&hq, &hk, 0, &same, &wq, &wq).unwrap(),
            additive_key_attention(&hq, &hk, 1, &same, &wq, &wq).unwrap()
        );
    }

    #[test]
    fn scale_hint_required_when_configured() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = LearnablePrf::init(LearnablePrfConfig::new(4, true), &mut rng);
        assert_eq!(l.forward(3, 1, None), Err(PeError::MissingScaleHint));
        assert!(l.forward(3, 1, Some(2)).is_ok());
    }

    #[test]
    fn top_k_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = LearnablePrf::init(LearnablePrfConfig::new(8, false), &mut rng);
        let t = l.top_k(5, 3, None).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert!(t.rows.iter().enumerate().all(|(i, r)| r.len() == i + 1));
        assert!(t.rows.iter().flatten().all(|c| c.len() == 3));
    }
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn embed_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = LearnablePrfConfig::new(4, true);
        cfg.hidden = 6;
        let l = LearnablePrf::init(cfg, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let p = EmbeddingTable::from_rows(&rows);
        let w = [0.7, -0.3, 1.1];
        let (i, j, n) = (7, 2, Some(3));
        let loss = |l: &LearnablePrf, p: &EmbeddingTable| dot(&lbpe_embed(i, j, n, l, p).unwrap(), &w);

        let cache = l.forward_cached(i, j, n).unwrap();
        let mut dp = vec![0.0; p.values.len()];
        let mut dt = vec![0.0; l.n_params()];
        lbpe_embed_backward(&cache, &l, &p, &w, &mut dp, &mut dt);

        let h = 1e-6;
        for k in 0..p.values.len() {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.values[k] += h;
            b.values[k] -= h;
            let fd = (loss(&l, &a) - loss(&l, &b)) / (2.0 * h);
            assert!(rel_err(fd, dp[k]) < 1e-5, "P[{k}]: {fd} vs {}", dp[k]);
        }
        for k in 0..l.n_params() {
            let (mut a, mut b) = (l.clone(), l.clone());
            a.theta[k] += h;
            b.theta[k] -= h;
            let fd = (loss(&a, &p) - loss(&b, &p)) / (2.0 * h);
            assert!((fd - dt[k]).abs() < 1e-5 * fd.abs().max(1.0), "theta[{k}]: {fd} vs {}", dt[k]);
        }
    }

    #[test]
    fn rotary_lbpe_gradient_and_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = LearnablePrfConfig::new(3, false);
        cfg.hidden = 5;
        let l = LearnablePrf::init(cfg, &mut rng);
        let angles = RotaryAngles::standard(4, 10.0).unwrap();
        let wq = Matrix::identity(4);
        let xq = [0.3, -0.8, 1.2, 0.4];
        let xk = [-0.5, 0.9, 0.1, 0.6];
        let (score, grad) = lbpe_rotary_grad(&xq, &xk, 5, 1, None, &l, &angles, &wq, &wq).unwrap();
        assert_eq!(score, lbpe_rotary(&xq, &xk, 5, 1, None, &l, &angles, &wq, &wq).unwrap());
        let h = 1e-6;
        for k in 0..l.n_params() {
            let (mut a, mut b) = (l.clone(), l.clone());
            a.theta[k] += h;
            b.theta[k] -= h;
            let fd = (lbpe_rotary(&xq, &xk, 5, 1, None, &a, &angles, &wq, &wq).unwrap()
                - lbpe_rotary(&xq, &xk, 5, 1, None, &b, &angles, &wq, &wq).unwrap())
                / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * fd.abs().max(1.0));
        }

        let one_hot = [0.0, 0.0, 1.0];
        let (mixed, _) = lbpe_rotary_parts(&xq, &xk, &one_hot, &angles, &wq, &wq).unwrap();
        let general = super::super::rotary::rotary_general(&xq, &xk, 2.0, &angles, &wq, &wq).unwrap();
        assert!((mixed - general).abs() < 1e-12);
        let half = [0.5, 0.0, 0.5];
        let (avg, _) = lbpe_rotary_parts(&xq, &xk, &half, &angles, &wq, &wq).unwrap();
        let g0 = super::super::rotary::rotary_general(&xq, &xk, 0.0, &angles, &wq, &wq).unwrap();
        assert!((avg - 0.5 * (g0 + general)).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn outputs_stay_on_simplex(seed in 0u64..1000, i in 0usize..60, back in 0usize..60, n in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut l = LearnablePrf::init(LearnablePrfConfig::new(7, true), &mut rng);
            for t in l.theta.iter_mut() {
                *t *= 25.0;
            }
            let j = i.saturating_sub(back);
            let p = l.forward(i, j, Some(n)).unwrap();
            let sum: f64 = p.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
            proptest::prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
}
