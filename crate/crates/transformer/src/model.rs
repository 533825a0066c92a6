//! Pre-LayerNorm decoder-only transformer with manual backpropagation.
//!
//! All parameters live in one flat vector; [`Model::named_params`] lists
//! the named slices. Position information enters according to
//! [`PeKind`]: APE at the input, RoPE on queries and keys, and every other
//! kind as a key-only additive embedding `P_s` selected (or mixed) by a
//! relation function, in every layer:
//! `score(i, j) = q_i . (k_j + W_K^T P_{phi(i, j)}) / sqrt(d_head)`.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgpe_core::pe::{ipe_prf, ipe_sh_prf, standard_prf, LearnablePrf, LearnablePrfConfig, PeError, Prf, PrfCache, PrfSh, StandardKind};
use lgpe_core::tasks::TaskInstance;

use crate::config::{ModelConfig, PeKind};
use crate::ops::{dot, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, LnCache};
use crate::TransformerError;

/// A token sequence with its scale and the index of the first answer token.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    pub tokens: &'a [u32],
    pub scale: usize,
    pub answer_start: usize,
}

impl<'a> From<&'a TaskInstance> for SeqRef<'a> {
    fn from(t: &'a TaskInstance) -> Self {
        SeqRef { tokens: &t.tokens, scale: t.scale, answer_start: t.answer_start }
    }
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    pe: Option<usize>,
    theta: Option<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    ape: Option<usize>,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    wout: usize,
    bout: usize,
    named: Vec<NamedParam>,
    total: usize,
}

/// How a parameter slice is initialized and regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix { fan_in: usize },
    Embedding,
    Bias,
    Gain,
    PrfTheta,
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub range: Range<usize>,
    pub kind: ParamKind,
}

impl NamedParam {
    /// Weight decay applies to matrices and embedding tables only.
    pub fn decays(&self) -> bool {
        matches!(self.kind, ParamKind::Matrix { .. } | ParamKind::Embedding)
    }
}

struct LayoutBuilder {
    named: Vec<NamedParam>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, len: usize, kind: ParamKind) -> usize {
        let start = self.total;
        self.total += len;
        self.named.push(NamedParam { name, range: start..self.total, kind });
        start
    }
}

/// Relation-function part of the position embedding.
#[derive(Clone)]
enum PeRuntime {
    Absolute,
    Rotary(Vec<f64>),
    Fixed(Prf),
    FixedSh(PrfSh),
    Learned { cfg: LearnablePrfConfig, frozen: Option<Prf> },
}

/// Per-position PE table width for the configured kind.
fn pe_runtime(config: &ModelConfig) -> Result<(PeRuntime, usize), TransformerError> {
    let dh = config.head_dim();
    Ok(match &config.pe {
        PeKind::Ape => (PeRuntime::Absolute, 0),
        PeKind::Rope { base } => {
            if dh % 2 != 0 {
                return Err(PeError::OddDimension(dh).into());
            }
            let thetas = (0..dh / 2).map(|k| base.powf(-2.0 * k as f64 / dh as f64)).collect();
            (PeRuntime::Rotary(thetas), 0)
        }
        PeKind::Rpe => {
            let prf = standard_prf(StandardKind::Rpe, config.max_len);
            let s = prf.s_max();
            (PeRuntime::Fixed(prf), s)
        }
        PeKind::Ipe { task, target_length } => {
            let prf = ipe_prf(*task, *target_length)?;
            let s = prf.s_max();
            (PeRuntime::Fixed(prf), s)
        }
        PeKind::IpeSh { task } => {
            let prf = ipe_sh_prf(*task)?;
            let s = prf.s_max();
            (PeRuntime::FixedSh(prf), s)
        }
        PeKind::Lbpe { s_max, hidden } | PeKind::LbpeSh { s_max, hidden } => {
            let mut cfg = LearnablePrfConfig::new(*s_max, config.pe.needs_scale());
            cfg.hidden = *hidden;
            (PeRuntime::Learned { cfg, frozen: None }, *s_max)
        }
    })
}

pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
    pe: PeRuntime,
    s_table: usize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            pe: self.pe.clone(),
            s_table: self.s_table,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("params", &self.params.len()).finish()
    }
}

impl Model {
    /// Builds a model with uniform `+-1/sqrt(fan_in)` weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TransformerError> {
        if config.heads == 0 || config.hidden % config.heads != 0 {
            return Err(TransformerError::InvalidConfig(format!(
                "{} heads do not divide hidden size {}",
                config.heads, config.hidden
            )));
        }
        if config.layers == 0 || config.vocab == 0 || config.max_len == 0 {
            return Err(TransformerError::InvalidConfig("layers, vocab and max_len must be positive".into()));
        }
        let (pe, s_table) = pe_runtime(&config)?;
        let layout = build_layout(&config, &pe, s_table);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for np in &layout.named {
            let slice = &mut params[np.range.clone()];
            match np.kind {
                ParamKind::Matrix { fan_in } => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    slice.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
                }
                ParamKind::Embedding => {
                    let b = 1.0 / (config.hidden as f64).sqrt();
                    slice.iter_mut().for_each(|v| *v = rng.gen_range(-b..b));
                }
                ParamKind::Gain => slice.iter_mut().for_each(|v| *v = 1.0),
                ParamKind::Bias => {}
                ParamKind::PrfTheta => {
                    if let PeRuntime::Learned { cfg, .. } = &pe {
                        let l = LearnablePrf::init(cfg.clone(), &mut rng);
                        slice.copy_from_slice(&l.theta);
                    }
                }
            }
        }
        Ok(Self { config, params, layout, pe, s_table })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn named_params(&self) -> &[NamedParam] {
        &self.layout.named
    }

    /// Replaces the learned relation function of an LBPE model by a fixed
    /// one-hot PRF. The embedding tables stay learnable.
    pub fn freeze_prf(&mut self, prf: Prf) -> Result<(), TransformerError> {
        match &mut self.pe {
            PeRuntime::Learned { cfg, frozen } if !cfg.scale_hint => {
                if prf.s_max() > cfg.s_max {
                    return Err(PeError::ValueOutOfRange { value: prf.s_max(), s_max: cfg.s_max }.into());
                }
                *frozen = Some(prf);
                Ok(())
            }
            _ => Err(TransformerError::InvalidConfig("only scale-free LBPE models can be frozen".into())),
        }
    }

    fn learnable_prf(&self, layer: usize) -> Option<LearnablePrf> {
        match &self.pe {
            PeRuntime::Learned { cfg, frozen: None } => {
                let off = self.layout.layers[layer].theta?;
                let n = cfg.n_params();
                Some(LearnablePrf { config: cfg.clone(), theta: self.params[off..off + n].to_vec() })
            }
            _ => None,
        }
    }

    /// Learned relation function of `layer`, if the model has one.
    pub fn prf_of_layer(&self, layer: usize) -> Option<LearnablePrf> {
        self.learnable_prf(layer)
    }

    fn check_inputs(&self, seqs: &[SeqRef]) -> Result<(), TransformerError> {
        for s in seqs {
            if s.tokens.len() > self.config.max_len {
                return Err(TransformerError::SequenceTooLong { len: s.tokens.len(), max: self.config.max_len });
            }
            if s.tokens.is_empty() {
                return Err(TransformerError::InvalidConfig("empty sequence".into()));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
                return Err(TransformerError::TokenOutOfVocab { token: t, vocab: self.config.vocab });
            }
        }
        Ok(())
    }

    /// Next-token distributions at every position. The scale hint must be
    /// given exactly when the PE uses one.
    pub fn forward(&self, tokens: &[u32], scale: Option<usize>) -> Result<Vec<Vec<f64>>, TransformerError> {
        let scale = self.resolve_scale(scale)?;
        let seq = SeqRef { tokens, scale, answer_start: 0 };
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let (logits, _) = self.run(&[seq], &rows)?;
        let v = self.config.vocab;
        Ok(logits
            .chunks(v)
            .map(|row| {
                let mut p = row.to_vec();
                softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    fn resolve_scale(&self, scale: Option<usize>) -> Result<usize, TransformerError> {
        match (self.config.pe.needs_scale(), scale) {
            (true, None) => Err(PeError::MissingScaleHint.into()),
            (_, s) => Ok(s.unwrap_or(0)),
        }
    }

    /// Attention weights of layer 0, head 0 (`rows[i][j]`, `j <= i`).
    pub fn attention_weights(&self, tokens: &[u32], scale: Option<usize>) -> Result<Vec<Vec<f64>>, TransformerError> {
        let scale = self.resolve_scale(scale)?;
        let seq = SeqRef { tokens, scale, answer_start: 0 };
        let (_, cache) = self.run(&[seq], &[])?;
        let t = tokens.len();
        let a = &cache.layers[0].attn[0];
        Ok((0..t).map(|i| a[i * t..i * t + i + 1].to_vec()).collect())
    }

    /// Mean answer-token cross-entropy, its gradient, and the token count.
    pub fn loss_and_grad(&self, batch: &[SeqRef]) -> Result<(f64, Vec<f64>, usize), TransformerError> {
        let (rows, targets) = answer_rows(batch);
        let (logits, cache) = self.run(batch, &rows)?;
        let v = self.config.vocab;
        let count = rows.len().max(1) as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; logits.len()];
        for (r, &t) in targets.iter().enumerate() {
            let mut p = logits[r * v..(r + 1) * v].to_vec();
            softmax_in_place(&mut p);
            loss -= p[t as usize].max(f64::MIN_POSITIVE).ln();
            p[t as usize] -= 1.0;
            for (d, pv) in dlogits[r * v..(r + 1) * v].iter_mut().zip(&p) {
                *d = pv / count;
            }
        }
        let grad = self.backward(&cache, &rows, &dlogits);
        Ok((loss / count, grad, rows.len()))
    }

    /// Mean answer-token cross-entropy without gradients.
    pub fn loss(&self, batch: &[SeqRef]) -> Result<f64, TransformerError> {
        let (rows, targets) = answer_rows(batch);
        let (logits, _) = self.run(batch, &rows)?;
        let v = self.config.vocab;
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let mut p = logits[r * v..(r + 1) * v].to_vec();
            softmax_in_place(&mut p);
            loss -= p[t as usize].max(f64::MIN_POSITIVE).ln();
        }
        Ok(loss / rows.len().max(1) as f64)
    }

    /// Exact match of the whole answer region per sequence. With teacher
    /// forcing this equals greedy decoding: the first wrong argmax makes
    /// both count the instance as wrong, and before it the inputs coincide.
    pub fn exact_match(&self, batch: &[SeqRef]) -> Result<Vec<bool>, TransformerError> {
        let (rows, targets) = answer_rows(batch);
        let (logits, _) = self.run(batch, &rows)?;
        let v = self.config.vocab;
        let mut out = Vec::with_capacity(batch.len());
        let mut r = 0;
        for s in batch {
            let n = s.tokens.len() - s.answer_start;
            let mut ok = true;
            for _ in 0..n {
                let row = &logits[r * v..(r + 1) * v];
                let arg = argmax(row);
                ok &= arg == targets[r] as usize;
                r += 1;
            }
            out.push(ok);
        }
        Ok(out)
    }

    /// Logits of the configured rows (global packed row indices).
    pub fn logits(&self, batch: &[SeqRef], rows: &[usize]) -> Result<Vec<f64>, TransformerError> {
        Ok(self.run(batch, rows)?.0)
    }

    fn run(&self, seqs: &[SeqRef], out_rows: &[usize]) -> Result<(Vec<f64>, Cache), TransformerError> {
        self.check_inputs(seqs)?;
        let cfg = &self.config;
        let d = cfg.hidden;
        let p = &self.params;
        let lay = &self.layout;
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut total = 0;
        for s in seqs {
            offsets.push(total);
            total += s.tokens.len();
        }
        let pe_index = self.pe_index(seqs)?;

        let mut x = vec![0.0; total * d];
        for (s, &off) in seqs.iter().zip(&offsets) {
            for (t, &tok) in s.tokens.iter().enumerate() {
                let row = &mut x[(off + t) * d..(off + t + 1) * d];
                row.copy_from_slice(&p[lay.tok + tok as usize * d..lay.tok + (tok as usize + 1) * d]);
                if let Some(ape) = lay.ape {
                    for (r, a) in row.iter_mut().zip(&p[ape + t * d..ape + (t + 1) * d]) {
                        *r += a;
                    }
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for (li, lo) in lay.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, d, &p[lo.ln1_g..lo.ln1_g + d], &p[lo.ln1_b..lo.ln1_b + d]);
            let mut q = linear(&a, total, d, &p[lo.wq..lo.wq + d * d], &p[lo.bq..lo.bq + d], d);
            let mut k = linear(&a, total, d, &p[lo.wk..lo.wk + d * d], &p[lo.bk..lo.bk + d], d);
            let v = linear(&a, total, d, &p[lo.wv..lo.wv + d * d], &p[lo.bv..lo.bv + d], d);
            if let PeRuntime::Rotary(thetas) = &self.pe {
                rotate_rows(&mut q, seqs, &offsets, d, cfg.heads, thetas, 1.0);
                rotate_rows(&mut k, seqs, &offsets, d, cfg.heads, thetas, 1.0);
            }
            let s = self.s_table;
            let mut wkp = Vec::new();
            if let Some(pe) = lo.pe {
                wkp = vec![0.0; s * d];
                gemm(s, d, d, &p[pe..pe + s * d], false, &p[lo.wk..lo.wk + d * d], false, &mut wkp, 0.0);
            }
            let learned = self.learned_probs(li, &pe_index);
            let (o, attn, gvals) = self.attention(seqs, &offsets, &q, &k, &v, &wkp, &pe_index, learned.as_ref());
            let proj = linear(&o, total, d, &p[lo.wo..lo.wo + d * d], &p[lo.bo..lo.bo + d], d);
            let x_in = std::mem::take(&mut x);
            let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let (m, ln2) = layer_norm(&x_mid, d, &p[lo.ln2_g..lo.ln2_g + d], &p[lo.ln2_b..lo.ln2_b + d]);
            let hdim = d * cfg.mlp_ratio;
            let u = linear(&m, total, d, &p[lo.w1..lo.w1 + d * hdim], &p[lo.b1..lo.b1 + hdim], hdim);
            let act: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let y = linear(&act, total, hdim, &p[lo.w2..lo.w2 + hdim * d], &p[lo.b2..lo.b2 + d], d);
            x = x_mid.iter().zip(&y).map(|(a, b)| a + b).collect();
            layers.push(LayerCache { ln1, a, q, k, v, attn, gvals, o, ln2, m, u, act, wkp, learned });
        }
        let (f, lnf) = layer_norm(&x, d, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d]);
        let vsz = cfg.vocab;
        let mut fr = Vec::with_capacity(out_rows.len() * d);
        for &r in out_rows {
            fr.extend_from_slice(&f[r * d..(r + 1) * d]);
        }
        let logits = linear(&fr, out_rows.len(), d, &p[lay.wout..lay.wout + d * vsz], &p[lay.bout..lay.bout + vsz], vsz);
        let tokens = seqs.iter().map(|s| s.tokens.to_vec()).collect();
        Ok((logits, Cache { offsets, tokens, layers, lnf, fr, pe_index }))
    }

    fn pe_index(&self, seqs: &[SeqRef]) -> Result<PeIndex, TransformerError> {
        let mut per_seq = Vec::with_capacity(seqs.len());
        let mut slots: HashMap<(usize, usize, usize), u32> = HashMap::new();
        let mut keys = Vec::new();
        for s in seqs {
            let t = s.tokens.len();
            let mut idx = vec![0u32; t * t];
            match &self.pe {
                PeRuntime::Absolute | PeRuntime::Rotary(_) => {}
                PeRuntime::Fixed(prf) | PeRuntime::Learned { frozen: Some(prf), .. } => {
                    for i in 0..t {
                        for j in 0..=i {
                            let v = prf.value(i, j);
                            if v >= self.s_table {
                                return Err(PeError::ValueOutOfRange { value: v, s_max: self.s_table }.into());
                            }
                            idx[i * t + j] = v as u32;
                        }
                    }
                }
                PeRuntime::FixedSh(prf) => {
                    for i in 0..t {
                        for j in 0..=i {
                            let v = prf.value(i, j, s.scale);
                            if v >= self.s_table {
                                return Err(PeError::ValueOutOfRange { value: v, s_max: self.s_table }.into());
                            }
                            idx[i * t + j] = v as u32;
                        }
                    }
                }
                PeRuntime::Learned { cfg, frozen: None } => {
                    let n = if cfg.scale_hint { s.scale } else { 0 };
                    for i in 0..t {
                        for j in 0..=i {
                            let key = (i, j, n);
                            let next = slots.len() as u32;
                            let id = *slots.entry(key).or_insert_with(|| {
                                keys.push(key);
                                next
                            });
                            idx[i * t + j] = id;
                        }
                    }
                }
            }
            per_seq.push(idx);
        }
        Ok(PeIndex { per_seq, keys })
    }

    fn learned_probs(&self, layer: usize, index: &PeIndex) -> Option<LearnedProbs> {
        let lprf = self.learnable_prf(layer)?;
        let scale_hint = lprf.config.scale_hint;
        let caches: Vec<PrfCache> = index
            .keys
            .iter()
            .map(|&(i, j, n)| {
                lprf.forward_cached(i, j, scale_hint.then_some(n.max(1)))
                    .expect("scale hint supplied for scale-hinted PRF")
            })
            .collect();
        Some(LearnedProbs { caches })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        seqs: &[SeqRef],
        offsets: &[usize],
        q: &[f64],
        k: &[f64],
        v: &[f64],
        wkp: &[f64],
        index: &PeIndex,
        learned: Option<&LearnedProbs>,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let c = 1.0 / (dh as f64).sqrt();
        let s_tab = self.s_table;
        let has_table = !wkp.is_empty();
        let total: usize = seqs.iter().map(|s| s.tokens.len()).sum();
        let mut o = vec![0.0; total * d];
        let mut attn_all = Vec::with_capacity(seqs.len() * heads);
        let mut g_all = Vec::with_capacity(seqs.len() * heads);
        for (si, s) in seqs.iter().enumerate() {
            let t = s.tokens.len();
            let off = offsets[si];
            let idx = &index.per_seq[si];
            for h in 0..heads {
                let hs = h * dh;
                let mut attn = vec![0.0; t * t];
                let mut gv = if has_table { vec![0.0; t * s_tab] } else { Vec::new() };
                let mut scores = vec![0.0; t];
                for i in 0..t {
                    let qi = &q[(off + i) * d + hs..(off + i) * d + hs + dh];
                    if has_table {
                        for sv in 0..s_tab {
                            gv[i * s_tab + sv] = dot(qi, &wkp[sv * d + hs..sv * d + hs + dh]);
                        }
                    }
                    for j in 0..=i {
                        let kj = &k[(off + j) * d + hs..(off + j) * d + hs + dh];
                        let raw = dot(qi, kj);
                        let pe = if !has_table {
                            0.0
                        } else if let Some(lp) = learned {
                            let probs = &lp.caches[idx[i * t + j] as usize].probs;
                            let g = &gv[i * s_tab..(i + 1) * s_tab];
                            probs.iter().zip(g).fold(0.0, |acc, (p, gs)| acc + p * gs)
                        } else if self.is_frozen() {
                            let sel = idx[i * t + j] as usize;
                            let g = &gv[i * s_tab..(i + 1) * s_tab];
                            (0..s_tab).fold(0.0, |acc, sv| acc + if sv == sel { 1.0 } else { 0.0 } * g[sv])
                        } else {
                            gv[i * s_tab + idx[i * t + j] as usize]
                        };
                        scores[j] = (raw + pe) * c;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let oi = &mut o[(off + i) * d + hs..(off + i) * d + hs + dh];
                    for j in 0..=i {
                        let a = scores[j];
                        attn[i * t + j] = a;
                        let vj = &v[(off + j) * d + hs..(off + j) * d + hs + dh];
                        for (ov, vv) in oi.iter_mut().zip(vj) {
                            *ov += a * vv;
                        }
                    }
                }
                attn_all.push(attn);
                g_all.push(gv);
            }
        }
        (o, attn_all, g_all)
    }

    fn is_frozen(&self) -> bool {
        matches!(self.pe, PeRuntime::Learned { frozen: Some(_), .. })
    }

    fn backward(&self, cache: &Cache, out_rows: &[usize], dlogits: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.hidden;
        let vsz = cfg.vocab;
        let p = &self.params;
        let lay = &self.layout;
        let mut grad = vec![0.0; p.len()];
        let total: usize = cache.tokens.iter().map(Vec::len).sum();

        let (gw, rest) = grad.split_at_mut(lay.bout);
        let dfr = linear_backward(
            &cache.fr,
            out_rows.len(),
            d,
            &p[lay.wout..lay.wout + d * vsz],
            vsz,
            dlogits,
            &mut gw[lay.wout..lay.wout + d * vsz],
            &mut rest[..vsz],
        );
        let mut df = vec![0.0; total * d];
        for (k, &r) in out_rows.iter().enumerate() {
            for (a, b) in df[r * d..(r + 1) * d].iter_mut().zip(&dfr[k * d..(k + 1) * d]) {
                *a += b;
            }
        }
        let (gg, gb) = grad.split_at_mut(lay.lnf_b);
        let mut dx = layer_norm_backward(&cache.lnf, d, &p[lay.lnf_g..lay.lnf_g + d], &df, &mut gg[lay.lnf_g..lay.lnf_g + d], &mut gb[..d]);

        let seqs: Vec<SeqRef> = cache.tokens.iter().map(|t| SeqRef { tokens: t, scale: 0, answer_start: 0 }).collect();
        for (li, lo) in lay.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let hdim = d * cfg.mlp_ratio;
            // MLP branch.
            let dact = {
                let (a, b) = grad.split_at_mut(lo.b2);
                linear_backward(&lc.act, total, hdim, &p[lo.w2..lo.w2 + hdim * d], d, &dx, &mut a[lo.w2..lo.w2 + hdim * d], &mut b[..d])
            };
            let du: Vec<f64> = dact.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dm = {
                let (a, b) = grad.split_at_mut(lo.b1);
                linear_backward(&lc.m, total, d, &p[lo.w1..lo.w1 + d * hdim], hdim, &du, &mut a[lo.w1..lo.w1 + d * hdim], &mut b[..hdim])
            };
            let dxm = {
                let (a, b) = grad.split_at_mut(lo.ln2_b);
                layer_norm_backward(&lc.ln2, d, &p[lo.ln2_g..lo.ln2_g + d], &dm, &mut a[lo.ln2_g..lo.ln2_g + d], &mut b[..d])
            };
            for (a, b) in dx.iter_mut().zip(&dxm) {
                *a += b;
            }
            // Attention branch.
            let d_o = {
                let (a, b) = grad.split_at_mut(lo.bo);
                linear_backward(&lc.o, total, d, &p[lo.wo..lo.wo + d * d], d, &dx, &mut a[lo.wo..lo.wo + d * d], &mut b[..d])
            };
            let s_tab = self.s_table;
            let mut dq = vec![0.0; total * d];
            let mut dk = vec![0.0; total * d];
            let mut dv = vec![0.0; total * d];
            let mut dwkp = vec![0.0; lc.wkp.len()];
            let mut dprobs: Vec<Vec<f64>> = match &lc.learned {
                Some(lp) => vec![vec![0.0; s_tab]; lp.caches.len()],
                None => Vec::new(),
            };
            self.attention_backward(&seqs, &cache.offsets, lc, &cache.pe_index, &d_o, &mut dq, &mut dk, &mut dv, &mut dwkp, &mut dprobs);
            if let PeRuntime::Rotary(thetas) = &self.pe {
                rotate_rows(&mut dq, &seqs, &cache.offsets, d, cfg.heads, thetas, -1.0);
                rotate_rows(&mut dk, &seqs, &cache.offsets, d, cfg.heads, thetas, -1.0);
            }
            if let Some(pe) = lo.pe {
                // wkp = P W_K
                let (a, b) = grad.split_at_mut(pe);
                gemm(s_tab, d, d, &dwkp, false, &p[lo.wk..lo.wk + d * d], true, &mut b[..s_tab * d], 1.0);
                gemm(d, s_tab, d, &p[pe..pe + s_tab * d], true, &dwkp, false, &mut a[lo.wk..lo.wk + d * d], 1.0);
            }
            if let (Some(lp), Some(th)) = (&lc.learned, lo.theta) {
                let lprf = self.learnable_prf(li).expect("learned layer");
                let n = lprf.n_params();
                let gth = &mut grad[th..th + n];
                for (c, dp) in lp.caches.iter().zip(&dprobs) {
                    lprf.backward(c, dp, gth);
                }
            }
            let mut da = {
                let (a, b) = grad.split_at_mut(lo.bq);
                linear_backward(&lc.a, total, d, &p[lo.wq..lo.wq + d * d], d, &dq, &mut a[lo.wq..lo.wq + d * d], &mut b[..d])
            };
            let dak = {
                let (a, b) = grad.split_at_mut(lo.bk);
                linear_backward(&lc.a, total, d, &p[lo.wk..lo.wk + d * d], d, &dk, &mut a[lo.wk..lo.wk + d * d], &mut b[..d])
            };
            let dav = {
                let (a, b) = grad.split_at_mut(lo.bv);
                linear_backward(&lc.a, total, d, &p[lo.wv..lo.wv + d * d], d, &dv, &mut a[lo.wv..lo.wv + d * d], &mut b[..d])
            };
            for ((a, b), c) in da.iter_mut().zip(&dak).zip(&dav) {
                *a += b + c;
            }
            let dxa = {
                let (a, b) = grad.split_at_mut(lo.ln1_b);
                layer_norm_backward(&lc.ln1, d, &p[lo.ln1_g..lo.ln1_g + d], &da, &mut a[lo.ln1_g..lo.ln1_g + d], &mut b[..d])
            };
            for (a, b) in dx.iter_mut().zip(&dxa) {
                *a += b;
            }
        }
        for (si, toks) in cache.tokens.iter().enumerate() {
            let off = cache.offsets[si];
            for (t, &tok) in toks.iter().enumerate() {
                let row = &dx[(off + t) * d..(off + t + 1) * d];
                let base = lay.tok + tok as usize * d;
                for (g, r) in grad[base..base + d].iter_mut().zip(row) {
                    *g += r;
                }
                if let Some(ape) = lay.ape {
                    for (g, r) in grad[ape + t * d..ape + (t + 1) * d].iter_mut().zip(row) {
                        *g += r;
                    }
                }
            }
        }
        grad
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        seqs: &[SeqRef],
        offsets: &[usize],
        lc: &LayerCache,
        index: &PeIndex,
        d_o: &[f64],
        dq: &mut [f64],
        dk: &mut [f64],
        dv: &mut [f64],
        dwkp: &mut [f64],
        dprobs: &mut [Vec<f64>],
    ) {
        let d = self.config.hidden;
        let heads = self.config.heads;
        let dh = d / heads;
        let c = 1.0 / (dh as f64).sqrt();
        let s_tab = self.s_table;
        let has_table = !lc.wkp.is_empty();
        let frozen = self.is_frozen();
        let (q, k, v) = (&lc.q, &lc.k, &lc.v);
        for (si, s) in seqs.iter().enumerate() {
            let t = s.tokens.len();
            let off = offsets[si];
            let idx = &index.per_seq[si];
            for h in 0..heads {
                let hs = h * dh;
                let attn = &lc.attn[si * heads + h];
                let gv = &lc.gvals[si * heads + h];
                let mut da = vec![0.0; t];
                let mut dg = vec![0.0; s_tab];
                for i in 0..t {
                    let doi = &d_o[(off + i) * d + hs..(off + i) * d + hs + dh];
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let a = attn[i * t + j];
                        let vj = &v[(off + j) * d + hs..(off + j) * d + hs + dh];
                        da[j] = dot(doi, vj);
                        sum += a * da[j];
                        for (g, o) in dv[(off + j) * d + hs..(off + j) * d + hs + dh].iter_mut().zip(doi) {
                            *g += a * o;
                        }
                    }
                    if has_table {
                        dg.iter_mut().for_each(|g| *g = 0.0);
                    }
                    let qi: Vec<f64> = q[(off + i) * d + hs..(off + i) * d + hs + dh].to_vec();
                    for j in 0..=i {
                        let dz = attn[i * t + j] * (da[j] - sum) * c;
                        if dz == 0.0 {
                            continue;
                        }
                        let kj = &k[(off + j) * d + hs..(off + j) * d + hs + dh];
                        for (g, kv) in dq[(off + i) * d + hs..(off + i) * d + hs + dh].iter_mut().zip(kj) {
                            *g += dz * kv;
                        }
                        for (g, qv) in dk[(off + j) * d + hs..(off + j) * d + hs + dh].iter_mut().zip(&qi) {
                            *g += dz * qv;
                        }
                        if !has_table {
                            continue;
                        }
                        let slot = idx[i * t + j] as usize;
                        match &lc.learned {
                            Some(lp) if !frozen => {
                                let probs = &lp.caches[slot].probs;
                                let dp = &mut dprobs[slot];
                                for sv in 0..s_tab {
                                    dg[sv] += dz * probs[sv];
                                    dp[sv] += dz * gv[i * s_tab + sv];
                                }
                            }
                            _ => dg[slot] += dz,
                        }
                    }
                    if has_table {
                        for (sv, &g) in dg.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let w = &lc.wkp[sv * d + hs..sv * d + hs + dh];
                            for (a, b) in dq[(off + i) * d + hs..(off + i) * d + hs + dh].iter_mut().zip(w) {
                                *a += g * b;
                            }
                            for (a, b) in dwkp[sv * d + hs..sv * d + hs + dh].iter_mut().zip(&qi) {
                                *a += g * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Packed row indices predicting answer tokens, and the targets.
fn answer_rows(batch: &[SeqRef]) -> (Vec<usize>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut off = 0;
    for s in batch {
        let start = s.answer_start.max(1);
        for pos in start..s.tokens.len() {
            rows.push(off + pos - 1);
            targets.push(s.tokens[pos]);
        }
        off += s.tokens.len();
    }
    (rows, targets)
}

/// Rotates each head's coordinate pairs by `sign * position * theta`.
fn rotate_rows(x: &mut [f64], seqs: &[SeqRef], offsets: &[usize], d: usize, heads: usize, thetas: &[f64], sign: f64) {
    let dh = d / heads;
    for (si, s) in seqs.iter().enumerate() {
        for pos in 0..s.tokens.len() {
            let row = &mut x[(offsets[si] + pos) * d..(offsets[si] + pos + 1) * d];
            for h in 0..heads {
                for (kk, th) in thetas.iter().enumerate() {
                    let (sn, cs) = (sign * pos as f64 * th).sin_cos();
                    let a = row[h * dh + 2 * kk];
                    let b = row[h * dh + 2 * kk + 1];
                    row[h * dh + 2 * kk] = cs * a - sn * b;
                    row[h * dh + 2 * kk + 1] = sn * a + cs * b;
                }
            }
        }
    }
}

struct PeIndex {
    /// Per sequence, `t x t` relation values (fixed PE) or probability
    /// slots (learned PE).
    per_seq: Vec<Vec<u32>>,
    /// Distinct `(i, j, n)` keys behind the learned slots.
    keys: Vec<(usize, usize, usize)>,
}

struct LearnedProbs {
    caches: Vec<PrfCache>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<Vec<f64>>,
    gvals: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: LnCache,
    m: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
    wkp: Vec<f64>,
    learned: Option<LearnedProbs>,
}

struct Cache {
    offsets: Vec<usize>,
    tokens: Vec<Vec<u32>>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    fr: Vec<f64>,
    pe_index: PeIndex,
}

fn build_layout(cfg: &ModelConfig, pe: &PeRuntime, s_table: usize) -> Layout {
    let d = cfg.hidden;
    let hdim = d * cfg.mlp_ratio;
    let mut b = LayoutBuilder { named: Vec::new(), total: 0 };
    let tok = b.add("tok_emb".into(), cfg.vocab * d, ParamKind::Embedding);
    let ape = matches!(cfg.pe, PeKind::Ape).then(|| b.add("ape".into(), cfg.max_len * d, ParamKind::Embedding));
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut add = |n: &str, len, kind| b.add(format!("l{l}.{n}"), len, kind);
        let lo = LayerOffsets {
            ln1_g: add("ln1.g", d, ParamKind::Gain),
            ln1_b: add("ln1.b", d, ParamKind::Bias),
            wq: add("wq", d * d, ParamKind::Matrix { fan_in: d }),
            bq: add("bq", d, ParamKind::Bias),
            wk: add("wk", d * d, ParamKind::Matrix { fan_in: d }),
            bk: add("bk", d, ParamKind::Bias),
            wv: add("wv", d * d, ParamKind::Matrix { fan_in: d }),
            bv: add("bv", d, ParamKind::Bias),
            wo: add("wo", d * d, ParamKind::Matrix { fan_in: d }),
            bo: add("bo", d, ParamKind::Bias),
            ln2_g: add("ln2.g", d, ParamKind::Gain),
            ln2_b: add("ln2.b", d, ParamKind::Bias),
            w1: add("w1", d * hdim, ParamKind::Matrix { fan_in: d }),
            b1: add("b1", hdim, ParamKind::Bias),
            w2: add("w2", hdim * d, ParamKind::Matrix { fan_in: hdim }),
            b2: add("b2", d, ParamKind::Bias),
            pe: (s_table > 0).then(|| add("pe", s_table * d, ParamKind::Embedding)),
            theta: match pe {
                PeRuntime::Learned { cfg: c, .. } => Some(add("prf_theta", c.n_params(), ParamKind::PrfTheta)),
                _ => None,
            },
        };
        layers.push(lo);
    }
    let lnf_g = b.add("lnf.g".into(), d, ParamKind::Gain);
    let lnf_b = b.add("lnf.b".into(), d, ParamKind::Bias);
    let wout = b.add("wout".into(), d * cfg.vocab, ParamKind::Matrix { fan_in: d });
    let bout = b.add("bout".into(), cfg.vocab, ParamKind::Bias);
    Layout { tok, ape, layers, lnf_g, lnf_b, wout, bout, total: b.total, named: b.named }
}
