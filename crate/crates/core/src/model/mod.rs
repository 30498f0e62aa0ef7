//! Decoder-only transformer with interceptable attention.
//!
//! Architecture: learned token and position embeddings, `L` pre-norm residual
//! blocks (LayerNorm, multi-head causal self-attention, LayerNorm, 4x GELU
//! feed-forward), a final LayerNorm and an untied output projection. All
//! arithmetic is `f32` except attention normalization, which runs in `f64` and
//! is rounded back so every stored weight row sums to one within 1e-6.
//!
//! Two optional attention variants are configured per model. With
//! `qk_norm_scale > 0`, queries and keys are unit-normalized per head and their
//! dot product is multiplied by that fixed scale, which bounds every score to
//! `[-scale, scale]`. With `recency_slope > 0`, a key `j` positions behind the
//! query loses `recency_slope * j` from its score. Both default to off, giving
//! the usual `q . k / sqrt(head_dim)`.

mod cache;
mod params;

pub use cache::{CacheSnapshot, KvCache};
pub use params::{init_params, LayerOffsets, ParamEntry, ParamLayout};

use serde::{Deserialize, Serialize};

use crate::error::{contract, GameError, Result};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
    pub qk_norm_scale: f32,
    pub recency_slope: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 3,
            num_heads: 4,
            model_dim: 64,
            vocab_size: 157,
            max_seq_len: 64,
            rng_seed: 0,
            qk_norm_scale: 0.0,
            recency_slope: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.vocab_size == 0 {
            return Err(contract("layers, heads, model_dim and vocab_size must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(contract(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(contract("max_seq_len must be at least 2"));
        }
        for (name, v) in [("qk_norm_scale", self.qk_norm_scale), ("recency_slope", self.recency_slope)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(contract(format!("{name} must be a nonnegative finite number, got {v}")));
            }
        }
        Ok(())
    }

    /// Multiplier applied to `q . k` (after normalization when that is enabled).
    pub fn score_scale(&self) -> f32 {
        if self.qk_norm_scale > 0.0 {
            self.qk_norm_scale
        } else {
            1.0 / (self.head_dim() as f32).sqrt()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Number of attention heads across all layers (the feature width).
    pub fn num_heads_total(&self) -> usize {
        self.num_layers * self.num_heads
    }
}

/// Split of a sequence into `context_len` prompt tokens followed by
/// `generated_len` generated ones. Positions are 1-based in the math and
/// 0-based in slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub context_len: usize,
    pub generated_len: usize,
}

impl SequenceLayout {
    pub fn new(context_len: usize, generated_len: usize) -> Result<Self> {
        if context_len == 0 {
            return Err(contract("context length must be at least 1"));
        }
        Ok(SequenceLayout { context_len, generated_len })
    }

    /// Layout of a row of length `total` whose first `context_len` entries are context.
    pub fn for_row(context_len: usize, total: usize) -> Result<Self> {
        if total < context_len {
            return Err(contract(format!("row length {total} shorter than context length {context_len}")));
        }
        Self::new(context_len, total - context_len)
    }

    pub fn total_len(&self) -> usize {
        self.context_len + self.generated_len
    }
}

/// `softmax(scores + eta * bias)`, max-stabilized.
pub fn softmax_with_bias(scores: &[f64], bias: &[f64], eta: f64) -> Result<Vec<f64>> {
    if scores.len() != bias.len() {
        return Err(contract(format!("scores length {} != bias length {}", scores.len(), bias.len())));
    }
    if scores.is_empty() {
        return Err(contract("softmax of an empty row"));
    }
    if !eta.is_finite() || scores.iter().chain(bias).any(|x| !x.is_finite()) {
        return Err(GameError::Numeric("non-finite softmax input".into()));
    }
    let z: Vec<f64> = scores.iter().zip(bias).map(|(s, b)| s + eta * b).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / sum).collect())
}

pub(crate) fn softmax_row_f32(z: &[f32], out: &mut [f32]) {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let mut tmp = [0.0f64; 64];
    let mut heap;
    let e: &mut [f64] = if z.len() <= 64 {
        &mut tmp[..z.len()]
    } else {
        heap = vec![0.0f64; z.len()];
        &mut heap
    };
    for (ei, &zi) in e.iter_mut().zip(z) {
        *ei = (zi as f64 - m).exp();
        sum += *ei;
    }
    for (o, ei) in out.iter_mut().zip(e.iter()) {
        *o = (ei / sum) as f32;
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn layer_norm(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
}

/// `out = x W + b` for one row; `W` is `[x.len(), out.len()]` row-major.
pub(crate) fn vec_affine(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Additive pre-softmax term for every head: head `k` (layer-major) receives
/// `head_scale[k] * bias[i]` at key position `i`. The bias vector may be longer
/// than the current row; only its first `N` entries are read.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEdit {
    pub head_scale: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AttentionEdit {
    pub fn is_noop(&self) -> bool {
        self.head_scale.iter().all(|&s| s == 0.0)
    }
}

/// Attention rows of one decode step for every (layer, head), layer-major.
/// `scores` are the raw scaled dot products; `weights` are the normalized rows
/// after any injected bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub step: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub len: usize,
    pub scores: Vec<f32>,
    pub weights: Vec<f32>,
}

impl AttentionTrace {
    pub fn score_row(&self, layer: usize, head: usize) -> &[f32] {
        let k = layer * self.num_heads + head;
        &self.scores[k * self.len..(k + 1) * self.len]
    }

    pub fn weight_row(&self, layer: usize, head: usize) -> &[f32] {
        let k = layer * self.num_heads + head;
        &self.weights[k * self.len..(k + 1) * self.len]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f32>,
    fingerprint: u64,
}

fn fingerprint(cfg: &ModelConfig, params: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for v in [cfg.num_layers, cfg.num_heads, cfg.model_dim, cfg.vocab_size, cfg.max_seq_len] {
        eat(v as u64);
    }
    eat(cfg.qk_norm_scale.to_bits() as u64);
    eat(cfg.recency_slope.to_bits() as u64);
    for p in params {
        eat(p.to_bits() as u64);
    }
    h
}

struct Scratch {
    x: Vec<f32>,
    h: Vec<f32>,
    qkv: Vec<f32>,
    att: Vec<f32>,
    proj: Vec<f32>,
    ff: Vec<f32>,
    z: Vec<f32>,
}

impl Model {
    /// Freshly initialized model from `config.rng_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = init_params(&config, &layout);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(contract(format!(
                "parameter count {} does not match layout total {}",
                params.len(),
                layout.total
            )));
        }
        let fingerprint = fingerprint(&config, &params);
        Ok(Model { config, layout, params, fingerprint })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.model_dim, self.config.max_seq_len, self.fingerprint)
    }

    fn p(&self, r: &std::ops::Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    /// Feed one token at the cache's next position, returning next-token logits
    /// and the attention rows of this step.
    pub fn forward_step(
        &self,
        token: u32,
        cache: &mut KvCache,
        edit: Option<&AttentionEdit>,
    ) -> Result<(Vec<f32>, AttentionTrace)> {
        let cfg = &self.config;
        let pos = cache.position();
        if cache.model_fingerprint() != self.fingerprint {
            return Err(GameError::Identity("cache was created by a different model".into()));
        }
        if pos >= cfg.max_seq_len {
            return Err(GameError::Capacity { position: pos, max: cfg.max_seq_len });
        }
        if token as usize >= cfg.vocab_size {
            return Err(contract(format!("token {token} outside vocabulary of {}", cfg.vocab_size)));
        }
        let n = pos + 1;
        if let Some(e) = edit {
            if e.head_scale.len() != cfg.num_heads_total() {
                return Err(contract(format!(
                    "edit covers {} heads, model has {}",
                    e.head_scale.len(),
                    cfg.num_heads_total()
                )));
            }
            if e.bias.len() < n {
                return Err(contract(format!("bias length {} shorter than row length {n}", e.bias.len())));
            }
        }
        let (d, hn, hd) = (cfg.model_dim, cfg.num_heads, cfg.head_dim());
        let scale = cfg.score_scale();
        let mut s = Scratch {
            x: vec![0.0; d],
            h: vec![0.0; d],
            qkv: vec![0.0; 3 * d],
            att: vec![0.0; d],
            proj: vec![0.0; d],
            ff: vec![0.0; cfg.ffn_dim()],
            z: vec![0.0; n],
        };
        let te = self.p(&self.layout.tok_emb);
        let pe = self.p(&self.layout.pos_emb);
        let t = token as usize;
        for i in 0..d {
            s.x[i] = te[t * d + i] + pe[pos * d + i];
        }
        let mut trace = AttentionTrace {
            step: pos,
            num_layers: cfg.num_layers,
            num_heads: hn,
            len: n,
            scores: vec![0.0; cfg.num_heads_total() * n],
            weights: vec![0.0; cfg.num_heads_total() * n],
        };
        for (l, lo) in self.layout.layers.iter().enumerate() {
            layer_norm(&s.x, self.p(&lo.ln1_g), self.p(&lo.ln1_b), &mut s.h);
            vec_affine(&s.h, self.p(&lo.qkv_w), self.p(&lo.qkv_b), &mut s.qkv);
            if cfg.qk_norm_scale > 0.0 {
                for part in s.qkv[..2 * d].chunks_mut(hd) {
                    unit_normalize(part);
                }
            }
            cache.write(l, pos, &s.qkv[d..2 * d], &s.qkv[2 * d..3 * d]);
            let keys = cache.keys(l, n);
            let vals = cache.values(l, n);
            s.att.fill(0.0);
            for h in 0..hn {
                let k = l * hn + h;
                let q = &s.qkv[h * hd..(h + 1) * hd];
                let srow = &mut trace.scores[k * n..(k + 1) * n];
                for i in 0..n {
                    let key = &keys[i * d + h * hd..i * d + (h + 1) * hd];
                    srow[i] = crate::linalg::dot(q, key) * scale - cfg.recency_slope * (pos - i) as f32;
                }
                s.z.copy_from_slice(srow);
                if let Some(e) = edit {
                    let c = e.head_scale[k];
                    if c != 0.0 {
                        for (zi, bi) in s.z.iter_mut().zip(&e.bias[..n]) {
                            *zi += c * bi;
                        }
                    }
                }
                let wrow = &mut trace.weights[k * n..(k + 1) * n];
                softmax_row_f32(&s.z, wrow);
                let out = &mut s.att[h * hd..(h + 1) * hd];
                for (i, &a) in wrow.iter().enumerate() {
                    let v = &vals[i * d + h * hd..i * d + (h + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += a * vv;
                    }
                }
            }
            vec_affine(&s.att, self.p(&lo.out_w), self.p(&lo.out_b), &mut s.proj);
            for (x, p) in s.x.iter_mut().zip(&s.proj) {
                *x += p;
            }
            layer_norm(&s.x, self.p(&lo.ln2_g), self.p(&lo.ln2_b), &mut s.h);
            vec_affine(&s.h, self.p(&lo.fc1_w), self.p(&lo.fc1_b), &mut s.ff);
            for f in s.ff.iter_mut() {
                *f = gelu(*f);
            }
            vec_affine(&s.ff, self.p(&lo.fc2_w), self.p(&lo.fc2_b), &mut s.proj);
            for (x, p) in s.x.iter_mut().zip(&s.proj) {
                *x += p;
            }
        }
        layer_norm(&s.x, self.p(&self.layout.lnf_g), self.p(&self.layout.lnf_b), &mut s.h);
        let mut logits = vec![0.0; cfg.vocab_size];
        vec_affine(&s.h, self.p(&self.layout.head_w), self.p(&self.layout.head_b), &mut logits);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(GameError::Numeric(format!("non-finite logits at position {pos}")));
        }
        cache.commit();
        Ok((logits, trace))
    }

    /// Feed `tokens` without edits, returning the logits after the last one.
    pub fn prefill(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Option<Vec<f32>>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.forward_step(t, cache, None)?.0);
        }
        Ok(last)
    }

    /// Argmax continuation of `prompt`. The edit, when given, applies to the
    /// query rows that predict new tokens (the last prompt position onward);
    /// earlier prompt positions are encoded unedited.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        max_new_tokens: usize,
        stop: Option<u32>,
        edit: Option<&AttentionEdit>,
    ) -> Result<(Vec<u32>, Vec<AttentionTrace>)> {
        if prompt.is_empty() {
            return Err(contract("empty prompt"));
        }
        if prompt.len() + max_new_tokens > self.config.max_seq_len {
            return Err(GameError::Capacity {
                position: prompt.len() + max_new_tokens,
                max: self.config.max_seq_len,
            });
        }
        let mut cache = self.new_cache();
        self.prefill(&prompt[..prompt.len() - 1], &mut cache)?;
        let mut pending = prompt[prompt.len() - 1];
        let mut out = Vec::new();
        let mut traces = Vec::new();
        for _ in 0..max_new_tokens {
            let (logits, trace) = self.forward_step(pending, &mut cache, edit)?;
            let tok = argmax(&logits) as u32;
            out.push(tok);
            traces.push(trace);
            pending = tok;
            if Some(tok) == stop {
                break;
            }
        }
        Ok((out, traces))
    }
}

pub(crate) const NORM_EPS: f32 = 1e-6;

/// Scale `x` to unit length in place, returning the norm it was divided by.
pub(crate) fn unit_normalize(x: &mut [f32]) -> f32 {
    let n = (x.iter().map(|v| v * v).sum::<f32>() + NORM_EPS).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    n
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny() -> Model {
        Model::new(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            vocab_size: 10,
            max_seq_len: 16,
            rng_seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn scrambled() -> Model {
        let mut m = tiny();
        let mut params = m.params.clone();
        for (i, p) in params.iter_mut().enumerate() {
            *p += 0.3 * ((i as f32) * 0.7).sin();
        }
        m = Model::from_params(m.config.clone(), params).unwrap();
        m
    }

    #[test]
    fn config_validation() {
        let mut c = tiny().config;
        c.model_dim = 9;
        assert!(c.validate().is_err());
        c.model_dim = 8;
        c.max_seq_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn softmax_examples() {
        let a = softmax_with_bias(&[1.0, 2.0], &[0.3, 0.7], 0.0).unwrap();
        let b = softmax_with_bias(&[1.0, 2.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(a, b);
        let c = softmax_with_bias(&[0.0, 0.0], &[2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(c[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 1.0 / 3.0, epsilon = 1e-12);
        let d = softmax_with_bias(&[1.0, 2.0], &[4.5, 4.5], 1.0).unwrap();
        for (x, y) in d.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_with_bias(&[1.0], &[1.0, 2.0], 1.0), Err(GameError::Contract(_))));
        assert!(matches!(softmax_with_bias(&[f64::NAN], &[1.0], 1.0), Err(GameError::Numeric(_))));
        assert!(matches!(softmax_with_bias(&[], &[], 1.0), Err(GameError::Contract(_))));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f32, -1.0, -0.2, 0.0, 0.5, 2.0] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd, gelu_grad(x), epsilon = 1e-3);
        }
    }

    #[test]
    fn trace_rows_are_probability_vectors() {
        let m = scrambled();
        let mut cache = m.new_cache();
        for (step, t) in [1u32, 4, 2, 7, 3].into_iter().enumerate() {
            let (_, tr) = m.forward_step(t, &mut cache, None).unwrap();
            assert_eq!(tr.len, step + 1);
            for l in 0..2 {
                for h in 0..2 {
                    let row = tr.weight_row(l, h);
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!((row.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_edits_are_bitwise_noops() {
        let m = scrambled();
        let prompt = [1u32, 2, 3, 4];
        let plain = m.greedy_decode(&prompt, 6, None, None).unwrap();
        let bias: Vec<f32> = (1..=16).map(|i| 1.0 / i as f32).collect();
        let zero = AttentionEdit { head_scale: vec![0.0; 4], bias: bias.clone() };
        assert_eq!(m.greedy_decode(&prompt, 6, None, Some(&zero)).unwrap(), plain);
        let mut c1 = m.new_cache();
        let mut c2 = m.new_cache();
        for &t in &prompt {
            let a = m.forward_step(t, &mut c1, None).unwrap();
            let b = m.forward_step(t, &mut c2, Some(&zero)).unwrap();
            assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn large_bias_on_first_position_raises_its_weight() {
        let m = scrambled();
        let mut c1 = m.new_cache();
        m.prefill(&[1, 2, 3], &mut c1).unwrap();
        let mut c2 = c1.clone();
        let mut scale = vec![0.0; 4];
        scale[1] = 5.0;
        let mut bias = vec![0.0; 16];
        bias[0] = 1.0;
        let edit = AttentionEdit { head_scale: scale, bias };
        let (_, plain) = m.forward_step(5, &mut c1, None).unwrap();
        let (_, edited) = m.forward_step(5, &mut c2, Some(&edit)).unwrap();
        assert!(edited.weight_row(0, 1)[0] > plain.weight_row(0, 1)[0]);
        assert_eq!(edited.weight_row(0, 0), plain.weight_row(0, 0));
        assert_eq!(edited.score_row(0, 1), plain.score_row(0, 1));
    }

    #[test]
    fn capacity_and_vocab_errors() {
        let m = tiny();
        let mut c = m.new_cache();
        for _ in 0..16 {
            m.forward_step(1, &mut c, None).unwrap();
        }
        assert!(matches!(m.forward_step(1, &mut c, None), Err(GameError::Capacity { .. })));
        let mut c = m.new_cache();
        assert!(m.forward_step(99, &mut c, None).is_err());
        assert!(m.greedy_decode(&[], 3, None, None).is_err());
        assert!(m.greedy_decode(&[1; 10], 7, None, None).is_err());
    }

    #[test]
    fn greedy_decode_basics() {
        let m = scrambled();
        let (t, tr) = m.greedy_decode(&[1, 2], 0, None, None).unwrap();
        assert!(t.is_empty() && tr.is_empty());
        let a = m.greedy_decode(&[1, 2, 3], 8, None, None).unwrap();
        let b = m.greedy_decode(&[1, 2, 3], 8, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 8);
        assert_eq!(a.1.len(), 8);
        let stop = a.0[2];
        let c = m.greedy_decode(&[1, 2, 3], 8, Some(stop), None).unwrap();
        let first = a.0.iter().position(|&x| x == stop).unwrap();
        assert_eq!(c.0, a.0[..=first].to_vec());
    }

    #[test]
    fn restore_then_replay_is_bit_stable() {
        let m = scrambled();
        let mut cache = m.new_cache();
        m.prefill(&[3, 1, 4], &mut cache).unwrap();
        let snap = cache.snapshot();
        let run = |cache: &mut KvCache| {
            let mut tok = 1u32;
            let mut out = Vec::new();
            for _ in 0..5 {
                let (lg, tr) = m.forward_step(tok, cache, None).unwrap();
                tok = argmax(&lg) as u32;
                out.push((tok, tr));
            }
            out
        };
        let first = run(&mut cache);
        cache.restore(&snap).unwrap();
        assert_eq!(cache.position(), 3);
        assert_eq!(cache.snapshot(), snap);
        let second = run(&mut cache);
        assert_eq!(first, second);
    }

    #[test]
    fn cache_from_other_model_rejected() {
        let a = tiny();
        let b = scrambled();
        let mut c = a.new_cache();
        assert!(matches!(b.forward_step(1, &mut c, None), Err(GameError::Identity(_))));
    }
}
