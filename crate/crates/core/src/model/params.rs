//! Named flat parameter layout.
//!
//! All weights live in one `Vec<f32>`. Matrices are row-major with shape `[in, out]`
//! so a layer computes `y = x W + b`. Order:
//!
//! ```text
//! tok_emb [V, D]   pos_emb [T, D]
//! per layer l:
//!   l{l}.ln1.g [D]  l{l}.ln1.b [D]  l{l}.qkv.w [D, 3D]  l{l}.qkv.b [3D]
//!   l{l}.out.w [D, D]  l{l}.out.b [D]
//!   l{l}.ln2.g [D]  l{l}.ln2.b [D]  l{l}.fc1.w [D, 4D]  l{l}.fc1.b [4D]
//!   l{l}.fc2.w [4D, D]  l{l}.fc2.b [D]
//! lnf.g [D]  lnf.b [D]  head.w [D, V]  head.b [V]
//! ```
//!
//! The qkv projection packs queries, keys and values side by side; within each,
//! head `h` owns columns `h*hd .. (h+1)*hd`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

struct Builder {
    entries: Vec<ParamEntry>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let e = ParamEntry { name, shape: shape.to_vec(), offset: self.offset };
        self.offset += e.len();
        let r = e.range();
        self.entries.push(e);
        r
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, v, t) = (cfg.model_dim, cfg.vocab_size, cfg.max_seq_len);
        let f = cfg.ffn_dim();
        let mut b = Builder { entries: Vec::new(), offset: 0 };
        let tok_emb = b.push("tok_emb".into(), &[v, d]);
        let pos_emb = b.push("pos_emb".into(), &[t, d]);
        let layers = (0..cfg.num_layers)
            .map(|l| LayerOffsets {
                ln1_g: b.push(format!("l{l}.ln1.g"), &[d]),
                ln1_b: b.push(format!("l{l}.ln1.b"), &[d]),
                qkv_w: b.push(format!("l{l}.qkv.w"), &[d, 3 * d]),
                qkv_b: b.push(format!("l{l}.qkv.b"), &[3 * d]),
                out_w: b.push(format!("l{l}.out.w"), &[d, d]),
                out_b: b.push(format!("l{l}.out.b"), &[d]),
                ln2_g: b.push(format!("l{l}.ln2.g"), &[d]),
                ln2_b: b.push(format!("l{l}.ln2.b"), &[d]),
                fc1_w: b.push(format!("l{l}.fc1.w"), &[d, f]),
                fc1_b: b.push(format!("l{l}.fc1.b"), &[f]),
                fc2_w: b.push(format!("l{l}.fc2.w"), &[f, d]),
                fc2_b: b.push(format!("l{l}.fc2.b"), &[d]),
            })
            .collect();
        let lnf_g = b.push("lnf.g".into(), &[d]);
        let lnf_b = b.push("lnf.b".into(), &[d]);
        let head_w = b.push("head.w".into(), &[d, v]);
        let head_b = b.push("head.b".into(), &[v]);
        ParamLayout {
            entries: b.entries,
            total: b.offset,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Parameters that receive weight decay (matrices, not gains, biases or embeddings).
    pub fn is_matrix(&self, name: &str) -> bool {
        name.ends_with(".w")
    }
}

/// Seeded initialization: N(0, 0.02) matrices and embeddings, residual output
/// projections scaled by `1/sqrt(2L)`, unit norm gains, zero biases.
pub fn init_params(cfg: &ModelConfig, layout: &ParamLayout) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut p = vec![0.0f32; layout.total];
    let base = Normal::new(0.0f32, 0.02).expect("valid std");
    let resid = Normal::new(0.0f32, 0.02 / (2.0 * cfg.num_layers as f32).sqrt()).expect("valid std");
    for e in &layout.entries {
        let slot = &mut p[e.range()];
        if e.name.ends_with(".g") {
            slot.fill(1.0);
        } else if e.name.ends_with(".b") {
            slot.fill(0.0);
        } else if e.name.ends_with("out.w") || e.name.ends_with("fc2.w") {
            slot.iter_mut().for_each(|x| *x = resid.sample(&mut rng));
        } else {
            slot.iter_mut().for_each(|x| *x = base.sample(&mut rng));
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { num_layers: 2, num_heads: 2, model_dim: 8, vocab_size: 11, max_seq_len: 6, rng_seed: 3, ..ModelConfig::default() }
    }

    #[test]
    fn layout_is_contiguous_and_complete() {
        let c = cfg();
        let lay = ParamLayout::new(&c);
        let mut off = 0;
        for e in &lay.entries {
            assert_eq!(e.offset, off);
            off += e.len();
        }
        assert_eq!(off, lay.total);
        let d = 8;
        let per_layer = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        assert_eq!(lay.total, 11 * d + 6 * d + 2 * per_layer + 2 * d + d * 11 + 11);
        assert_eq!(lay.get("l1.fc2.w").unwrap().shape, vec![32, 8]);
    }

    #[test]
    fn init_is_seeded() {
        let c = cfg();
        let lay = ParamLayout::new(&c);
        assert_eq!(init_params(&c, &lay), init_params(&c, &lay));
        let mut c2 = c.clone();
        c2.rng_seed = 4;
        assert_ne!(init_params(&c, &lay), init_params(&c2, &lay));
        let p = init_params(&c, &lay);
        assert!(p[lay.lnf_g.clone()].iter().all(|&x| x == 1.0));
        assert!(p[lay.head_b.clone()].iter().all(|&x| x == 0.0));
    }
}
