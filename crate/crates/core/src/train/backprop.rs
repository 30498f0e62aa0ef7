//! Batched forward pass with stored activations and its reverse-mode gradient.

use crate::linalg::{affine, affine_backward, gemm, View};
use crate::model::{gelu, gelu_grad, unit_normalize, ModelConfig, ParamLayout, LN_EPS};

/// Right-padded token batch. `mask[i] = 1` marks positions whose next-token
/// target contributes to the loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<f32>,
}

struct LnCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

struct LayerActs {
    ln1: LnCache,
    h1: Vec<f32>,
    /// Query and key parts are stored unit-normalized when that variant is on.
    qkv: Vec<f32>,
    /// Norms divided out of each `[row, part, head]` query/key slice.
    qk_norms: Vec<f32>,
    probs: Vec<f32>,
    att: Vec<f32>,
    ln2: LnCache,
    h2: Vec<f32>,
    f_pre: Vec<f32>,
    f_act: Vec<f32>,
}

pub struct Forward {
    layers: Vec<LayerActs>,
    lnf: LnCache,
    hf: Vec<f32>,
    /// Row-major `[batch * len, vocab]`.
    pub logits: Vec<f32>,
}

impl Forward {
    /// Attention probabilities of `layer`, laid out `[batch, head, query, key]`.
    pub fn probs(&self, layer: usize) -> &[f32] {
        &self.layers[layer].probs
    }
}

fn ln_forward(x: &[f32], g: &[f32], b: &[f32], rows: usize, d: usize, out: &mut [f32]) -> LnCache {
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (xr[i] - mean) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * g[i] + b[i];
        }
    }
    LnCache { xhat, rstd }
}

/// Adds the input gradient into `dx` and parameter gradients into `dg`, `db`.
fn ln_backward(dy: &[f32], c: &LnCache, g: &[f32], rows: usize, d: usize, dx: &mut [f32], dg: &mut [f32], db: &mut [f32]) {
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &c.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 /= d as f32;
        m2 /= d as f32;
        for i in 0..d {
            dx[r * d + i] += c.rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

pub fn forward(cfg: &ModelConfig, lay: &ParamLayout, p: &[f32], batch: &Batch) -> Forward {
    let (bsz, t, d, hn, hd, f, v) = (
        batch.batch,
        batch.len,
        cfg.model_dim,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.ffn_dim(),
        cfg.vocab_size,
    );
    let rows = bsz * t;
    let scale = cfg.score_scale();
    let slope = cfg.recency_slope;
    let te = &p[lay.tok_emb.clone()];
    let pe = &p[lay.pos_emb.clone()];
    let mut x = vec![0.0f32; rows * d];
    for r in 0..rows {
        let tok = batch.inputs[r] as usize;
        let pos = r % t;
        for i in 0..d {
            x[r * d + i] = te[tok * d + i] + pe[pos * d + i];
        }
    }
    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut tmp = vec![0.0f32; rows * d];
    for lo in &lay.layers {
        let mut h1 = vec![0.0; rows * d];
        let ln1 = ln_forward(&x, &p[lo.ln1_g.clone()], &p[lo.ln1_b.clone()], rows, d, &mut h1);
        let mut qkv = vec![0.0; rows * 3 * d];
        affine(&h1, &p[lo.qkv_w.clone()], &p[lo.qkv_b.clone()], rows, d, 3 * d, &mut qkv);
        let mut qk_norms = Vec::new();
        if cfg.qk_norm_scale > 0.0 {
            qk_norms.reserve(rows * 2 * hn);
            for r in 0..rows {
                for part in qkv[r * 3 * d..r * 3 * d + 2 * d].chunks_mut(hd) {
                    qk_norms.push(unit_normalize(part));
                }
            }
        }
        let mut probs = vec![0.0; bsz * hn * t * t];
        let mut att = vec![0.0; rows * d];
        for b in 0..bsz {
            let base = b * t * 3 * d;
            for h in 0..hn {
                let s = &mut probs[(b * hn + h) * t * t..(b * hn + h + 1) * t * t];
                let q = View { data: &qkv[base + h * hd..], rs: 3 * d, cs: 1 };
                let k = View { data: &qkv[base + d + h * hd..], rs: 1, cs: 3 * d };
                gemm(t, hd, t, q, k, 0.0, s, t);
                for i in 0..t {
                    let row = &mut s[i * t..(i + 1) * t];
                    let mut m = f32::NEG_INFINITY;
                    for (j, x) in row[..=i].iter_mut().enumerate() {
                        *x = *x * scale - slope * (i - j) as f32;
                        m = m.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - m).exp();
                        sum += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= sum;
                    }
                    row[i + 1..].fill(0.0);
                }
                let vv = View { data: &qkv[base + 2 * d + h * hd..], rs: 3 * d, cs: 1 };
                gemm(t, t, hd, View::rm(s, t), vv, 0.0, &mut att[b * t * d + h * hd..], d);
            }
        }
        affine(&att, &p[lo.out_w.clone()], &p[lo.out_b.clone()], rows, d, d, &mut tmp);
        for (xi, ti) in x.iter_mut().zip(&tmp) {
            *xi += ti;
        }
        let mut h2 = vec![0.0; rows * d];
        let ln2 = ln_forward(&x, &p[lo.ln2_g.clone()], &p[lo.ln2_b.clone()], rows, d, &mut h2);
        let mut f_pre = vec![0.0; rows * f];
        affine(&h2, &p[lo.fc1_w.clone()], &p[lo.fc1_b.clone()], rows, d, f, &mut f_pre);
        let f_act: Vec<f32> = f_pre.iter().map(|&z| gelu(z)).collect();
        affine(&f_act, &p[lo.fc2_w.clone()], &p[lo.fc2_b.clone()], rows, f, d, &mut tmp);
        for (xi, ti) in x.iter_mut().zip(&tmp) {
            *xi += ti;
        }
        layers.push(LayerActs { ln1, h1, qkv, qk_norms, probs, att, ln2, h2, f_pre, f_act });
    }
    let mut hf = vec![0.0; rows * d];
    let lnf = ln_forward(&x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], rows, d, &mut hf);
    let mut logits = vec![0.0; rows * v];
    affine(&hf, &p[lay.head_w.clone()], &p[lay.head_b.clone()], rows, d, v, &mut logits);
    Forward { layers, lnf, hf, logits }
}

/// Masked mean cross-entropy and, when `grad` is given, its gradient
/// accumulated into `grad` (same layout as the parameters).
pub fn loss_and_grad(cfg: &ModelConfig, lay: &ParamLayout, p: &[f32], batch: &Batch, grad: Option<&mut [f32]>) -> f32 {
    let fwd = forward(cfg, lay, p, batch);
    let (bsz, t, d, hn, hd, f, v) = (
        batch.batch,
        batch.len,
        cfg.model_dim,
        cfg.num_heads,
        cfg.head_dim(),
        cfg.ffn_dim(),
        cfg.vocab_size,
    );
    let rows = bsz * t;
    let denom: f32 = batch.mask.iter().sum::<f32>().max(1.0);
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; rows * v];
    for r in 0..rows {
        if batch.mask[r] == 0.0 {
            continue;
        }
        let lg = &fwd.logits[r * v..(r + 1) * v];
        let m = lg.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = lg.iter().map(|x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        let tgt = batch.targets[r] as usize;
        loss += (batch.mask[r] * (lse - lg[tgt])) as f64;
        let w = batch.mask[r] / denom;
        let dl = &mut dlogits[r * v..(r + 1) * v];
        for j in 0..v {
            dl[j] = w * (lg[j] - lse).exp();
        }
        dl[tgt] -= w;
    }
    let loss = (loss / denom as f64) as f32;
    let Some(grad) = grad else { return loss };

    let scale = cfg.score_scale();
    let mut dh = vec![0.0f32; rows * d];
    {
        let (dw, rest) = split2(grad, lay.head_w.clone(), lay.head_b.clone());
        affine_backward(&fwd.hf, &p[lay.head_w.clone()], &dlogits, rows, d, v, dw, rest, Some((&mut dh, 0.0)));
    }
    let mut dx = vec![0.0f32; rows * d];
    {
        let (dg, db) = split2(grad, lay.lnf_g.clone(), lay.lnf_b.clone());
        ln_backward(&dh, &fwd.lnf, &p[lay.lnf_g.clone()], rows, d, &mut dx, dg, db);
    }
    let mut dff = vec![0.0f32; rows * f];
    let mut datt = vec![0.0f32; rows * d];
    let mut dqkv = vec![0.0f32; rows * 3 * d];
    let mut ds = vec![0.0f32; t * t];
    let mut da = vec![0.0f32; t * t];
    for (l, lo) in lay.layers.iter().enumerate().rev() {
        let acts = &fwd.layers[l];
        {
            let (dw, db) = split2(grad, lo.fc2_w.clone(), lo.fc2_b.clone());
            affine_backward(&acts.f_act, &p[lo.fc2_w.clone()], &dx, rows, f, d, dw, db, Some((&mut dff, 0.0)));
        }
        for (g, &z) in dff.iter_mut().zip(&acts.f_pre) {
            *g *= gelu_grad(z);
        }
        {
            let (dw, db) = split2(grad, lo.fc1_w.clone(), lo.fc1_b.clone());
            affine_backward(&acts.h2, &p[lo.fc1_w.clone()], &dff, rows, d, f, dw, db, Some((&mut dh, 0.0)));
        }
        {
            let (dg, db) = split2(grad, lo.ln2_g.clone(), lo.ln2_b.clone());
            ln_backward(&dh, &acts.ln2, &p[lo.ln2_g.clone()], rows, d, &mut dx, dg, db);
        }
        {
            let (dw, db) = split2(grad, lo.out_w.clone(), lo.out_b.clone());
            affine_backward(&acts.att, &p[lo.out_w.clone()], &dx, rows, d, d, dw, db, Some((&mut datt, 0.0)));
        }
        for b in 0..bsz {
            let base = b * t * 3 * d;
            for h in 0..hn {
                let a = &acts.probs[(b * hn + h) * t * t..(b * hn + h + 1) * t * t];
                let d_o = View { data: &datt[b * t * d + h * hd..], rs: d, cs: 1 };
                let v_t = View { data: &acts.qkv[base + 2 * d + h * hd..], rs: 1, cs: 3 * d };
                gemm(t, hd, t, d_o, v_t, 0.0, &mut da, t);
                gemm(t, t, hd, View::tr(a, t), d_o, 0.0, &mut dqkv[base + 2 * d + h * hd..], 3 * d);
                for i in 0..t {
                    let ar = &a[i * t..(i + 1) * t];
                    let dar = &da[i * t..(i + 1) * t];
                    let dot: f32 = ar[..=i].iter().zip(&dar[..=i]).map(|(x, y)| x * y).sum();
                    let dsr = &mut ds[i * t..(i + 1) * t];
                    for j in 0..=i {
                        dsr[j] = ar[j] * (dar[j] - dot) * scale;
                    }
                    dsr[i + 1..].fill(0.0);
                }
                let k = View { data: &acts.qkv[base + d + h * hd..], rs: 3 * d, cs: 1 };
                gemm(t, t, hd, View::rm(&ds, t), k, 0.0, &mut dqkv[base + h * hd..], 3 * d);
                let q = View { data: &acts.qkv[base + h * hd..], rs: 3 * d, cs: 1 };
                gemm(t, t, hd, View::tr(&ds, t), q, 0.0, &mut dqkv[base + d + h * hd..], 3 * d);
            }
        }
        if cfg.qk_norm_scale > 0.0 {
            for r in 0..rows {
                let y = acts.qkv[r * 3 * d..r * 3 * d + 2 * d].chunks(hd);
                let dy = dqkv[r * 3 * d..r * 3 * d + 2 * d].chunks_mut(hd);
                for (k, (y, dy)) in y.zip(dy).enumerate() {
                    let n = acts.qk_norms[r * 2 * hn + k];
                    let proj: f32 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
                    for (g, yi) in dy.iter_mut().zip(y) {
                        *g = (*g - yi * proj) / n;
                    }
                }
            }
        }
        {
            let (dw, db) = split2(grad, lo.qkv_w.clone(), lo.qkv_b.clone());
            affine_backward(&acts.h1, &p[lo.qkv_w.clone()], &dqkv, rows, d, 3 * d, dw, db, Some((&mut dh, 0.0)));
        }
        {
            let (dg, db) = split2(grad, lo.ln1_g.clone(), lo.ln1_b.clone());
            ln_backward(&dh, &acts.ln1, &p[lo.ln1_g.clone()], rows, d, &mut dx, dg, db);
        }
    }
    for r in 0..rows {
        let tok = batch.inputs[r] as usize;
        let pos = r % t;
        let row = &dx[r * d..(r + 1) * d];
        let te = lay.tok_emb.start + tok * d;
        for (g, x) in grad[te..te + d].iter_mut().zip(row) {
            *g += x;
        }
        let pe = lay.pos_emb.start + pos * d;
        for (g, x) in grad[pe..pe + d].iter_mut().zip(row) {
            *g += x;
        }
    }
    loss
}

/// Two disjoint mutable windows into `grad`; `a` must precede `b`.
fn split2(grad: &mut [f32], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f32], &mut [f32]) {
    assert!(a.end <= b.start, "parameter ranges out of order");
    let (lo, hi) = grad.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Model};

    const VARIANTS: [(f32, f32); 3] = [(0.0, 0.0), (3.0, 0.0), (4.0, 0.3)];

    fn setup() -> (ModelConfig, ParamLayout, Vec<f32>, Batch) {
        setup_variant(0.0, 0.0)
    }

    fn setup_variant(qk_norm_scale: f32, recency_slope: f32) -> (ModelConfig, ParamLayout, Vec<f32>, Batch) {
        let cfg = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            vocab_size: 7,
            max_seq_len: 6,
            rng_seed: 5,
            qk_norm_scale,
            recency_slope,
        };
        let lay = ParamLayout::new(&cfg);
        let mut p = init_params(&cfg, &lay);
        for (i, x) in p.iter_mut().enumerate() {
            *x += 0.2 * ((i as f32) * 1.3).sin();
        }
        let batch = Batch {
            batch: 2,
            len: 5,
            inputs: vec![1, 2, 3, 4, 5, 6, 5, 4, 0, 0],
            targets: vec![2, 3, 4, 5, 6, 5, 4, 3, 0, 0],
            mask: vec![1., 1., 0., 1., 1., 1., 1., 1., 0., 0.],
        };
        (cfg, lay, p, batch)
    }

    #[test]
    fn batched_logits_match_incremental_decoding() {
        for (a, b) in VARIANTS {
            check_batched_matches_incremental(a, b);
        }
    }

    fn check_batched_matches_incremental(qk: f32, slope: f32) {
        let (cfg, lay, p, batch) = setup_variant(qk, slope);
        let fwd = forward(&cfg, &lay, &p, &batch);
        let model = Model::from_params(cfg.clone(), p.clone()).unwrap();
        for b in 0..2 {
            let mut cache = model.new_cache();
            for i in 0..5 {
                let (lg, tr) = model.forward_step(batch.inputs[b * 5 + i], &mut cache, None).unwrap();
                let row = &fwd.logits[(b * 5 + i) * 7..(b * 5 + i + 1) * 7];
                for (x, y) in lg.iter().zip(row) {
                    assert!((x - y).abs() < 1e-4, "{x} vs {y}");
                }
                for l in 0..2 {
                    for h in 0..2 {
                        let probs = &fwd.probs(l)[((b * 2 + h) * 5 + i) * 5..((b * 2 + h) * 5 + i + 1) * 5];
                        for (x, y) in tr.weight_row(l, h).iter().zip(probs) {
                            assert!((x - y).abs() < 1e-5);
                        }
                        assert!(probs[i + 1..].iter().all(|&w| w == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (a, b) in VARIANTS {
            check_gradient(a, b);
        }
    }

    fn check_gradient(qk: f32, slope: f32) {
        let (cfg, lay, p, batch) = setup_variant(qk, slope);
        let to64 = |p: &[f32]| loss_and_grad(&cfg, &lay, p, &batch, None) as f64;
        let mut g = vec![0.0; p.len()];
        loss_and_grad(&cfg, &lay, &p, &batch, Some(&mut g));
        let mut checked = 0;
        let mut worst = 0.0f64;
        for e in &lay.entries {
            for k in [0, e.len() / 3, e.len() - 1] {
                let i = e.offset + k;
                let h = 1e-2f32;
                let mut pp = p.clone();
                pp[i] += h;
                let up = to64(&pp);
                pp[i] -= 2.0 * h;
                let dn = to64(&pp);
                let fd = (up - dn) / (2.0 * h as f64);
                let an = g[i] as f64;
                let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-2);
                worst = worst.max(err);
                checked += 1;
            }
        }
        assert!(checked > 50);
        assert!(worst < 5e-2, "worst relative error {worst} (qk {qk}, slope {slope})");
    }

    #[test]
    fn masked_positions_do_not_contribute() {
        let (cfg, lay, p, mut batch) = setup();
        let a = loss_and_grad(&cfg, &lay, &p, &batch, None);
        batch.targets[2] = 6;
        batch.targets[8] = 3;
        let b = loss_and_grad(&cfg, &lay, &p, &batch, None);
        assert_eq!(a, b);
    }
}
