//! Deterministic single-threaded training of the toy transformer.

pub mod backprop;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backprop::Batch;

use crate::error::{contract, GameError, Result};
use crate::model::{Model, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables intermediate saves).
    pub checkpoint_interval: usize,
    pub warmup_steps: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            steps: 1500,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_interval: 0,
            warmup_steps: 100,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(contract("learning rate must be positive"));
        }
        if self.steps == 0 {
            return Err(contract("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = ((step + 1) as f32 / self.warmup_steps.max(1) as f32).min(1.0);
        let progress = step as f32 / self.steps as f32;
        self.learning_rate * warm * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
    }
}

/// One training sequence; `loss_mask[i]` says whether predicting `tokens[i + 1]`
/// from the prefix `tokens[..=i]` counts toward the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainSequence {
    /// Loss on every position whose target lies at or after `answer_start`.
    pub fn with_answer(tokens: Vec<u32>, answer_start: usize) -> Self {
        let n = tokens.len().saturating_sub(1);
        let loss_mask = (0..n).map(|i| i + 1 >= answer_start).collect();
        TrainSequence { tokens, loss_mask }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sequences: Vec<TrainSequence>,
}

impl Corpus {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(contract("corpus is empty"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.tokens.len() < 2 || s.loss_mask.len() != s.tokens.len() - 1 {
                return Err(contract(format!("sequence {i} is malformed")));
            }
            if s.tokens.len() > cfg.max_seq_len {
                return Err(contract(format!(
                    "sequence {i} has length {} > max_seq_len {}",
                    s.tokens.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(contract(format!("sequence {i} holds token {t} outside the vocabulary")));
            }
        }
        Ok(())
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let len = idx.iter().map(|&i| self.sequences[i].tokens.len() - 1).max().unwrap_or(1);
        let mut b = Batch {
            batch: idx.len(),
            len,
            inputs: vec![0; idx.len() * len],
            targets: vec![0; idx.len() * len],
            mask: vec![0.0; idx.len() * len],
        };
        for (r, &i) in idx.iter().enumerate() {
            let s = &self.sequences[i];
            for j in 0..s.tokens.len() - 1 {
                b.inputs[r * len + j] = s.tokens[j];
                b.targets[r * len + j] = s.tokens[j + 1];
                b.mask[r * len + j] = if s.loss_mask[j] { 1.0 } else { 0.0 };
            }
        }
        b
    }
}

enum OptState {
    Sgd,
    Momentum { vel: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, t: i32 },
}

struct Optimizer {
    state: OptState,
    decay_mask: Vec<bool>,
    weight_decay: f32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, model: &Model, weight_decay: f32) -> Self {
        let n = model.params.len();
        let mut decay_mask = vec![false; n];
        for e in &model.layout.entries {
            if model.layout.is_matrix(&e.name) {
                decay_mask[e.range()].fill(true);
            }
        }
        let state = match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Momentum => OptState::Momentum { vel: vec![0.0; n] },
            OptimizerKind::Adam => OptState::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        };
        Optimizer { state, decay_mask, weight_decay }
    }

    fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        if self.weight_decay > 0.0 {
            for (p, &dm) in params.iter_mut().zip(&self.decay_mask) {
                if dm {
                    *p -= lr * self.weight_decay * *p;
                }
            }
        }
        match &mut self.state {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Momentum { vel } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = 0.9 * *v + g;
                    *p -= lr * *v;
                }
            }
            OptState::Adam { m, v, t } => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// `(step, loss)` for every optimizer step.
    pub losses: Vec<(usize, f32)>,
}

impl TrainOutcome {
    /// Exponential moving average of the loss curve with factor `alpha`.
    pub fn smoothed(&self, alpha: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = None;
        for &(_, l) in &self.losses {
            let s = match acc {
                None => l,
                Some(a) => alpha * a + (1.0 - alpha) * l,
            };
            acc = Some(s);
            out.push(s);
        }
        out
    }
}

/// Train a fresh model. `on_checkpoint` is called with `(step, model)` every
/// `checkpoint_interval` steps.
pub fn train(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone())?;
    corpus.validate(model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &model, cfg.weight_decay);
    let mut grad = vec![0.0f32; model.params.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let n = corpus.sequences.len();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let batch = corpus.batch(&idx);
        grad.fill(0.0);
        let loss = backprop::loss_and_grad(&model.config, &model.layout, &model.params, &batch, Some(&mut grad));
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GameError::Divergence { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt() as f32;
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        opt.step(&mut model.params, &grad, cfg.lr_at(step));
        losses.push((step, loss));
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.steps {
            let snapshot = Model::from_params(model.config.clone(), model.params.clone())?;
            on_checkpoint(step + 1, &snapshot)?;
        }
    }
    let model = Model::from_params(model.config.clone(), model.params)?;
    Ok(TrainOutcome { model, losses })
}

/// Mean masked loss over `corpus` in fixed-order batches.
pub fn eval_loss(model: &Model, corpus: &Corpus, batch_size: usize) -> Result<f32> {
    corpus.validate(&model.config)?;
    let mut total = 0.0f64;
    let mut count = 0.0f64;
    let idx: Vec<usize> = (0..corpus.sequences.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = corpus.batch(chunk);
        let m: f32 = b.mask.iter().sum();
        if m > 0.0 {
            total += backprop::loss_and_grad(&model.config, &model.layout, &model.params, &b, None) as f64 * m as f64;
            count += m as f64;
        }
    }
    if count == 0.0 {
        return Err(contract("no scored positions"));
    }
    Ok((total / count) as f32)
}

/// Fraction of scored positions where the argmax prediction equals the target.
pub fn eval_next_token_accuracy(model: &Model, corpus: &Corpus) -> Result<f64> {
    corpus.validate(&model.config)?;
    let v = model.config.vocab_size;
    let (mut hit, mut total) = (0usize, 0usize);
    let idx: Vec<usize> = (0..corpus.sequences.len()).collect();
    for chunk in idx.chunks(64) {
        let b = corpus.batch(chunk);
        let fwd = backprop::forward(&model.config, &model.layout, &model.params, &b);
        for r in 0..b.batch * b.len {
            if b.mask[r] > 0.0 {
                total += 1;
                if crate::model::argmax(&fwd.logits[r * v..(r + 1) * v]) == b.targets[r] as usize {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(contract("held-out set has no scored positions"));
    }
    Ok(hit as f64 / total as f64)
}

/// Loss curve as `step,loss` rows with a header.
pub fn write_loss_curve(mut w: impl Write, losses: &[(usize, f32)]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (s, l) in losses {
        writeln!(w, "{s},{l}")?;
    }
    Ok(())
}
