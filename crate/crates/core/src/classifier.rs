//! Logistic groundedness classifier over chunk features.
//!
//! `c = sigmoid(w . v + b)` is the probability that a chunk is grounded; a chunk
//! is accepted when `c >= threshold`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, GameError, Result};
use crate::features::ChunkFeature;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_L2: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    None,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledChunk {
    pub run_id: String,
    pub feature: ChunkFeature,
    pub grounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Strength `alpha` of the penalty `(alpha / 2) * |w|^2` added to the
    /// weighted mean negative log-likelihood. The intercept is not penalized.
    pub l2: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
    pub max_iter: usize,
    pub dataset_hash: String,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            l2: DEFAULT_L2,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
            max_iter: 100,
            dataset_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub dataset_hash: String,
    pub seed: u64,
    pub l2: f64,
    pub class_weighting: ClassWeighting,
    pub samples: usize,
    pub positives: usize,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundednessClassifier {
    pub format_version: u32,
    pub feature_order: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub threshold: f64,
    pub epsilon: f64,
    pub metadata: Option<TrainingMetadata>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GroundednessClassifier {
    pub fn new(num_layers: usize, num_heads: usize, weights: Vec<f64>, intercept: f64) -> Result<Self> {
        let c = GroundednessClassifier {
            format_version: FORMAT_VERSION,
            feature_order: crate::features::feature_order_tag(num_layers, num_heads),
            num_layers,
            num_heads,
            weights,
            intercept,
            threshold: DEFAULT_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
            metadata: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(GameError::Data(format!(
                "classifier format version {} unsupported, expected {FORMAT_VERSION}",
                self.format_version
            )));
        }
        if self.feature_order != crate::features::feature_order_tag(self.num_layers, self.num_heads) {
            return Err(contract(format!("feature order tag {} does not match L/H", self.feature_order)));
        }
        if self.weights.len() != self.num_layers * self.num_heads {
            return Err(contract(format!(
                "{} weights for a {}x{} feature order",
                self.weights.len(),
                self.num_layers,
                self.num_heads
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(contract(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.epsilon > 0.0) {
            return Err(contract("epsilon must be positive"));
        }
        if !self.intercept.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(GameError::Numeric("non-finite classifier parameters".into()));
        }
        Ok(())
    }

    pub fn ensure_order(&self, tag: &str) -> Result<()> {
        if tag != self.feature_order {
            return Err(contract(format!("feature order {tag} does not match classifier order {}", self.feature_order)));
        }
        Ok(())
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.weights.len() {
            return Err(contract(format!("feature width {} != classifier width {}", v.len(), self.weights.len())));
        }
        Ok(())
    }

    pub fn logit(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        Ok(self.weights.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + self.intercept)
    }

    /// Groundedness probability of a chunk feature.
    pub fn score(&self, v: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(v)?))
    }

    /// `dc/dv = c (1 - c) w`.
    pub fn score_gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        let c = self.score(v)?;
        Ok(self.weights.iter().map(|w| c * (1.0 - c) * w).collect())
    }

    pub fn accepts(&self, c: f64) -> bool {
        c >= self.threshold
    }

    pub fn auroc(&self, data: &[LabeledChunk]) -> Result<f64> {
        let scores = data.iter().map(|d| self.score(&d.feature.mean)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<bool> = data.iter().map(|d| d.grounded).collect();
        auroc(&scores, &labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        crate::checkpoint::atomic_write(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: GroundednessClassifier =
            serde_json::from_str(&text).map_err(|e| GameError::Data(format!("bad classifier file: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Rank-based area under the ROC curve; tied scores count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(contract("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GameError::Metric("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GameError::Numeric("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Solve `a x = b` for a symmetric positive definite `a` (row-major `n x n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

struct Problem<'a> {
    x: Vec<&'a [f64]>,
    y: Vec<f64>,
    s: Vec<f64>,
    total: f64,
    l2: f64,
    p: usize,
}

impl Problem<'_> {
    fn objective(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(self.p);
        let mut nll = 0.0;
        for ((x, &y), &s) in self.x.iter().zip(&self.y).zip(&self.s) {
            let z: f64 = w.iter().zip(x.iter()).map(|(a, c)| a * c).sum::<f64>() + b[0];
            let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            nll += s * (softplus - y * z);
        }
        nll / self.total + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad_hess(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.p + 1;
        let (w, b) = theta.split_at(self.p);
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        let mut xt = vec![0.0; n];
        for ((x, &y), &s) in self.x.iter().zip(&self.y).zip(&self.s) {
            xt[..self.p].copy_from_slice(x);
            xt[self.p] = 1.0;
            let z: f64 = w.iter().zip(x.iter()).map(|(a, c)| a * c).sum::<f64>() + b[0];
            let c = sigmoid(z);
            let r = s * (c - y) / self.total;
            let q = s * c * (1.0 - c) / self.total;
            for i in 0..n {
                g[i] += r * xt[i];
                for j in 0..=i {
                    h[i * n + j] += q * xt[i] * xt[j];
                }
            }
        }
        for i in 0..self.p {
            g[i] += self.l2 * w[i];
            h[i * n + i] += self.l2;
        }
        for i in 0..n {
            for j in 0..i {
                h[j * n + i] = h[i * n + j];
            }
        }
        (g, h)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton iterations on the weighted, L2-penalized mean log-loss until
/// the gradient norm is at most 1e-6.
pub fn fit(data: &[LabeledChunk], num_layers: usize, num_heads: usize, opts: &FitOptions) -> Result<GroundednessClassifier> {
    let p = num_layers * num_heads;
    if data.is_empty() {
        return Err(GameError::Training("empty dataset".into()));
    }
    if let Some(bad) = data.iter().find(|d| d.feature.mean.len() != p) {
        return Err(contract(format!(
            "feature of width {} in run {} does not match {num_layers}x{num_heads}",
            bad.feature.mean.len(),
            bad.run_id
        )));
    }
    if opts.l2 < 0.0 || !opts.l2.is_finite() {
        return Err(contract("regularization strength must be nonnegative"));
    }
    let positives = data.iter().filter(|d| d.grounded).count();
    let negatives = data.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GameError::Training("dataset contains a single class".into()));
    }
    let (wp, wn) = match opts.class_weighting {
        ClassWeighting::None => (1.0, 1.0),
        ClassWeighting::Balanced => {
            let n = data.len() as f64;
            (n / (2.0 * positives as f64), n / (2.0 * negatives as f64))
        }
    };
    let prob = Problem {
        x: data.iter().map(|d| d.feature.mean.as_slice()).collect(),
        y: data.iter().map(|d| if d.grounded { 1.0 } else { 0.0 }).collect(),
        s: data.iter().map(|d| if d.grounded { wp } else { wn }).collect(),
        total: data.iter().map(|d| if d.grounded { wp } else { wn }).sum(),
        l2: opts.l2,
        p,
    };
    let mut theta = vec![0.0; p + 1];
    let mut f = prob.objective(&theta);
    let mut iterations = 0;
    let mut gnorm;
    loop {
        let (g, mut h) = prob.grad_hess(&theta);
        gnorm = norm(&g);
        if gnorm <= GRAD_TOL {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(GameError::Training(format!(
                "no convergence after {iterations} Newton iterations (gradient norm {gnorm:e})"
            )));
        }
        let n = p + 1;
        let mut ridge = 0.0;
        let step = loop {
            if let Some(s) = cholesky_solve(&h, &g, n) {
                break s;
            }
            let add = if ridge == 0.0 { 1e-10 } else { ridge * 9.0 };
            for i in 0..n {
                h[i * n + i] += add;
            }
            ridge += add;
        };
        let mut t = 1.0;
        let slope: f64 = -g.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let fc = prob.objective(&cand);
            if fc <= f + 1e-4 * t * slope || (fc - f).abs() <= 1e-15 * f.abs().max(1.0) {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            let (g, _) = prob.grad_hess(&theta);
            gnorm = norm(&g);
            if gnorm <= GRAD_TOL * 10.0 {
                break;
            }
            return Err(GameError::Training(format!("line search failed (gradient norm {gnorm:e})")));
        }
    }
    let intercept = theta[p];
    theta.truncate(p);
    let mut c = GroundednessClassifier::new(num_layers, num_heads, theta, intercept)?;
    c.metadata = Some(TrainingMetadata {
        dataset_hash: opts.dataset_hash.clone(),
        seed: opts.seed,
        l2: opts.l2,
        class_weighting: opts.class_weighting,
        samples: data.len(),
        positives,
        iterations,
        final_grad_norm: gnorm,
    });
    Ok(c)
}
