//! Glue for end-to-end runs: corpora, classifier data, evaluation and intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{GroundednessClassifier, LabeledChunk};
use crate::error::{contract, Result};
use crate::model::Model;
use crate::pipeline::{decode, DecodeConfig, DecodeMode, DecodeRun};
use crate::tasks::{exact_match, gen_kv_task, label_run, KvTaskConfig, TaskInstance, Vocabulary, EOS};
use crate::train::Corpus;

/// Seed for item `index` of a job seeded with `base`, independent of how items are scheduled.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training mixture: key-value instances whose relevant-pair count is drawn
/// uniformly from `min_pairs..=max_pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub size: usize,
    pub task: KvTaskConfig,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            min_pairs: 2,
            max_pairs: 4,
            size: 50_000,
            task: KvTaskConfig { distractor_rate: 0.5, closed_book_rate: 0.3, ..KvTaskConfig::default() },
        }
    }
}

impl CorpusSpec {
    /// Longest sequence the mixture can produce, answer and end token included.
    pub fn max_len(&self) -> usize {
        let pairs = self.max_pairs + if self.task.distractor_rate > 0.0 { self.task.distractor_pairs } else { 0 };
        pairs * (self.task.value_len + 2) + 2 + self.task.value_len + 1
    }
}

pub fn kv_instances(vocab: &Vocabulary, spec: &CorpusSpec, seed: u64) -> Result<Vec<TaskInstance>> {
    if spec.min_pairs > spec.max_pairs {
        return Err(contract(format!("pair range {}..={} is empty", spec.min_pairs, spec.max_pairs)));
    }
    let mut streams = (spec.min_pairs..=spec.max_pairs)
        .map(|n| gen_kv_task(vocab, &KvTaskConfig { num_pairs: n, ..spec.task.clone() }, derive_seed(seed, n as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.size)
        .map(|_| {
            let k = rng.random_range(0..streams.len());
            streams[k].next().expect("streams are unbounded")
        })
        .collect())
}

pub fn training_corpus(instances: &[TaskInstance]) -> Corpus {
    Corpus { sequences: instances.iter().map(|i| i.training_sequence()).collect() }
}

/// Baseline-decode every instance and label each chunk automatically.
pub fn collect_labeled_chunks(
    model: &Model,
    vocab: &Vocabulary,
    instances: &[TaskInstance],
    cfg: &DecodeConfig,
) -> Result<Vec<LabeledChunk>> {
    let cfg = DecodeConfig { mode: DecodeMode::Baseline, stop_token: Some(EOS), ..cfg.clone() };
    let mut out = Vec::new();
    for inst in instances {
        let run = decode(model, None, &cfg, &inst.prompt())?;
        let labels = label_run(vocab, &run, inst);
        for (c, l) in run.accepted().zip(labels) {
            out.push(LabeledChunk { run_id: inst.id.clone(), feature: c.feature.clone(), grounded: l.grounded });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub id: String,
    pub exact_match: bool,
    pub grounded: bool,
    pub emitted_tokens: usize,
    pub forward_tokens: usize,
    pub regenerations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub outcomes: Vec<InstanceOutcome>,
}

impl Evaluation {
    pub fn em_rate(&self) -> f64 {
        mean(self.outcomes.iter().map(|o| o.exact_match as u8 as f64))
    }

    pub fn grounded_rate(&self) -> f64 {
        mean(self.outcomes.iter().map(|o| o.grounded as u8 as f64))
    }

    pub fn forward_per_emitted(&self) -> f64 {
        let f: usize = self.outcomes.iter().map(|o| o.forward_tokens).sum();
        let e: usize = self.outcomes.iter().map(|o| o.emitted_tokens).sum();
        f as f64 / e.max(1) as f64
    }

    pub fn em_vector(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.exact_match as u8 as f64).collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn outcome(vocab: &Vocabulary, inst: &TaskInstance, run: &DecodeRun) -> InstanceOutcome {
    InstanceOutcome {
        id: inst.id.clone(),
        exact_match: exact_match(&run.emitted, &inst.gold),
        grounded: label_run(vocab, run, inst).iter().all(|l| l.grounded),
        emitted_tokens: run.emitted.len(),
        forward_tokens: run.forward_tokens,
        regenerations: run.regenerations,
    }
}

/// Decode every instance under `cfg`, with per-instance seeds derived from `cfg.seed`.
/// `on_run` sees every run, e.g. to log it.
pub fn evaluate(
    model: &Model,
    clf: Option<&GroundednessClassifier>,
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
    instances: &[TaskInstance],
    mut on_run: impl FnMut(&TaskInstance, &DecodeRun) -> Result<()>,
) -> Result<Evaluation> {
    let mut outcomes = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let c = DecodeConfig { seed: derive_seed(cfg.seed, i as u64), ..cfg.clone() };
        let run = decode(model, clf, &c, &inst.prompt())?;
        on_run(inst, &run)?;
        outcomes.push(outcome(vocab, inst, &run));
    }
    Ok(Evaluation { outcomes })
}

/// Percentile bootstrap interval for the mean of `xs`.
pub fn bootstrap_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    paired_bootstrap_ci(xs, &vec![0.0; xs.len()], resamples, level, seed)
}

/// Percentile bootstrap interval for `mean(a) - mean(b)` over paired observations.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(contract("bootstrap needs two nonempty samples of equal length"));
    }
    if resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(contract("bootstrap needs resamples > 0 and a level in (0, 1)"));
    }
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..n {
                let i = rng.random_range(0..n);
                s += a[i] - b[i];
            }
            s / n as f64
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| stats[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    #[test]
    fn mixture_respects_pair_range_and_length() {
        let v = Vocabulary::default();
        let spec = CorpusSpec { size: 500, ..CorpusSpec::default() };
        let items = kv_instances(&v, &spec, 1).unwrap();
        assert_eq!(items.len(), 500);
        let max = items.iter().map(|i| i.training_sequence().tokens.len()).max().unwrap();
        assert_eq!(max, spec.max_len());
        let closed = items.iter().filter(|i| i.closed_book).count() as f64 / 500.0;
        assert!((closed - 0.3).abs() < 0.07);
        assert_eq!(items, kv_instances(&v, &spec, 1).unwrap());
        assert!(kv_instances(&v, &CorpusSpec { min_pairs: 5, max_pairs: 4, ..spec }, 1).is_err());
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let xs: Vec<f64> = (0..200).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let m = xs.iter().sum::<f64>() / 200.0;
        let (lo, hi) = bootstrap_ci(&xs, 2000, 0.95, 1).unwrap();
        assert!(lo < m && m < hi);
        let se = (m * (1.0 - m) / 200.0).sqrt();
        assert!((hi - lo - 2.0 * 1.96 * se).abs() < 0.03, "{lo} {hi}");
        let (lo, hi) = paired_bootstrap_ci(&xs, &xs, 100, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
    }
}
