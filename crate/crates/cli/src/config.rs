//! Experiment configuration files.
//!
//! A config is a TOML document whose sections mirror the library's config
//! types. Every section and every key is optional; missing values take the
//! built-in defaults and unknown keys are rejected. Command-line flags are
//! applied last, so the precedence is flag, then file, then default.

use std::path::Path;

use game_core::classifier::{ClassWeighting, DEFAULT_L2};
use game_core::experiment::CorpusSpec;
use game_core::model::ModelConfig;
use game_core::pipeline::DecodeConfig;
use game_core::tasks::{KvTaskConfig, Vocabulary};
use game_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Training instances to baseline-decode for chunk labels.
    pub instances: usize,
    /// Fraction of those instances held out for the AUROC report.
    pub heldout_fraction: f64,
    pub l2: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            instances: 1000,
            heldout_fraction: 0.2,
            l2: DEFAULT_L2,
            class_weighting: ClassWeighting::Balanced,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Distribution of evaluation instances.
    pub task: KvTaskConfig,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            task: default_eval_task(),
            dev_size: 200,
            test_size: 500,
            seed: 2,
            bootstrap_resamples: 2000,
        }
    }
}

pub fn default_eval_task() -> KvTaskConfig {
    KvTaskConfig { num_pairs: 2, distractor_rate: 1.0, distractor_pairs: 6, query_first: true, ..KvTaskConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub classifier: ClassifierSection,
    pub eval: EvalSection,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = Vocabulary::default();
        let corpus = CorpusSpec {
            task: KvTaskConfig { distractor_rate: 0.5, distractor_pairs: 6, closed_book_rate: 0.3, ..KvTaskConfig::default() },
            size: 60_000,
            ..CorpusSpec::default()
        };
        ExperimentConfig {
            model: ModelConfig {
                vocab_size: vocab.size(),
                max_seq_len: corpus.max_len() + 8,
                qk_norm_scale: 3.2,
                recency_slope: 0.16,
                ..ModelConfig::default()
            },
            train: TrainConfig { steps: 3000, batch_size: 32, ..TrainConfig::default() },
            vocab,
            corpus,
            classifier: ClassifierSection::default(),
            eval: EvalSection::default(),
            decode: DecodeConfig { stop_token: Some(game_core::tasks::EOS), ..DecodeConfig::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    /// Parse a config document. Keys it sets override the experiment defaults
    /// one by one, so `[model]` with one key keeps the other model defaults.
    /// Unless set explicitly, `model.vocab_size` follows the vocabulary and
    /// `model.max_seq_len` follows the corpus.
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str::<ExperimentConfig>(text)?;
        let user: toml::Table = toml::from_str(text)?;
        let mut merged: toml::Table = toml::from_str(&ExperimentConfig::default().to_toml())?;
        merge(&mut merged, user.clone());
        let mut cfg: ExperimentConfig = merged.try_into()?;
        let model = user.get("model").and_then(|v| v.as_table());
        let has = |k: &str| model.is_some_and(|t| t.contains_key(k));
        if !has("vocab_size") {
            cfg.model.vocab_size = cfg.vocab.size();
        }
        if !has("max_seq_len") {
            cfg.model.max_seq_len = cfg.corpus.max_len() + 8;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.model.vocab_size != self.vocab.size() {
            return Err(UsageError(format!(
                "model.vocab_size {} does not match the vocabulary size {}",
                self.model.vocab_size,
                self.vocab.size()
            ))
            .into());
        }
        if self.model.max_seq_len < self.corpus.max_len() {
            return Err(UsageError(format!(
                "model.max_seq_len {} is shorter than the longest training sequence {}",
                self.model.max_seq_len,
                self.corpus.max_len()
            ))
            .into());
        }
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if !(0.0..1.0).contains(&self.classifier.heldout_fraction) {
            return Err(UsageError("classifier.heldout_fraction must lie in [0, 1)".into()).into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_sections_keep_remaining_defaults() {
        let c = ExperimentConfig::parse("[model]\nnum_layers = 2\n[train]\nlearning_rate = 0.01\n[decode]\neta = 0.5\n").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(c.model.num_layers, 2);
        assert_eq!(c.model.num_heads, d.model.num_heads);
        assert_eq!(c.model.vocab_size, d.model.vocab_size);
        assert_eq!(c.model.qk_norm_scale, d.model.qk_norm_scale);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.steps, d.train.steps);
        assert_eq!(c.decode.eta, 0.5);
        assert_eq!(c.decode.stop_token, d.decode.stop_token);
        assert_eq!(c.decode.chunk_size, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[decode]\netta = 1.0\n").is_err());
        assert!(ExperimentConfig::parse("[modle]\nnum_layers = 2\n").is_err());
        assert!(ExperimentConfig::parse("seed = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn inconsistent_shapes_fail_validation() {
        let c = ExperimentConfig::parse("[model]\nvocab_size = 10\n").unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::parse("[vocab]\nnum_keys = 30\n").unwrap();
        assert_eq!(c.model.vocab_size, c.vocab.size());
        c.validate().unwrap();
        let c = ExperimentConfig::parse("[model]\nmax_seq_len = 10\n").unwrap();
        assert!(c.validate().is_err());
    }
}
