//! Chunked detect-and-regenerate decoding and its baselines.
//!
//! Decoding keeps one token "pending": the cache holds every token except the
//! most recent one, which is fed at the next step. A chunk therefore starts by
//! feeding the pending token, and rolling back to a chunk start re-feeds it.
//! For the first chunk the pending token is the last prompt token, so edits
//! reach the query row that predicts the first generated token.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::GroundednessClassifier;
use crate::edit::{attention_edit, build_bias, edit_direction, BiasKind, EditDirection};
use crate::error::{contract, Result};
use crate::features::{chunk_feature, feature_order_tag, lookback_vector, ChunkFeature};
use crate::model::{argmax, KvCache, Model, SequenceLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Baseline,
    Game,
    BestOfK,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(DecodeMode::Baseline),
            "game" => Ok(DecodeMode::Game),
            "best-of-k" => Ok(DecodeMode::BestOfK),
            other => Err(format!("unknown mode {other:?} (expected baseline, game or best-of-k)")),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Baseline => "baseline",
            DecodeMode::Game => "game",
            DecodeMode::BestOfK => "best-of-k",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub chunk_size: usize,
    pub max_new_tokens: usize,
    pub eta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_attempts: usize,
    pub bias_kind: BiasKind,
    pub mode: DecodeMode,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Force every head's direction to +1 instead of the gradient sign.
    pub no_direction: bool,
    pub stop_token: Option<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            chunk_size: 8,
            max_new_tokens: 256,
            eta: 1.0,
            lambda: crate::classifier::DEFAULT_THRESHOLD,
            epsilon: crate::classifier::DEFAULT_EPSILON,
            max_attempts: 4,
            bias_kind: BiasKind::Decay,
            mode: DecodeMode::Game,
            k: 8,
            temperature: 1.0,
            seed: 0,
            no_direction: false,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(contract("chunk size must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(contract("max attempts must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(contract("epsilon must be positive"));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(contract("eta must be a nonnegative finite number"));
        }
        if self.mode == DecodeMode::BestOfK && (self.k == 0 || !(self.temperature > 0.0)) {
            return Err(contract("best-of-k needs k >= 1 and a positive temperature"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub chunk_index: usize,
    pub attempt: usize,
    pub tokens: Vec<u32>,
    pub feature: ChunkFeature,
    pub score: f64,
    pub accepted: bool,
    pub delta: Option<Vec<i8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRun {
    pub prompt: Vec<u32>,
    pub emitted: Vec<u32>,
    pub chunks: Vec<ChunkRecord>,
    pub forward_tokens: usize,
    pub regenerations: usize,
    pub capacity_limited: bool,
    pub wall_time_ms: f64,
}

impl DecodeRun {
    pub fn accepted(&self) -> impl Iterator<Item = &ChunkRecord> {
        self.chunks.iter().filter(|c| c.accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tokens_generated: usize,
    pub forward_tokens: usize,
    pub regenerations: usize,
    pub mean_accepted_score: f64,
    pub mean_chunk_lookback: f64,
    pub wall_time_ms: f64,
}

pub fn run_metrics(run: &DecodeRun) -> RunMetrics {
    let acc: Vec<&ChunkRecord> = run.accepted().collect();
    let n = acc.len().max(1) as f64;
    let mean_lr = |c: &ChunkRecord| {
        if c.feature.mean.is_empty() {
            0.0
        } else {
            c.feature.mean.iter().sum::<f64>() / c.feature.mean.len() as f64
        }
    };
    RunMetrics {
        tokens_generated: run.emitted.len(),
        forward_tokens: run.forward_tokens,
        regenerations: run.regenerations,
        mean_accepted_score: acc.iter().map(|c| c.score).sum::<f64>() / n,
        mean_chunk_lookback: acc.iter().map(|c| mean_lr(c)).sum::<f64>() / n,
        wall_time_ms: run.wall_time_ms,
    }
}

/// How each token of a chunk is chosen.
enum Chooser<'a> {
    Greedy,
    Sample { rng: &'a mut ChaCha8Rng, temperature: f64 },
}

struct Attempt {
    tokens: Vec<u32>,
    feature: ChunkFeature,
    pending: u32,
}

struct Decoder<'a> {
    model: &'a Model,
    clf: Option<&'a GroundednessClassifier>,
    cfg: &'a DecodeConfig,
    context_len: usize,
}

impl Decoder<'_> {
    fn chunk(
        &self,
        cache: &mut KvCache,
        mut pending: u32,
        len: usize,
        index: usize,
        offset: usize,
        edit: Option<&EditDirection>,
        chooser: &mut Chooser,
    ) -> Result<Attempt> {
        let mut tokens = Vec::with_capacity(len);
        let mut vectors = Vec::with_capacity(len);
        for _ in 0..len {
            let layout = SequenceLayout::for_row(self.context_len, cache.position() + 1)?;
            let injected = edit.map(|d| attention_edit(d, self.cfg.eta, &build_bias(self.cfg.bias_kind, &layout)));
            let (logits, trace) = self.model.forward_step(pending, cache, injected.as_ref())?;
            vectors.push(lookback_vector(&trace, &layout)?);
            let tok = match chooser {
                Chooser::Greedy => argmax(&logits) as u32,
                Chooser::Sample { rng, temperature } => sample(&logits, *temperature, rng)?,
            };
            tokens.push(tok);
            pending = tok;
            if Some(tok) == self.cfg.stop_token {
                break;
            }
        }
        let feature = chunk_feature(index, (offset, offset + tokens.len()), &vectors)?;
        Ok(Attempt { tokens, feature, pending })
    }

    fn score(&self, f: &ChunkFeature) -> Result<f64> {
        match self.clf {
            Some(c) => c.score(&f.mean),
            None => Ok(f64::NAN),
        }
    }

    fn direction(&self, f: &ChunkFeature) -> Result<EditDirection> {
        let clf = self.clf.expect("game mode has a classifier");
        if self.cfg.no_direction {
            return Ok(EditDirection::all_positive(clf.weights.len()));
        }
        let mut c = clf.clone();
        c.epsilon = self.cfg.epsilon;
        edit_direction(&c, &f.mean)
    }

    fn run(&self, prompt: &[u32]) -> Result<(DecodeRun, KvCache)> {
        let start = Instant::now();
        self.cfg.validate()?;
        if prompt.is_empty() {
            return Err(contract("empty prompt"));
        }
        if let Some(c) = self.clf {
            c.ensure_order(&feature_order_tag(self.model.config.num_layers, self.model.config.num_heads))?;
        }
        let room = self.model.config.max_seq_len.saturating_sub(prompt.len());
        let budget = self.cfg.max_new_tokens.min(room);
        let mut cache = self.model.new_cache();
        self.model.prefill(&prompt[..prompt.len() - 1], &mut cache)?;
        let mut pending = prompt[prompt.len() - 1];
        let mut run = DecodeRun {
            prompt: prompt.to_vec(),
            emitted: Vec::new(),
            chunks: Vec::new(),
            forward_tokens: 0,
            regenerations: 0,
            capacity_limited: false,
            wall_time_ms: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut index = 0;
        while run.emitted.len() < budget {
            let len = self.cfg.chunk_size.min(budget - run.emitted.len());
            let offset = run.emitted.len();
            let snap = cache.snapshot();
            let first_record = run.chunks.len();
            let candidates = match self.cfg.mode {
                DecodeMode::BestOfK => self.cfg.k,
                _ => 1,
            };
            let mut best: Option<(f64, usize, Attempt, KvCache)> = None;
            let mut last_feature: Option<ChunkFeature> = None;
            let mut attempt = 0;
            loop {
                let delta = if attempt == 0 || self.cfg.mode != DecodeMode::Game {
                    None
                } else {
                    Some(self.direction(last_feature.as_ref().expect("previous attempt"))?)
                };
                if attempt > 0 {
                    cache.restore(&snap)?;
                }
                let mut chooser = if self.cfg.mode == DecodeMode::BestOfK {
                    Chooser::Sample { rng: &mut rng, temperature: self.cfg.temperature }
                } else {
                    Chooser::Greedy
                };
                let a = self.chunk(&mut cache, pending, len, index, offset, delta.as_ref(), &mut chooser)?;
                run.forward_tokens += a.tokens.len();
                let c = self.score(&a.feature)?;
                run.chunks.push(ChunkRecord {
                    chunk_index: index,
                    attempt,
                    tokens: a.tokens.clone(),
                    feature: a.feature.clone(),
                    score: c,
                    accepted: false,
                    delta: delta.map(|d| d.delta),
                });
                last_feature = Some(a.feature.clone());
                let better = match &best {
                    None => true,
                    Some((bc, ..)) => c > *bc,
                };
                if better {
                    best = Some((c, attempt, a, cache.clone()));
                }
                attempt += 1;
                let done = match self.cfg.mode {
                    DecodeMode::Baseline => true,
                    DecodeMode::BestOfK => attempt >= candidates,
                    DecodeMode::Game => {
                        let bc = best.as_ref().map(|b| b.0).unwrap_or(f64::NAN);
                        bc >= self.cfg.lambda || attempt >= self.cfg.max_attempts
                    }
                };
                if done {
                    break;
                }
            }
            let (_, best_attempt, a, best_cache) = best.expect("at least one attempt");
            if self.cfg.mode == DecodeMode::Game {
                run.regenerations += attempt - 1;
            }
            run.chunks[first_record + best_attempt].accepted = true;
            cache = best_cache;
            pending = a.pending;
            let stopped = self.cfg.stop_token.is_some_and(|s| a.tokens.contains(&s));
            run.emitted.extend(a.tokens);
            index += 1;
            if stopped {
                break;
            }
        }
        run.capacity_limited = budget < self.cfg.max_new_tokens
            && run.emitted.len() == budget
            && !self.cfg.stop_token.is_some_and(|s| run.emitted.last() == Some(&s));
        run.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((run, cache))
    }
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> Result<u32> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = logits.iter().map(|&z| ((z as f64 - m) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| crate::GameError::Numeric(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng) as u32)
}

/// Greedy chunked decoding that scores chunks (when a classifier is given) but never edits.
pub fn baseline_decode(model: &Model, clf: Option<&GroundednessClassifier>, cfg: &DecodeConfig, prompt: &[u32]) -> Result<DecodeRun> {
    let cfg = DecodeConfig { mode: DecodeMode::Baseline, ..cfg.clone() };
    Ok(Decoder { model, clf, cfg: &cfg, context_len: prompt.len() }.run(prompt)?.0)
}

/// Chunked decoding that regenerates low-scoring chunks with guided attention edits.
pub fn game_decode(model: &Model, clf: &GroundednessClassifier, cfg: &DecodeConfig, prompt: &[u32]) -> Result<DecodeRun> {
    if cfg.mode != DecodeMode::Game {
        return Err(contract(format!("game_decode called with mode {}", cfg.mode)));
    }
    Ok(Decoder { model, clf: Some(clf), cfg, context_len: prompt.len() }.run(prompt)?.0)
}

/// Per chunk, sample `k` candidates and keep the highest-scoring one.
pub fn best_of_k_decode(model: &Model, clf: &GroundednessClassifier, cfg: &DecodeConfig, prompt: &[u32]) -> Result<DecodeRun> {
    if cfg.mode != DecodeMode::BestOfK {
        return Err(contract(format!("best_of_k_decode called with mode {}", cfg.mode)));
    }
    Ok(Decoder { model, clf: Some(clf), cfg, context_len: prompt.len() }.run(prompt)?.0)
}

/// Like [`decode`], also returning the cache the run ended with.
pub fn decode_with_cache(
    model: &Model,
    clf: Option<&GroundednessClassifier>,
    cfg: &DecodeConfig,
    prompt: &[u32],
) -> Result<(DecodeRun, KvCache)> {
    if cfg.mode != DecodeMode::Baseline && clf.is_none() {
        return Err(contract(format!("{} mode needs a classifier", cfg.mode)));
    }
    Decoder { model, clf, cfg, context_len: prompt.len() }.run(prompt)
}

/// Dispatch on `cfg.mode`.
pub fn decode(model: &Model, clf: Option<&GroundednessClassifier>, cfg: &DecodeConfig, prompt: &[u32]) -> Result<DecodeRun> {
    match cfg.mode {
        DecodeMode::Baseline => baseline_decode(model, clf, cfg, prompt),
        DecodeMode::Game => game_decode(model, clf.ok_or_else(|| contract("game mode needs a classifier"))?, cfg, prompt),
        DecodeMode::BestOfK => best_of_k_decode(model, clf.ok_or_else(|| contract("best-of-k needs a classifier"))?, cfg, prompt),
    }
}

/// Re-encode `prompt` followed by the accepted chunks, each with the edit it
/// was generated under, and return the resulting cache. A run whose cache
/// bookkeeping is sound ends in exactly this state.
pub fn replay_cache(model: &Model, cfg: &DecodeConfig, run: &DecodeRun) -> Result<KvCache> {
    let n_c = run.prompt.len();
    let mut cache = model.new_cache();
    model.prefill(&run.prompt[..n_c - 1], &mut cache)?;
    let mut pending = run.prompt[n_c - 1];
    for rec in run.accepted() {
        let dir = rec.delta.as_ref().map(|d| EditDirection { delta: d.clone(), source_score: f64::NAN, epsilon: cfg.epsilon });
        for &tok in &rec.tokens {
            let layout = SequenceLayout::for_row(n_c, cache.position() + 1)?;
            let injected = dir.as_ref().map(|d| attention_edit(d, cfg.eta, &build_bias(cfg.bias_kind, &layout)));
            model.forward_step(pending, &mut cache, injected.as_ref())?;
            pending = tok;
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        let m = Model::new(ModelConfig { num_layers: 2, num_heads: 2, model_dim: 16, vocab_size: 12, max_seq_len: 40, rng_seed: 3, ..ModelConfig::default() }).unwrap();
        let params: Vec<f32> = m.params.iter().enumerate().map(|(i, p)| p + 0.4 * ((i as f32) * 0.37).sin()).collect();
        Model::from_params(m.config.clone(), params).unwrap()
    }

    fn clf(bias: f64) -> GroundednessClassifier {
        let w = vec![3.0, -2.0, 1.5, -1.0];
        GroundednessClassifier::new(2, 2, w, bias).unwrap()
    }

    fn cfg(mode: DecodeMode) -> DecodeConfig {
        DecodeConfig { mode, max_new_tokens: 20, chunk_size: 4, eta: 1.5, ..DecodeConfig::default() }
    }

    const PROMPT: [u32; 6] = [1, 5, 7, 2, 9, 3];

    #[test]
    fn baseline_equals_greedy_decode() {
        let m = model();
        let run = baseline_decode(&m, Some(&clf(0.0)), &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let (toks, _) = m.greedy_decode(&PROMPT, 20, None, None).unwrap();
        assert_eq!(run.emitted, toks);
        assert_eq!(run.chunks.len(), 5);
        assert!(run.chunks.iter().all(|c| c.accepted && c.score.is_finite()));
        assert_eq!(run.regenerations, 0);
        assert_eq!(run.forward_tokens, 20);
        let other = baseline_decode(&m, None, &DecodeConfig { chunk_size: 7, ..cfg(DecodeMode::Baseline) }, &PROMPT).unwrap();
        assert_eq!(other.emitted, toks);
    }

    #[test]
    fn threshold_zero_is_baseline() {
        let m = model();
        let base = baseline_decode(&m, None, &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let run = game_decode(&m, &clf(-5.0), &DecodeConfig { lambda: 0.0, ..cfg(DecodeMode::Game) }, &PROMPT).unwrap();
        assert_eq!(run.emitted, base.emitted);
        assert_eq!(run.regenerations, 0);
    }

    #[test]
    fn zero_intensity_is_baseline_with_full_attempts() {
        let m = model();
        let base = baseline_decode(&m, None, &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let run = game_decode(&m, &clf(-50.0), &DecodeConfig { eta: 0.0, ..cfg(DecodeMode::Game) }, &PROMPT).unwrap();
        assert_eq!(run.emitted, base.emitted);
        assert_eq!(run.chunks.len(), 5 * 4);
        for c in run.chunks.chunks(4) {
            assert!(c.iter().all(|r| r.tokens == c[0].tokens));
            assert!(c[0].accepted);
        }
        assert_eq!(run.regenerations, 15);
    }

    #[test]
    fn single_attempt_is_baseline() {
        let m = model();
        let base = baseline_decode(&m, None, &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let run = game_decode(&m, &clf(-50.0), &DecodeConfig { max_attempts: 1, ..cfg(DecodeMode::Game) }, &PROMPT).unwrap();
        assert_eq!(run.emitted, base.emitted);
        assert!(run.chunks.iter().all(|c| c.score.is_finite()));
    }

    #[test]
    fn accepted_attempt_has_max_score_and_bookkeeping_holds() {
        let m = model();
        let c = cfg(DecodeMode::Game);
        let run = game_decode(&m, &clf(-1.0), &c, &PROMPT).unwrap();
        let mut emitted = Vec::new();
        let mut rejected_len = 0;
        for idx in 0..=run.chunks.iter().map(|r| r.chunk_index).max().unwrap() {
            let recs: Vec<_> = run.chunks.iter().filter(|r| r.chunk_index == idx).collect();
            let acc: Vec<_> = recs.iter().filter(|r| r.accepted).collect();
            assert_eq!(acc.len(), 1);
            let max = recs.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(acc[0].score, max);
            let first_max = recs.iter().position(|r| r.score == max).unwrap();
            assert_eq!(recs[first_max].attempt, acc[0].attempt);
            if recs.iter().any(|r| r.score >= c.lambda) {
                assert!(acc[0].score >= c.lambda);
            }
            assert!(recs[0].delta.is_none());
            assert!(recs[1..].iter().all(|r| r.delta.is_some()));
            emitted.extend(acc[0].tokens.iter().copied());
            rejected_len += recs.iter().filter(|r| !r.accepted).map(|r| r.tokens.len()).sum::<usize>();
        }
        assert_eq!(run.emitted, emitted);
        assert_eq!(run.forward_tokens, run.emitted.len() + rejected_len);
        assert!(run.forward_tokens <= run.emitted.len() + (c.max_attempts - 1) * c.chunk_size * 5);
        let replay = replay_cache(&m, &c, &run).unwrap();
        let again = game_decode(&m, &clf(-1.0), &c, &PROMPT).unwrap();
        assert_eq!(run.emitted, again.emitted);
        assert_eq!(run.chunks, again.chunks);
        let fresh = {
            let mut cache = m.new_cache();
            m.prefill(&PROMPT[..5], &mut cache).unwrap();
            cache
        };
        assert!(replay.position() > fresh.position());
    }

    #[test]
    fn final_cache_matches_replay() {
        let m = model();
        for (mode, bias) in [(DecodeMode::Game, BiasKind::Decay), (DecodeMode::Game, BiasKind::Uniform), (DecodeMode::BestOfK, BiasKind::Decay), (DecodeMode::Baseline, BiasKind::Decay)] {
            let c = DecodeConfig { bias_kind: bias, k: 3, ..cfg(mode) };
            let (run, cache) = decode_with_cache(&m, Some(&clf(-1.0)), &c, &PROMPT).unwrap();
            let replayed = replay_cache(&m, &c, &run).unwrap();
            assert_eq!(replayed.position(), PROMPT.len() - 1 + run.emitted.len());
            assert_eq!(cache.state_bytes(), replayed.state_bytes(), "{mode}");
        }
    }

    #[test]
    fn stop_token_ends_run() {
        let m = model();
        let (toks, _) = m.greedy_decode(&PROMPT, 20, None, None).unwrap();
        let stop = toks[5];
        let first = toks.iter().position(|&t| t == stop).unwrap();
        let run = baseline_decode(&m, None, &DecodeConfig { stop_token: Some(stop), ..cfg(DecodeMode::Baseline) }, &PROMPT).unwrap();
        assert_eq!(run.emitted, toks[..=first].to_vec());
        assert_eq!(run.accepted().last().unwrap().tokens.last(), Some(&stop));
    }

    #[test]
    fn best_of_k_selects_argmax_and_counts_cost() {
        let m = model();
        let c = DecodeConfig { k: 3, temperature: 1.0, seed: 7, ..cfg(DecodeMode::BestOfK) };
        let run = best_of_k_decode(&m, &clf(0.0), &c, &PROMPT).unwrap();
        for idx in 0..5 {
            let recs: Vec<_> = run.chunks.iter().filter(|r| r.chunk_index == idx).collect();
            assert_eq!(recs.len(), 3);
            let acc = recs.iter().find(|r| r.accepted).unwrap();
            assert!(recs.iter().all(|r| r.score <= acc.score));
        }
        assert_eq!(run.forward_tokens, 3 * run.emitted.len());
        let again = best_of_k_decode(&m, &clf(0.0), &c, &PROMPT).unwrap();
        assert_eq!(run, DecodeRun { wall_time_ms: run.wall_time_ms, ..again });
    }

    #[test]
    fn best_of_one_at_low_temperature_is_greedy() {
        let m = model();
        let base = baseline_decode(&m, None, &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let c = DecodeConfig { k: 1, temperature: 1e-6, ..cfg(DecodeMode::BestOfK) };
        let run = best_of_k_decode(&m, &clf(0.0), &c, &PROMPT).unwrap();
        assert_eq!(run.emitted, base.emitted);
    }

    #[test]
    fn metrics() {
        let m = model();
        let run = baseline_decode(&m, Some(&clf(0.0)), &cfg(DecodeMode::Baseline), &PROMPT).unwrap();
        let met = run_metrics(&run);
        assert_eq!(met.regenerations, 0);
        assert!(met.forward_tokens >= met.tokens_generated);
        assert!((0.0..=1.0).contains(&met.mean_chunk_lookback));
    }

    #[test]
    fn config_and_shape_errors() {
        let m = model();
        assert!(game_decode(&m, &clf(0.0), &DecodeConfig { chunk_size: 0, ..cfg(DecodeMode::Game) }, &PROMPT).is_err());
        assert!(game_decode(&m, &clf(0.0), &DecodeConfig { max_attempts: 0, ..cfg(DecodeMode::Game) }, &PROMPT).is_err());
        assert!(game_decode(&m, &clf(0.0), &cfg(DecodeMode::Baseline), &PROMPT).is_err());
        let wide = GroundednessClassifier::new(4, 4, vec![0.0; 16], 0.0).unwrap();
        assert!(game_decode(&m, &wide, &cfg(DecodeMode::Game), &PROMPT).is_err());
        assert!(game_decode(&m, &clf(0.0), &cfg(DecodeMode::Game), &[]).is_err());
    }

    #[test]
    fn capacity_clamps_budget() {
        let m = model();
        let prompt: Vec<u32> = (0..36).map(|i| (i % 11) as u32).collect();
        let run = baseline_decode(&m, None, &DecodeConfig { max_new_tokens: 256, ..cfg(DecodeMode::Baseline) }, &prompt).unwrap();
        assert_eq!(run.emitted.len(), 4);
        assert!(run.capacity_limited);
    }
}
