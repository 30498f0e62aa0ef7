//! Synthetic grounded-generation tasks, automatic chunk labels and metrics.
//!
//! Token ids below [`FIRST_CONTENT`] are structural. Content ids are laid out
//! as keys, then values, then memory tokens, then words.
//!
//! A key-value instance lists pairs `k v1 .. vm ;`, then asks `? k`. The gold
//! answer is the value run of the queried key. Closed-book instances ask for a
//! key that is not listed; their gold answer is that key's entry in a fixed
//! memory table, which a model can only learn from training data.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GameError, Result};
use crate::pipeline::DecodeRun;
use crate::train::TrainSequence;

pub const EOS: u32 = 0;
pub const SEP: u32 = 1;
pub const QUERY: u32 = 2;
pub const DOT: u32 = 3;
pub const MARK: u32 = 4;
pub const FIRST_CONTENT: u32 = 5;

fn data_err(msg: impl Into<String>) -> GameError {
    GameError::Data(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vocabulary {
    pub num_keys: u32,
    pub num_values: u32,
    pub num_memory: u32,
    pub num_words: u32,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { num_keys: 24, num_values: 64, num_memory: 32, num_words: 32 }
    }
}

impl Vocabulary {
    pub fn key(&self, i: u32) -> u32 {
        FIRST_CONTENT + i
    }

    pub fn value(&self, i: u32) -> u32 {
        FIRST_CONTENT + self.num_keys + i
    }

    pub fn memory(&self, i: u32) -> u32 {
        FIRST_CONTENT + self.num_keys + self.num_values + i
    }

    pub fn word(&self, i: u32) -> u32 {
        FIRST_CONTENT + self.num_keys + self.num_values + self.num_memory + i
    }

    pub fn size(&self) -> usize {
        (FIRST_CONTENT + self.num_keys + self.num_values + self.num_memory + self.num_words) as usize
    }

    pub fn is_structural(&self, t: u32) -> bool {
        t < FIRST_CONTENT
    }

    pub fn is_memory(&self, t: u32) -> bool {
        (self.memory(0)..self.word(0)).contains(&t)
    }

    /// Human-readable rendering, e.g. `k3 v10 v2 ; ? k3`.
    pub fn render(&self, tokens: &[u32]) -> String {
        let name = |t: u32| match t {
            EOS => "</s>".to_string(),
            SEP => ";".into(),
            QUERY => "?".into(),
            DOT => ".".into(),
            MARK => "*".into(),
            t if t < self.value(0) => format!("k{}", t - self.key(0)),
            t if t < self.memory(0) => format!("v{}", t - self.value(0)),
            t if t < self.word(0) => format!("m{}", t - self.memory(0)),
            t if (t as usize) < self.size() => format!("w{}", t - self.word(0)),
            t => format!("<{t}>"),
        };
        tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    KeyValue,
    Extract,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInstance {
    pub id: String,
    pub kind: TaskKind,
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    pub gold: Vec<u32>,
    pub closed_book: bool,
    pub distractors: usize,
    /// Index of the pair or sentence the gold answer comes from, if it is in the context.
    pub target: Option<usize>,
}

impl TaskInstance {
    /// Context followed by query: everything the model reads before answering.
    pub fn prompt(&self) -> Vec<u32> {
        let mut p = self.context.clone();
        p.extend_from_slice(&self.query);
        p
    }

    /// Teacher-forcing sequence `prompt gold </s>` with loss on the answer only.
    pub fn training_sequence(&self) -> TrainSequence {
        let mut toks = self.prompt();
        let start = toks.len();
        toks.extend_from_slice(&self.gold);
        toks.push(EOS);
        TrainSequence::with_answer(toks, start)
    }
}

/// Closed-book answers: one value run per key, fixed by a seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTable {
    pub seed: u64,
    pub entries: Vec<Vec<u32>>,
}

impl MemoryTable {
    pub fn new(vocab: &Vocabulary, value_len: usize, seed: u64) -> Result<Self> {
        if vocab.num_memory == 0 {
            return Err(data_err("memory alphabet is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..vocab.num_keys)
            .map(|_| (0..value_len).map(|_| vocab.memory(rng.random_range(0..vocab.num_memory))).collect())
            .collect();
        Ok(MemoryTable { seed, entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvTaskConfig {
    pub num_pairs: usize,
    pub value_len: usize,
    /// Probability that an instance also carries a block of irrelevant pairs.
    pub distractor_rate: f64,
    /// Size of that block.
    pub distractor_pairs: usize,
    /// Probability that the queried key is absent from the context.
    pub closed_book_rate: f64,
    /// Always query the first listed pair instead of a uniformly drawn relevant one.
    pub query_first: bool,
    pub memory_seed: u64,
}

impl Default for KvTaskConfig {
    fn default() -> Self {
        KvTaskConfig {
            num_pairs: 4,
            value_len: 2,
            distractor_rate: 0.0,
            distractor_pairs: 4,
            closed_book_rate: 0.0,
            query_first: false,
            memory_seed: 12345,
        }
    }
}

/// Deterministic stream of key-value instances.
pub struct KvTaskStream {
    vocab: Vocabulary,
    cfg: KvTaskConfig,
    memory: MemoryTable,
    rng: ChaCha8Rng,
    seed: u64,
    next: usize,
}

pub fn gen_kv_task(vocab: &Vocabulary, cfg: &KvTaskConfig, seed: u64) -> Result<KvTaskStream> {
    if cfg.num_pairs < 2 {
        return Err(data_err(format!("need at least 2 pairs, got {}", cfg.num_pairs)));
    }
    if cfg.value_len == 0 {
        return Err(data_err("values need at least one token"));
    }
    for (name, p) in [("distractor", cfg.distractor_rate), ("closed-book", cfg.closed_book_rate)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(data_err(format!("{name} rate {p} outside [0, 1]")));
        }
    }
    let keys_needed = cfg.num_pairs + if cfg.distractor_rate > 0.0 { cfg.distractor_pairs } else { 0 } + 1;
    if (vocab.num_keys as usize) < keys_needed {
        return Err(data_err(format!("{} keys cannot give {keys_needed} distinct keys", vocab.num_keys)));
    }
    if vocab.num_values == 0 {
        return Err(data_err("value alphabet is empty"));
    }
    Ok(KvTaskStream {
        vocab: *vocab,
        cfg: cfg.clone(),
        memory: MemoryTable::new(vocab, cfg.value_len, cfg.memory_seed)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        next: 0,
    })
}

impl KvTaskStream {
    pub fn memory(&self) -> &MemoryTable {
        &self.memory
    }
}

impl Iterator for KvTaskStream {
    type Item = TaskInstance;

    fn next(&mut self) -> Option<TaskInstance> {
        let (v, cfg, rng) = (&self.vocab, &self.cfg, &mut self.rng);
        let distracted = cfg.distractor_rate > 0.0 && rng.random_bool(cfg.distractor_rate);
        let closed = cfg.closed_book_rate > 0.0 && rng.random_bool(cfg.closed_book_rate);
        let extra = if distracted { cfg.distractor_pairs } else { 0 };
        let mut keys: Vec<u32> = (0..v.num_keys).collect();
        keys.partial_shuffle(rng, cfg.num_pairs + extra + 1);
        let listed = &keys[..cfg.num_pairs + extra];
        let drawn = rng.random_range(0..cfg.num_pairs);
        let target = if cfg.query_first { 0 } else { drawn };
        let mut context = Vec::new();
        let mut gold = Vec::new();
        for (i, &k) in listed.iter().enumerate() {
            context.push(v.key(k));
            let vals: Vec<u32> = (0..cfg.value_len).map(|_| v.value(rng.random_range(0..v.num_values))).collect();
            context.extend_from_slice(&vals);
            context.push(SEP);
            if i == target {
                gold = vals;
            }
        }
        let asked = if closed { keys[cfg.num_pairs + extra] } else { listed[target] };
        if closed {
            gold = self.memory.entries[asked as usize].clone();
        }
        let inst = TaskInstance {
            id: format!("kv-{}-{}", self.seed, self.next),
            kind: TaskKind::KeyValue,
            context,
            query: vec![QUERY, v.key(asked)],
            gold,
            closed_book: closed,
            distractors: extra,
            target: (!closed).then_some(target),
        };
        self.next += 1;
        Some(inst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SalienceRule {
    /// The salient sentence opens with the marker token.
    Marked,
    /// The salient sentence is the unique longest one.
    Longest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractTaskConfig {
    pub num_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: SalienceRule,
}

impl Default for ExtractTaskConfig {
    fn default() -> Self {
        ExtractTaskConfig { num_sentences: 3, min_len: 2, max_len: 5, rule: SalienceRule::Marked }
    }
}

pub struct ExtractTaskStream {
    vocab: Vocabulary,
    cfg: ExtractTaskConfig,
    rng: ChaCha8Rng,
    seed: u64,
    next: usize,
}

pub fn gen_extract_task(vocab: &Vocabulary, cfg: &ExtractTaskConfig, seed: u64) -> Result<ExtractTaskStream> {
    if cfg.num_sentences < 2 {
        return Err(data_err(format!("need at least 2 sentences, got {}", cfg.num_sentences)));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(data_err(format!("bad sentence length range {}..={}", cfg.min_len, cfg.max_len)));
    }
    if cfg.rule == SalienceRule::Longest && cfg.min_len == cfg.max_len {
        return Err(data_err("the longest-sentence rule needs a length range"));
    }
    if vocab.num_words == 0 {
        return Err(data_err("word alphabet is empty"));
    }
    Ok(ExtractTaskStream { vocab: *vocab, cfg: cfg.clone(), rng: ChaCha8Rng::seed_from_u64(seed), seed, next: 0 })
}

impl Iterator for ExtractTaskStream {
    type Item = TaskInstance;

    fn next(&mut self) -> Option<TaskInstance> {
        let (v, cfg, rng) = (&self.vocab, &self.cfg, &mut self.rng);
        let n = cfg.num_sentences;
        let target = rng.random_range(0..n);
        let lens: Vec<usize> = match cfg.rule {
            SalienceRule::Marked => (0..n).map(|_| rng.random_range(cfg.min_len..=cfg.max_len)).collect(),
            SalienceRule::Longest => (0..n)
                .map(|i| if i == target { cfg.max_len } else { rng.random_range(cfg.min_len..cfg.max_len) })
                .collect(),
        };
        let mut context = Vec::new();
        let mut gold = Vec::new();
        for (i, &len) in lens.iter().enumerate() {
            let words: Vec<u32> = (0..len).map(|_| v.word(rng.random_range(0..v.num_words))).collect();
            if i == target {
                if cfg.rule == SalienceRule::Marked {
                    context.push(MARK);
                }
                gold = words.clone();
            }
            context.extend_from_slice(&words);
            context.push(DOT);
        }
        let inst = TaskInstance {
            id: format!("ex-{}-{}", self.seed, self.next),
            kind: TaskKind::Extract,
            context,
            query: vec![QUERY],
            gold,
            closed_book: false,
            distractors: n - 1,
            target: Some(target),
        };
        self.next += 1;
        Some(inst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "kebab-case")]
pub enum Rationale {
    GoldPrefix,
    CopiedFromContext,
    StructuralOnly,
    Unsupported { tokens: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingLabel {
    pub grounded: bool,
    pub rationale: Rationale,
}

/// Label one chunk. `gold_rest` is the gold answer from the chunk's offset on,
/// when a gold answer is known.
pub fn auto_label(vocab: &Vocabulary, context: &[u32], chunk: &[u32], gold_rest: Option<&[u32]>) -> GroundingLabel {
    let content: Vec<u32> = chunk.iter().copied().filter(|&t| !vocab.is_structural(t)).collect();
    let body: Vec<u32> = chunk.iter().copied().take_while(|&t| t != EOS).collect();
    if let Some(g) = gold_rest {
        if !body.is_empty() && g.starts_with(&body) {
            return GroundingLabel { grounded: true, rationale: Rationale::GoldPrefix };
        }
    }
    if content.is_empty() {
        return GroundingLabel { grounded: true, rationale: Rationale::StructuralOnly };
    }
    let missing: Vec<u32> = content.iter().copied().filter(|t| !context.contains(t)).collect();
    if missing.is_empty() {
        GroundingLabel { grounded: true, rationale: Rationale::CopiedFromContext }
    } else {
        GroundingLabel { grounded: false, rationale: Rationale::Unsupported { tokens: missing } }
    }
}

/// Labels of a run's accepted chunks, in order.
pub fn label_run(vocab: &Vocabulary, run: &DecodeRun, inst: &TaskInstance) -> Vec<GroundingLabel> {
    run.accepted()
        .map(|c| {
            let start = c.feature.span.0;
            let rest = inst.gold.get(start..).unwrap_or(&[]);
            auto_label(vocab, &run.prompt, &c.tokens, Some(rest))
        })
        .collect()
}

/// Whether `gold` occurs as a contiguous span of `emitted`.
pub fn exact_match(emitted: &[u32], gold: &[u32]) -> bool {
    if gold.is_empty() {
        return true;
    }
    emitted.windows(gold.len()).any(|w| w == gold)
}

/// Fraction of runs whose chunk labels are all grounded.
pub fn grounded_rate(labels: &[Vec<GroundingLabel>]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|ls| ls.iter().all(|l| l.grounded)).count() as f64 / labels.len() as f64
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    crate::checkpoint::atomic_write(path, &buf)
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| data_err(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

pub fn append_jsonl<T: Serialize>(mut w: impl Write, item: &T) -> Result<()> {
    serde_json::to_writer(&mut w, item)?;
    w.write_all(b"\n")?;
    Ok(())
}
