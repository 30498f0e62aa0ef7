//! Subcommand implementations. Each command resolves its configuration as
//! flag over file over default, writes its outputs atomically and leaves a
//! `manifest.json` describing the run next to them.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use game_core::checkpoint;
use game_core::classifier::{fit, FitOptions, GroundednessClassifier, LabeledChunk};
use game_core::edit::BiasKind;
use game_core::experiment::{
    bootstrap_ci, collect_labeled_chunks, derive_seed, evaluate, kv_instances, paired_bootstrap_ci, training_corpus,
    Evaluation,
};
use game_core::features::{csv_header, write_csv_row};
use game_core::model::Model;
use game_core::pipeline::{run_metrics, ChunkRecord, DecodeConfig, DecodeMode, DecodeRun};
use game_core::tasks::{
    gen_extract_task, gen_kv_task, read_jsonl, write_jsonl, ExtractTaskConfig, SalienceRule, TaskInstance,
};
use game_core::train::{train, write_loss_curve};
use game_core::GameError;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::report::{fmt_rate, has_interior_max_or_plateau, line_plot_svg, Series, Table};
use crate::UsageError;

pub const ETA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const LAMBDA_GRID: [f64; 5] = [0.7, 0.8, 0.9, 0.95, 0.99];

#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// TOML experiment config; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub mode: Option<DecodeMode>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub bias_kind: Option<BiasKind>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Push every head toward the context instead of following the classifier gradient.
    #[arg(long)]
    pub no_direction: bool,
}

impl DecodeArgs {
    pub fn apply(&self, d: &mut DecodeConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { d.$f = v; })* };
        }
        set!(mode, eta, lambda, epsilon, bias_kind, max_attempts, chunk_size, max_new_tokens, k, temperature, seed);
        if self.no_direction {
            d.no_direction = true;
        }
    }
}

fn load_config(c: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(c.config.as_deref())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_instances(path: &Path, model: Option<&Model>) -> anyhow::Result<Vec<TaskInstance>> {
    let items: Vec<TaskInstance> = read_jsonl(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if let Some(m) = model {
        let v = m.config.vocab_size as u32;
        if let Some(bad) = items.iter().find(|i| i.prompt().iter().chain(&i.gold).any(|&t| t >= v)) {
            return Err(GameError::Data(format!("instance {} uses tokens outside the model vocabulary", bad.id)).into());
        }
    }
    Ok(items)
}

fn load_classifier(path: &Path, model: &Model) -> anyhow::Result<GroundednessClassifier> {
    let c = GroundednessClassifier::load(path).with_context(|| format!("loading classifier {}", path.display()))?;
    c.ensure_order(&game_core::features::feature_order_tag(model.config.num_layers, model.config.num_heads))?;
    Ok(c)
}

// ---------------------------------------------------------------- train-model

#[derive(Debug, Clone, Args)]
pub struct TrainModelArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the checkpoint, loss curve and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f32,
    pub smoothed_final_loss: f32,
    pub seconds: f64,
}

pub fn train_model(a: &TrainModelArgs, argv: &[String]) -> anyhow::Result<TrainSummary> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let (model, summary) = train_and_save(&cfg, &a.out)?;
    let mut m = RunManifest::new("train-model", argv, cfg.train.seed, &cfg);
    m.add_artifact(&summary.checkpoint);
    m.add_artifact(&a.out.join("loss_curve.csv"));
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "trained {} parameters for {} steps in {:.1}s; final loss {:.4} (smoothed {:.4})",
        model.params.len(),
        cfg.train.steps,
        summary.seconds,
        summary.final_loss,
        summary.smoothed_final_loss
    );
    Ok(summary)
}

pub fn train_and_save(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(Model, TrainSummary)> {
    let start = Instant::now();
    let instances = kv_instances(&cfg.vocab, &cfg.corpus, cfg.train.seed)?;
    let corpus = training_corpus(&instances);
    let ckpt_dir = out.join("checkpoints");
    let outcome = train(&cfg.model, &corpus, &cfg.train, |step, m| {
        std::fs::create_dir_all(&ckpt_dir)?;
        checkpoint::save(m, &ckpt_dir.join(format!("step_{step}.ckpt")))
    })?;
    let path = out.join("model.ckpt");
    checkpoint::save(&outcome.model, &path)?;
    let mut buf = Vec::new();
    write_loss_curve(&mut buf, &outcome.losses)?;
    checkpoint::atomic_write(&out.join("loss_curve.csv"), &buf)?;
    let smoothed = outcome.smoothed(0.98);
    let summary = TrainSummary {
        checkpoint: path,
        final_loss: outcome.losses.last().map(|l| l.1).unwrap_or(f32::NAN),
        smoothed_final_loss: smoothed.last().copied().unwrap_or(f32::NAN),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((outcome.model, summary))
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Kv,
    Extract,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output JSONL file; its manifest is written to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_pairs: Option<usize>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
    #[arg(long)]
    pub distractor_pairs: Option<usize>,
    #[arg(long)]
    pub closed_book_rate: Option<f64>,
    #[arg(long)]
    pub query_first: Option<bool>,
    #[arg(long)]
    pub num_sentences: Option<usize>,
    #[arg(long)]
    pub salience: Option<SalienceArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SalienceArg {
    Marked,
    Longest,
}

pub fn manifest_path_for(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> anyhow::Result<usize> {
    let mut cfg = load_config(&a.config)?;
    let t = &mut cfg.eval.task;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { t.$f = v; })* };
    }
    set!(num_pairs, distractor_rate, distractor_pairs, closed_book_rate, query_first);
    let items: Vec<TaskInstance> = match a.task {
        TaskArg::Kv => gen_kv_task(&cfg.vocab, &cfg.eval.task, a.seed)?.take(a.size).collect(),
        TaskArg::Extract => {
            let mut e = ExtractTaskConfig::default();
            if let Some(n) = a.num_sentences {
                e.num_sentences = n;
            }
            if let Some(s) = a.salience {
                e.rule = match s {
                    SalienceArg::Marked => SalienceRule::Marked,
                    SalienceArg::Longest => SalienceRule::Longest,
                };
            }
            gen_extract_task(&cfg.vocab, &e, a.seed)?.take(a.size).collect()
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_jsonl(&a.out, &items)?;
    let mut m = RunManifest::new("gen-data", argv, a.seed, &cfg);
    m.add_artifact(&a.out);
    m.write(&manifest_path_for(&a.out))?;
    println!("wrote {} instances to {}", items.len(), a.out.display());
    Ok(items.len())
}

// ---------------------------------------------------------------- train-classifier

#[derive(Debug, Clone, Args)]
pub struct TrainClassifierArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub heldout_fraction: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_chunks: usize,
    pub train_grounded: usize,
    pub heldout_chunks: usize,
    pub heldout_grounded: usize,
    pub train_auroc: f64,
    pub heldout_auroc: Option<f64>,
    pub seconds: f64,
}

/// Split instances into (fit, held-out) by a seeded shuffle.
pub fn split_instances(items: &[TaskInstance], heldout_fraction: f64, seed: u64) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut keyed: Vec<(u64, usize)> = idx.drain(..).map(|i| (derive_seed(seed, i as u64), i)).collect();
    keyed.sort();
    let n_held = (items.len() as f64 * heldout_fraction).round() as usize;
    let held: Vec<TaskInstance> = keyed[..n_held].iter().map(|&(_, i)| items[i].clone()).collect();
    let fit: Vec<TaskInstance> = keyed[n_held..].iter().map(|&(_, i)| items[i].clone()).collect();
    (fit, held)
}

pub fn fit_classifier(
    model: &Model,
    cfg: &ExperimentConfig,
    items: &[TaskInstance],
    out: &Path,
) -> anyhow::Result<(GroundednessClassifier, ClassifierReport)> {
    let start = Instant::now();
    let (fit_items, held_items) = split_instances(items, cfg.classifier.heldout_fraction, cfg.classifier.seed);
    let fit_chunks = collect_labeled_chunks(model, &cfg.vocab, &fit_items, &cfg.decode)?;
    let held_chunks = collect_labeled_chunks(model, &cfg.vocab, &held_items, &cfg.decode)?;
    write_chunk_dump(out, model, &fit_chunks, &held_chunks)?;
    let opts = FitOptions {
        l2: cfg.classifier.l2,
        class_weighting: cfg.classifier.class_weighting,
        seed: cfg.classifier.seed,
        dataset_hash: dataset_hash(&fit_chunks)?,
        ..FitOptions::default()
    };
    let mut clf = fit(&fit_chunks, model.config.num_layers, model.config.num_heads, &opts)?;
    clf.threshold = cfg.decode.lambda;
    clf.epsilon = cfg.decode.epsilon;
    let single_class = |c: &[LabeledChunk]| c.iter().all(|x| x.grounded) || c.iter().all(|x| !x.grounded);
    let report = ClassifierReport {
        train_chunks: fit_chunks.len(),
        train_grounded: fit_chunks.iter().filter(|c| c.grounded).count(),
        heldout_chunks: held_chunks.len(),
        heldout_grounded: held_chunks.iter().filter(|c| c.grounded).count(),
        train_auroc: clf.auroc(&fit_chunks)?,
        heldout_auroc: if held_chunks.is_empty() || single_class(&held_chunks) {
            None
        } else {
            Some(clf.auroc(&held_chunks)?)
        },
        seconds: start.elapsed().as_secs_f64(),
    };
    clf.save(&out.join("classifier.json"))?;
    checkpoint::atomic_write(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok((clf, report))
}

fn dataset_hash(chunks: &[LabeledChunk]) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(chunks)?)))
}

fn write_chunk_dump(out: &Path, model: &Model, fit: &[LabeledChunk], held: &[LabeledChunk]) -> anyhow::Result<()> {
    let mut feats = Vec::new();
    writeln!(feats, "{}", csv_header(model.config.num_layers, model.config.num_heads))?;
    let mut labels = csv::Writer::from_writer(Vec::new());
    labels.write_record(["run_id", "chunk", "split", "grounded"])?;
    for (split, set) in [("fit", fit), ("heldout", held)] {
        for c in set {
            write_csv_row(&mut feats, &c.run_id, &c.feature)?;
            labels.write_record([c.run_id.clone(), c.feature.chunk_index.to_string(), split.into(), c.grounded.to_string()])?;
        }
    }
    checkpoint::atomic_write(&out.join("features.csv"), &feats)?;
    checkpoint::atomic_write(&out.join("labels.csv"), &labels.into_inner().map_err(|e| e.into_error())?)?;
    Ok(())
}

pub fn train_classifier(a: &TrainClassifierArgs, argv: &[String]) -> anyhow::Result<ClassifierReport> {
    let mut cfg = load_config(&a.config)?;
    if let Some(v) = a.chunk_size {
        cfg.decode.chunk_size = v;
    }
    if let Some(v) = a.heldout_fraction {
        cfg.classifier.heldout_fraction = v;
    }
    if let Some(v) = a.l2 {
        cfg.classifier.l2 = v;
    }
    if let Some(v) = a.seed {
        cfg.classifier.seed = v;
    }
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let items = load_instances(&a.data, Some(&model))?;
    create_dir(&a.out)?;
    let (_, report) = fit_classifier(&model, &cfg, &items, &a.out)?;
    let mut m = RunManifest::new("train-classifier", argv, cfg.classifier.seed, &cfg);
    m.add_input(&a.model)?;
    m.add_input(&a.data)?;
    for f in ["classifier.json", "report.json", "features.csv", "labels.csv"] {
        m.add_artifact(&a.out.join(f));
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    match report.heldout_auroc {
        Some(x) => println!("held-out AUROC {x:.4} over {} chunks", report.heldout_chunks),
        None => println!("held-out AUROC undefined (single-class or empty held-out set)"),
    }
    println!("fit AUROC {:.4} over {} chunks ({} grounded)", report.train_auroc, report.train_chunks, report.train_grounded);
    Ok(report)
}

// ---------------------------------------------------------------- decode

#[derive(Debug, Clone, Args)]
pub struct DecodeCmdArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Required for game and best-of-k; optional for baseline (adds chunk scores).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Decode only the first N instances.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum LogRecord<'a> {
    Chunk {
        run_id: &'a str,
        #[serde(flatten)]
        record: &'a ChunkRecord,
    },
    Summary {
        run_id: &'a str,
        emitted: &'a [u32],
        exact_match: bool,
        grounded: bool,
        forward_tokens: usize,
        regenerations: usize,
        capacity_limited: bool,
    },
}

fn log_run(buf: &mut Vec<u8>, cfg: &ExperimentConfig, inst: &TaskInstance, run: &DecodeRun) -> game_core::Result<()> {
    for c in &run.chunks {
        game_core::tasks::append_jsonl(&mut *buf, &LogRecord::Chunk { run_id: &inst.id, record: c })?;
    }
    let o = game_core::experiment::outcome(&cfg.vocab, inst, run);
    game_core::tasks::append_jsonl(
        &mut *buf,
        &LogRecord::Summary {
            run_id: &inst.id,
            emitted: &run.emitted,
            exact_match: o.exact_match,
            grounded: o.grounded,
            forward_tokens: run.forward_tokens,
            regenerations: run.regenerations,
            capacity_limited: run.capacity_limited,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub mode: String,
    pub instances: usize,
    pub exact_match: f64,
    pub grounded_rate: f64,
    pub forward_per_emitted: f64,
    pub regenerations: usize,
    pub mean_accepted_score: f64,
    pub wall_seconds: f64,
}

pub fn decode_cmd(a: &DecodeCmdArgs, argv: &[String]) -> anyhow::Result<DecodeSummary> {
    let mut cfg = load_config(&a.config)?;
    a.decode.apply(&mut cfg.decode);
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let clf = match &a.classifier {
        Some(p) => Some(load_classifier(p, &model)?),
        None if cfg.decode.mode != DecodeMode::Baseline => {
            return Err(UsageError(format!("mode {} needs --classifier", cfg.decode.mode)).into())
        }
        None => None,
    };
    let mut items = load_instances(&a.data, Some(&model))?;
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    create_dir(&a.out)?;
    let start = Instant::now();
    let mut log = Vec::new();
    let mut scores = Vec::new();
    let eval = evaluate(&model, clf.as_ref(), &cfg.decode, &cfg.vocab, &items, |inst, run| {
        scores.push(run_metrics(run).mean_accepted_score);
        log_run(&mut log, &cfg, inst, run)
    })?;
    let wall = start.elapsed().as_secs_f64();
    checkpoint::atomic_write(&a.out.join("runs.jsonl"), &log)?;
    let finite: Vec<f64> = scores.into_iter().filter(|s| s.is_finite()).collect();
    let summary = DecodeSummary {
        mode: variant_label(&cfg.decode),
        instances: items.len(),
        exact_match: eval.em_rate(),
        grounded_rate: eval.grounded_rate(),
        forward_per_emitted: eval.forward_per_emitted(),
        regenerations: eval.outcomes.iter().map(|o| o.regenerations).sum(),
        mean_accepted_score: if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        wall_seconds: wall,
    };
    let mut t = Table::new(&[
        "mode",
        "instances",
        "exact_match",
        "grounded_rate",
        "forward_per_emitted",
        "regenerations",
        "mean_accepted_score",
        "wall_seconds",
    ]);
    t.push(vec![
        summary.mode.clone(),
        summary.instances.to_string(),
        fmt_rate(summary.exact_match),
        fmt_rate(summary.grounded_rate),
        format!("{:.3}", summary.forward_per_emitted),
        summary.regenerations.to_string(),
        format!("{:.4}", summary.mean_accepted_score),
        format!("{:.2}", summary.wall_seconds),
    ]);
    t.save(&a.out, "metrics")?;
    let mut m = RunManifest::new("decode", argv, cfg.decode.seed, &cfg);
    m.add_input(&a.model)?;
    if let Some(p) = &a.classifier {
        m.add_input(p)?;
    }
    m.add_input(&a.data)?;
    for f in ["runs.jsonl", "metrics.txt", "metrics.csv"] {
        m.add_artifact(&a.out.join(f));
    }
    m.write(&a.out.join(MANIFEST_FILE))?;
    print!("{}", t.render());
    Ok(summary)
}

pub fn variant_label(d: &DecodeConfig) -> String {
    match d.mode {
        DecodeMode::Baseline => "baseline".into(),
        DecodeMode::BestOfK => format!("best-of-{}", d.k),
        DecodeMode::Game => format!("game:{}{}", d.bias_kind, if d.no_direction { ":no-direction" } else { "" }),
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum Axis {
    Eta,
    Lambda,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values; defaults to the standard grid of the axis.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub exact_match: f64,
    pub ci: (f64, f64),
    pub grounded_rate: f64,
    pub forward_per_emitted: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
    pub interior_max_or_plateau: bool,
}

pub fn run_sweep(
    model: &Model,
    clf: &GroundednessClassifier,
    cfg: &ExperimentConfig,
    items: &[TaskInstance],
    axis: Axis,
    grid: &[f64],
) -> anyhow::Result<SweepResult> {
    let mut points = Vec::new();
    for &v in grid {
        let mut d = DecodeConfig { mode: DecodeMode::Game, ..cfg.decode.clone() };
        match axis {
            Axis::Eta => d.eta = v,
            Axis::Lambda => d.lambda = v,
        }
        let e = evaluate(model, Some(clf), &d, &cfg.vocab, items, |_, _| Ok(()))?;
        points.push(SweepPoint {
            value: v,
            exact_match: e.em_rate(),
            ci: bootstrap_ci(&e.em_vector(), cfg.eval.bootstrap_resamples, 0.95, cfg.eval.seed)?,
            grounded_rate: e.grounded_rate(),
            forward_per_emitted: e.forward_per_emitted(),
        });
    }
    let ys: Vec<f64> = points.iter().map(|p| p.exact_match).collect();
    Ok(SweepResult { axis, interior_max_or_plateau: has_interior_max_or_plateau(&ys), points })
}

pub fn save_sweep(out: &Path, r: &SweepResult) -> anyhow::Result<()> {
    let name = match r.axis {
        Axis::Eta => "eta",
        Axis::Lambda => "lambda",
    };
    let mut t = Table::new(&[name, "exact_match", "ci_low", "ci_high", "grounded_rate", "forward_per_emitted"]);
    for p in &r.points {
        t.push(vec![
            format!("{}", p.value),
            fmt_rate(p.exact_match),
            fmt_rate(p.ci.0),
            fmt_rate(p.ci.1),
            fmt_rate(p.grounded_rate),
            format!("{:.3}", p.forward_per_emitted),
        ]);
    }
    t.save(out, &format!("sweep_{name}"))?;
    let x: Vec<f64> = r.points.iter().map(|p| p.value).collect();
    let y: Vec<f64> = r.points.iter().map(|p| p.exact_match).collect();
    let band: Vec<(f64, f64)> = r.points.iter().map(|p| p.ci).collect();
    let svg = line_plot_svg(
        &format!("exact match vs {name}"),
        name,
        "exact match",
        &[Series { label: "game", x: &x, y: &y, band: Some(&band) }],
    );
    checkpoint::atomic_write(&out.join(format!("sweep_{name}.svg")), svg.as_bytes())?;
    Ok(())
}

pub fn sweep_cmd(a: &SweepArgs, argv: &[String]) -> anyhow::Result<SweepResult> {
    let mut cfg = load_config(&a.config)?;
    a.decode.apply(&mut cfg.decode);
    cfg.decode.mode = DecodeMode::Game;
    cfg.validate()?;
    let grid: Vec<f64> = if a.grid.is_empty() {
        match a.axis {
            Axis::Eta => ETA_GRID.to_vec(),
            Axis::Lambda => LAMBDA_GRID.to_vec(),
        }
    } else {
        a.grid.clone()
    };
    let model = load_model(&a.model)?;
    let clf = load_classifier(&a.classifier, &model)?;
    let mut items = load_instances(&a.data, Some(&model))?;
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    create_dir(&a.out)?;
    let r = run_sweep(&model, &clf, &cfg, &items, a.axis, &grid)?;
    save_sweep(&a.out, &r)?;
    let mut m = RunManifest::new("sweep", argv, cfg.decode.seed, &cfg);
    m.add_input(&a.model)?;
    m.add_input(&a.classifier)?;
    m.add_input(&a.data)?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    for p in &r.points {
        println!("{:>6}  em {:.4}  [{:.4}, {:.4}]", p.value, p.exact_match, p.ci.0, p.ci.1);
    }
    println!("interior maximum or plateau: {}", r.interior_max_or_plateau);
    Ok(r)
}

// ---------------------------------------------------------------- compare

/// A decoding variant named on the command line, e.g. `game:decay:no-direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub apply: VariantKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariantKind {
    Baseline,
    Game { bias: BiasKind, direction: bool },
    BestOfK,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let apply = match parts.as_slice() {
            ["baseline"] => VariantKind::Baseline,
            ["best-of-k"] => VariantKind::BestOfK,
            ["game", bias] => VariantKind::Game { bias: bias.parse()?, direction: true },
            ["game", bias, "no-direction"] => VariantKind::Game { bias: bias.parse()?, direction: false },
            _ => return Err(format!("unknown variant {s:?}")),
        };
        Ok(Variant { label: s.to_string(), apply })
    }
}

impl Variant {
    pub fn config(&self, base: &DecodeConfig) -> DecodeConfig {
        let mut d = base.clone();
        match self.apply {
            VariantKind::Baseline => d.mode = DecodeMode::Baseline,
            VariantKind::BestOfK => d.mode = DecodeMode::BestOfK,
            VariantKind::Game { bias, direction } => {
                d.mode = DecodeMode::Game;
                d.bias_kind = bias;
                d.no_direction = !direction;
            }
        }
        d
    }
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "baseline,game:decay,game:decay:no-direction,game:uniform,best-of-k")]
    pub variants: Vec<Variant>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub exact_match: f64,
    pub ci: (f64, f64),
    pub grounded_rate: f64,
    pub forward_per_emitted: f64,
    /// Paired bootstrap interval of the difference to the first variant.
    pub diff_to_first: (f64, f64),
}

pub fn run_compare(
    model: &Model,
    clf: &GroundednessClassifier,
    cfg: &ExperimentConfig,
    items: &[TaskInstance],
    variants: &[Variant],
) -> anyhow::Result<(Vec<CompareRow>, Vec<Evaluation>)> {
    let mut evals = Vec::new();
    for v in variants {
        evals.push(evaluate(model, Some(clf), &v.config(&cfg.decode), &cfg.vocab, items, |_, _| Ok(()))?);
    }
    let rows = compare_rows(cfg, variants, &evals)?;
    Ok((rows, evals))
}

pub fn compare_rows(cfg: &ExperimentConfig, variants: &[Variant], evals: &[Evaluation]) -> anyhow::Result<Vec<CompareRow>> {
    let first = evals.first().map(|e| e.em_vector()).unwrap_or_default();
    variants
        .iter()
        .zip(evals)
        .map(|(v, e)| {
            let em = e.em_vector();
            Ok(CompareRow {
                variant: v.label.clone(),
                exact_match: e.em_rate(),
                ci: bootstrap_ci(&em, cfg.eval.bootstrap_resamples, 0.95, cfg.eval.seed)?,
                grounded_rate: e.grounded_rate(),
                forward_per_emitted: e.forward_per_emitted(),
                diff_to_first: paired_bootstrap_ci(&em, &first, cfg.eval.bootstrap_resamples, 0.95, cfg.eval.seed)?,
            })
        })
        .collect()
}

pub fn compare_table(rows: &[CompareRow]) -> Table {
    let mut t = Table::new(&[
        "variant",
        "exact_match",
        "ci_low",
        "ci_high",
        "grounded_rate",
        "forward_per_emitted",
        "diff_low",
        "diff_high",
    ]);
    for r in rows {
        t.push(vec![
            r.variant.clone(),
            fmt_rate(r.exact_match),
            fmt_rate(r.ci.0),
            fmt_rate(r.ci.1),
            fmt_rate(r.grounded_rate),
            format!("{:.3}", r.forward_per_emitted),
            fmt_rate(r.diff_to_first.0),
            fmt_rate(r.diff_to_first.1),
        ]);
    }
    t
}

pub fn compare_cmd(a: &CompareArgs, argv: &[String]) -> anyhow::Result<Vec<CompareRow>> {
    let mut cfg = load_config(&a.config)?;
    a.decode.apply(&mut cfg.decode);
    cfg.validate()?;
    if a.variants.is_empty() {
        return Err(UsageError("no variants given".into()).into());
    }
    let model = load_model(&a.model)?;
    let clf = load_classifier(&a.classifier, &model)?;
    let mut items = load_instances(&a.data, Some(&model))?;
    if let Some(n) = a.limit {
        items.truncate(n);
    }
    create_dir(&a.out)?;
    let (rows, _) = run_compare(&model, &clf, &cfg, &items, &a.variants)?;
    let t = compare_table(&rows);
    t.save(&a.out, "compare")?;
    let mut m = RunManifest::new("compare", argv, cfg.decode.seed, &cfg);
    m.add_input(&a.model)?;
    m.add_input(&a.classifier)?;
    m.add_input(&a.data)?;
    m.add_artifact(&a.out.join("compare.txt"));
    m.add_artifact(&a.out.join("compare.csv"));
    m.write(&a.out.join(MANIFEST_FILE))?;
    print!("{}", t.render());
    Ok(rows)
}
