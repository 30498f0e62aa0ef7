//! The end-to-end experiment: train the model and the classifier, tune the
//! edit intensity on a dev split, then compare decoding variants and sweep
//! both knobs on the held-out test split.

use std::path::{Path, PathBuf};
use std::time::Instant;

use game_core::checkpoint;
use game_core::classifier::GroundednessClassifier;
use game_core::edit::BiasKind;
use game_core::experiment::{derive_seed, evaluate, paired_bootstrap_ci};
use game_core::model::Model;
use game_core::pipeline::{ChunkRecord, DecodeConfig, DecodeMode};
use game_core::tasks::{gen_kv_task, write_jsonl, TaskInstance};
use serde::{Deserialize, Serialize};

use crate::commands::{
    compare_rows, compare_table, fit_classifier, run_sweep, save_sweep, Axis, ClassifierReport, CompareRow, SweepResult,
    TrainSummary, Variant, ETA_GRID, LAMBDA_GRID,
};
use crate::config::ExperimentConfig;
use crate::report::{fmt_rate, line_plot_svg, Series, Table};

pub const VARIANTS: [&str; 5] = ["baseline", "game:decay", "game:decay:no-direction", "game:uniform", "best-of-k"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningPoint {
    pub eta: f64,
    pub exact_match: f64,
}

/// Mean projection of the edit direction onto the change in chunk features
/// between consecutive attempts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionEfficacy {
    pub regenerated_chunks: usize,
    pub mean_projection: f64,
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train: TrainSummary,
    pub classifier: ClassifierReport,
    pub tuning: Vec<TuningPoint>,
    pub tuned_eta: f64,
    pub variants: Vec<CompareRow>,
    /// Paired bootstrap interval of `decay - uniform` exact match.
    pub decay_minus_uniform: (f64, f64),
    pub eta_sweep: SweepResult,
    pub lambda_sweep: SweepResult,
    pub direction_efficacy: DirectionEfficacy,
    pub classifier_seconds: f64,
    pub evaluation_seconds: f64,
    pub total_seconds: f64,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.variants.iter().find(|r| r.variant == label)
    }
}

/// Evaluation splits drawn from the evaluation task distribution, disjoint by seed.
pub fn eval_splits(cfg: &ExperimentConfig) -> game_core::Result<(Vec<TaskInstance>, Vec<TaskInstance>, Vec<TaskInstance>)> {
    let draw = |k: u64, n: usize| -> game_core::Result<Vec<TaskInstance>> {
        Ok(gen_kv_task(&cfg.vocab, &cfg.eval.task, derive_seed(cfg.eval.seed, k))?.take(n).collect())
    };
    Ok((draw(1, cfg.classifier.instances)?, draw(2, cfg.eval.dev_size)?, draw(3, cfg.eval.test_size)?))
}

pub fn direction_efficacy(records: &[ChunkRecord]) -> DirectionEfficacy {
    let mut proj = Vec::new();
    for pair in records.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let Some(delta) = &cur.delta else { continue };
        if cur.attempt == 0 || cur.chunk_index != prev.chunk_index || cur.attempt != prev.attempt + 1 {
            continue;
        }
        let p: f64 = delta
            .iter()
            .zip(cur.feature.mean.iter().zip(&prev.feature.mean))
            .map(|(&d, (a, b))| d as f64 * (a - b))
            .sum();
        proj.push(p);
    }
    let n = proj.len();
    DirectionEfficacy {
        regenerated_chunks: n,
        mean_projection: if n == 0 { f64::NAN } else { proj.iter().sum::<f64>() / n as f64 },
        positive_fraction: if n == 0 { f64::NAN } else { proj.iter().filter(|&&p| p > 0.0).count() as f64 / n as f64 },
    }
}

fn game(cfg: &ExperimentConfig, eta: f64) -> DecodeConfig {
    DecodeConfig { mode: DecodeMode::Game, bias_kind: BiasKind::Decay, eta, ..cfg.decode.clone() }
}

/// Pick the intensity with the highest dev exact match, preferring the smaller one on ties.
pub fn tune_eta(
    model: &Model,
    clf: &GroundednessClassifier,
    cfg: &ExperimentConfig,
    dev: &[TaskInstance],
) -> game_core::Result<(f64, Vec<TuningPoint>)> {
    let mut points = Vec::new();
    for &eta in &ETA_GRID {
        let e = evaluate(model, Some(clf), &game(cfg, eta), &cfg.vocab, dev, |_, _| Ok(()))?;
        points.push(TuningPoint { eta, exact_match: e.em_rate() });
    }
    let best = points.iter().fold(&points[0], |b, p| if p.exact_match > b.exact_match { p } else { b });
    Ok((best.eta, points))
}

/// Run everything into `out`. An existing `out/model/model.ckpt` is reused
/// when `reuse_model` is set.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, reuse_model: Option<&Path>) -> anyhow::Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let model_dir = out.join("model");
    std::fs::create_dir_all(&model_dir)?;
    let (model, train) = match reuse_model {
        Some(p) => (
            checkpoint::load(p)?,
            TrainSummary { checkpoint: PathBuf::from(p), final_loss: f32::NAN, smoothed_final_loss: f32::NAN, seconds: 0.0 },
        ),
        None => crate::commands::train_and_save(cfg, &model_dir)?,
    };

    let clf_start = Instant::now();
    let (clf_items, dev, test) = eval_splits(cfg)?;
    let data_dir = out.join("data");
    std::fs::create_dir_all(&data_dir)?;
    write_jsonl(&data_dir.join("classifier.jsonl"), &clf_items)?;
    write_jsonl(&data_dir.join("dev.jsonl"), &dev)?;
    write_jsonl(&data_dir.join("test.jsonl"), &test)?;
    let clf_dir = out.join("classifier");
    std::fs::create_dir_all(&clf_dir)?;
    let (clf, classifier) = fit_classifier(&model, cfg, &clf_items, &clf_dir)?;
    let classifier_seconds = clf_start.elapsed().as_secs_f64();

    let eval_start = Instant::now();
    let (tuned_eta, tuning) = tune_eta(&model, &clf, cfg, &dev)?;
    let mut tuned = cfg.clone();
    tuned.decode = game(cfg, tuned_eta);

    let variants: Vec<Variant> = VARIANTS.iter().map(|v| v.parse().expect("built-in variant")).collect();
    let mut evals = Vec::new();
    let mut records = Vec::new();
    for v in &variants {
        let d = v.config(&tuned.decode);
        let keep = v.label == "game:decay";
        evals.push(evaluate(&model, Some(&clf), &d, &cfg.vocab, &test, |_, run| {
            if keep {
                records.extend(run.chunks.iter().cloned());
            }
            Ok(())
        })?);
    }
    let rows = compare_rows(&tuned, &variants, &evals)?;
    let decay_minus_uniform = paired_bootstrap_ci(
        &evals[1].em_vector(),
        &evals[3].em_vector(),
        cfg.eval.bootstrap_resamples,
        0.95,
        cfg.eval.seed,
    )?;

    let eta_sweep = run_sweep(&model, &clf, &tuned, &test, Axis::Eta, &ETA_GRID)?;
    let lambda_sweep = run_sweep(&model, &clf, &tuned, &test, Axis::Lambda, &LAMBDA_GRID)?;

    let mut unit = tuned.clone();
    unit.decode.eta = 1.0;
    let mut unit_records = Vec::new();
    evaluate(&model, Some(&clf), &unit.decode, &cfg.vocab, &test, |_, run| {
        unit_records.extend(run.chunks.iter().cloned());
        Ok(())
    })?;
    let direction = direction_efficacy(&unit_records);
    let evaluation_seconds = eval_start.elapsed().as_secs_f64();

    let report = ExperimentReport {
        train,
        classifier,
        tuning,
        tuned_eta,
        variants: rows,
        decay_minus_uniform,
        eta_sweep,
        lambda_sweep,
        direction_efficacy: direction,
        classifier_seconds,
        evaluation_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write_report(out, &report)?;
    Ok(report)
}

fn write_report(out: &Path, r: &ExperimentReport) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(r)?;
    bytes.push(b'\n');
    checkpoint::atomic_write(&out.join("report.json"), &bytes)?;

    let mut t = Table::new(&["eta", "dev_exact_match"]);
    for p in &r.tuning {
        t.push(vec![format!("{}", p.eta), fmt_rate(p.exact_match)]);
    }
    t.save(out, "tuning")?;
    compare_table(&r.variants).save(out, "compare")?;
    save_sweep(out, &r.eta_sweep)?;
    save_sweep(out, &r.lambda_sweep)?;

    let series: Vec<(String, Vec<f64>, Vec<f64>)> = r
        .variants
        .iter()
        .enumerate()
        .map(|(i, v)| (v.variant.clone(), vec![i as f64], vec![v.exact_match]))
        .collect();
    let plotted: Vec<Series> = series.iter().map(|(l, x, y)| Series { label: l, x, y, band: None }).collect();
    let svg = line_plot_svg("exact match by variant", "variant index", "exact match", &plotted);
    checkpoint::atomic_write(&out.join("compare.svg"), svg.as_bytes())?;

    let mut s = String::new();
    s.push_str(&format!(
        "training: {:.1}s, final smoothed loss {:.4}\n",
        r.train.seconds, r.train.smoothed_final_loss
    ));
    s.push_str(&format!(
        "classifier: {:.1}s, held-out AUROC {}\n",
        r.classifier_seconds,
        r.classifier.heldout_auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "undefined".into())
    ));
    s.push_str(&format!("tuned eta: {}\n\n", r.tuned_eta));
    s.push_str(&compare_table(&r.variants).render());
    s.push_str(&format!(
        "\ndecay minus uniform, 95% paired interval: [{:.4}, {:.4}]\n",
        r.decay_minus_uniform.0, r.decay_minus_uniform.1
    ));
    s.push_str(&format!(
        "direction efficacy at eta 1: mean projection {:.5} over {} regenerated chunks ({:.3} positive)\n",
        r.direction_efficacy.mean_projection, r.direction_efficacy.regenerated_chunks, r.direction_efficacy.positive_fraction
    ));
    s.push_str(&format!(
        "eta sweep interior max or plateau: {}\nlambda sweep interior max or plateau: {}\n",
        r.eta_sweep.interior_max_or_plateau, r.lambda_sweep.interior_max_or_plateau
    ));
    s.push_str(&format!("evaluation: {:.1}s, total {:.1}s\n", r.evaluation_seconds, r.total_seconds));
    checkpoint::atomic_write(&out.join("report.txt"), s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use game_core::features::ChunkFeature;

    fn rec(chunk: usize, attempt: usize, mean: Vec<f64>, delta: Option<Vec<i8>>) -> ChunkRecord {
        ChunkRecord {
            chunk_index: chunk,
            attempt,
            tokens: vec![],
            feature: ChunkFeature { chunk_index: chunk, span: (0, 1), mean },
            score: 0.5,
            accepted: false,
            delta,
        }
    }

    #[test]
    fn efficacy_uses_consecutive_attempts_of_one_chunk() {
        let r = vec![
            rec(0, 0, vec![0.2, 0.5], None),
            rec(0, 1, vec![0.4, 0.4], Some(vec![1, -1])),
            rec(0, 2, vec![0.3, 0.4], Some(vec![1, 0])),
            rec(1, 0, vec![0.9, 0.9], None),
        ];
        let e = direction_efficacy(&r);
        assert_eq!(e.regenerated_chunks, 2);
        assert!((e.mean_projection - (0.3 - 0.1) / 2.0).abs() < 1e-12);
        assert_eq!(e.positive_fraction, 0.5);
    }
}
