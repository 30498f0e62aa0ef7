use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use game_cli::commands::{
    compare_cmd, decode_cmd, gen_data, sweep_cmd, train_classifier, train_model, CompareArgs, ConfigArgs, DecodeCmdArgs,
    GenDataArgs, SweepArgs, TrainClassifierArgs, TrainModelArgs,
};
use game_cli::manifest::{RunManifest, MANIFEST_FILE};
use game_cli::{exit_code, EXIT_OK, EXIT_USAGE};

/// Attention-guided detect-and-regenerate decoding on synthetic grounding tasks.
#[derive(Debug, Parser)]
#[command(name = "game", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the decoder-only model on the synthetic corpus.
    TrainModel(TrainModelArgs),
    /// Generate a JSONL dataset of task instances.
    GenData(GenDataArgs),
    /// Decode a dataset, label chunks and fit the groundedness classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Decode a dataset with one decoding mode and write per-chunk logs.
    Decode(DecodeCmdArgs),
    /// Evaluate one knob over a grid.
    Sweep(SweepArgs),
    /// Evaluate several decoding variants side by side.
    Compare(CompareArgs),
    /// Train, tune and evaluate everything end to end.
    Experiment(ExperimentArgs),
}

#[derive(Debug, clap::Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Reuse a trained checkpoint instead of training.
    #[arg(long)]
    model: Option<PathBuf>,
}

fn run(cmd: Command, argv: &[String]) -> anyhow::Result<()> {
    match cmd {
        Command::TrainModel(a) => train_model(&a, argv).map(drop),
        Command::GenData(a) => gen_data(&a, argv).map(drop),
        Command::TrainClassifier(a) => train_classifier(&a, argv).map(drop),
        Command::Decode(a) => decode_cmd(&a, argv).map(drop),
        Command::Sweep(a) => sweep_cmd(&a, argv).map(drop),
        Command::Compare(a) => compare_cmd(&a, argv).map(drop),
        Command::Experiment(a) => {
            let cfg = game_cli::config::ExperimentConfig::load(a.config.config.as_deref())?;
            game_cli::experiment::run_experiment(&cfg, &a.out, a.model.as_deref())?;
            let mut m = RunManifest::new("experiment", argv, cfg.train.seed, &cfg);
            if let Some(p) = &a.model {
                m.add_input(p)?;
            }
            m.add_artifact(&a.out.join("report.json"));
            m.write(&a.out.join(MANIFEST_FILE))?;
            print!("{}", std::fs::read_to_string(a.out.join("report.txt"))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match run(cli.command, &argv) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
