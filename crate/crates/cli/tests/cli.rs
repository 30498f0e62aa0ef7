use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use game_cli::manifest::RunManifest;

const TINY: &str = r#"
[model]
num_layers = 1
num_heads = 2
model_dim = 16

[train]
steps = 600
batch_size = 16
warmup_steps = 10
learning_rate = 0.003

[corpus]
size = 2000

[classifier]
instances = 80

[decode]
max_new_tokens = 12
chunk_size = 4
"#;

fn game(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_game")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Model, data and classifier produced once through the binary and shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    model: PathBuf,
    data: PathBuf,
    classifier: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let mdir = root.join("model");
        ok(game(&["train-model", "--config", s(&config), "--out", s(&mdir)]));
        let data = root.join("data/eval.jsonl");
        ok(game(&["gen-data", "--config", s(&config), "--task", "kv", "--size", "40", "--seed", "9", "--out", s(&data)]));
        let cdir = root.join("clf");
        ok(game(&[
            "train-classifier",
            "--config",
            s(&config),
            "--model",
            s(&mdir.join("model.ckpt")),
            "--data",
            s(&data),
            "--out",
            s(&cdir),
        ]));
        Fixture {
            model: mdir.join("model.ckpt"),
            classifier: cdir.join("classifier.json"),
            _dir: dir,
            root,
            config,
            data,
        }
    })
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&game(&["no-such-command"])), 1);
    assert_eq!(code(&game(&["decode", "--model"])), 1);
    assert_eq!(code(&game(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[decode]\netta = 1.0\n").unwrap();
    let o = game(&["gen-data", "--config", s(&bad), "--task", "kv", "--size", "3", "--seed", "1", "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("etta"));
}

#[test]
fn data_errors_exit_with_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": 1}\n").unwrap();
    let out = dir.path().join("out");
    let o = game(&["decode", "--config", s(&f.config), "--model", s(&f.model), "--data", s(&broken), "--out", s(&out), "--mode", "baseline"]);
    assert_eq!(code(&o), 2);
    let o = game(&[
        "decode",
        "--config",
        s(&f.config),
        "--model",
        s(&dir.path().join("missing.ckpt")),
        "--data",
        s(&f.data),
        "--out",
        s(&out),
        "--mode",
        "baseline",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn guided_decoding_requires_a_classifier() {
    let f = fixture();
    let out = f.root.join("needs-clf");
    let o = game(&["decode", "--config", s(&f.config), "--model", s(&f.model), "--data", s(&f.data), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn decode_logs_are_byte_identical_across_reruns() {
    let f = fixture();
    for mode in ["baseline", "game", "best-of-k"] {
        let mut logs = Vec::new();
        for rep in 0..2 {
            let out = f.root.join(format!("rerun-{mode}-{rep}"));
            ok(game(&[
                "decode",
                "--config",
                s(&f.config),
                "--model",
                s(&f.model),
                "--classifier",
                s(&f.classifier),
                "--data",
                s(&f.data),
                "--out",
                s(&out),
                "--mode",
                mode,
                "--k",
                "3",
            ]));
            logs.push(std::fs::read(out.join("runs.jsonl")).unwrap());
        }
        assert!(!logs[0].is_empty());
        assert_eq!(logs[0], logs[1], "mode {mode}");
    }
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let f = fixture();
    let cfg = f.root.join("eta.toml");
    std::fs::write(&cfg, format!("{TINY}eta = 0.5\n")).unwrap();
    let run = |config: &Path, extra: &[&str], tag: &str| {
        let out = f.root.join(format!("prec-{tag}"));
        let mut args = vec!["decode", "--config", s(config), "--model", s(&f.model), "--classifier", s(&f.classifier)];
        args.extend(["--data", s(&f.data), "--out", s(&out), "--limit", "2"]);
        args.extend(extra);
        ok(game(&args));
        RunManifest::read(&out.join("manifest.json")).unwrap()
    };
    assert_eq!(run(&f.config, &[], "default").config.decode.eta, 1.0);
    assert_eq!(run(&cfg, &[], "file").config.decode.eta, 0.5);
    let m = run(&cfg, &["--eta", "1.5"], "flag");
    assert_eq!(m.config.decode.eta, 1.5);
    assert_eq!(m.config.decode.chunk_size, 4);
    assert!(m.stale_inputs().is_empty());
    assert_eq!(m.inputs.len(), 3);
}

#[test]
fn zero_intensity_sweep_point_equals_baseline() {
    let f = fixture();
    let base_out = f.root.join("sweep-base");
    ok(game(&[
        "decode",
        "--config",
        s(&f.config),
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--out",
        s(&base_out),
        "--mode",
        "baseline",
    ]));
    let sweep_out = f.root.join("sweep");
    ok(game(&[
        "sweep",
        "--config",
        s(&f.config),
        "--model",
        s(&f.model),
        "--classifier",
        s(&f.classifier),
        "--data",
        s(&f.data),
        "--out",
        s(&sweep_out),
        "--axis",
        "eta",
        "--grid",
        "0,1",
    ]));
    let mut base = csv::Reader::from_path(base_out.join("metrics.csv")).unwrap();
    let base_em: f64 = base.records().next().unwrap().unwrap()[2].parse().unwrap();
    let mut sweep = csv::Reader::from_path(sweep_out.join("sweep_eta.csv")).unwrap();
    let first = sweep.records().next().unwrap().unwrap();
    assert_eq!(&first[0], "0");
    assert_eq!(first[1].parse::<f64>().unwrap(), base_em);
    assert!(sweep_out.join("sweep_eta.svg").exists());
}

#[test]
fn training_and_classifier_outputs_are_complete() {
    let f = fixture();
    let mdir = f.model.parent().unwrap();
    let curve = std::fs::read_to_string(mdir.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 601);
    let m = RunManifest::read(&mdir.join("manifest.json")).unwrap();
    assert_eq!(m.command, "train-model");
    assert_eq!(m.config.train.steps, 600);
    let cdir = f.classifier.parent().unwrap();
    for file in ["classifier.json", "features.csv", "labels.csv", "report.json", "manifest.json"] {
        assert!(cdir.join(file).exists(), "{file}");
    }
    let header = std::fs::read_to_string(cdir.join("features.csv")).unwrap();
    assert!(header.starts_with("run_id,chunk,start,end,l0h0,l0h1\n"));
    let compare = f.root.join("compare");
    ok(game(&[
        "compare",
        "--config",
        s(&f.config),
        "--model",
        s(&f.model),
        "--classifier",
        s(&f.classifier),
        "--data",
        s(&f.data),
        "--out",
        s(&compare),
        "--variants",
        "baseline,game:decay,game:uniform:no-direction",
    ]));
    let table = std::fs::read_to_string(compare.join("compare.txt")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.contains("game:uniform:no-direction"));
}
