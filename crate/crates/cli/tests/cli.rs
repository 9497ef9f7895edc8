//! End-to-end runs of the `semicontrast` binary: exit codes, error lines
//! and the outputs of the quick commands.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[dataset]
resolution = 16
[dataset.synthetic]
num_volumes = 10
slices_per_volume = 2
resolution = 16
num_foreground_classes = 2
noise = 0.3
block_size = 8
[model]
encoder_blocks = 2
decoder_blocks = 2
base_channels = 4
num_classes = 3
projection_dim = 8
local_head_channels = 4
[losses]
block_size = 8
[stages.global]
epochs = 1
batch_pairs = 2
slices_per_epoch = 4
[stages.local]
epochs = 1
batch_pairs = 2
slices_per_epoch = 4
[stages.finetune]
epochs = 1
batch_size = 4
slices_per_epoch = 4
[experiment]
label_fractions = [0.5]
variants = ["random", "global+local(block)"]
folds = 2
embedding_cap = 10
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_semicontrast"));
    c.env_remove("SEMICONTRAST_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("output_dir = {:?}\n{TINY}", dir.join("out").display().to_string())).unwrap();
    path.display().to_string()
}

/// The single JSON error line on stderr.
fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON line ({e}): {text}"))
}

#[test]
fn verify_losses_passes() {
    let o = run(&["verify-losses"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("oracle: 100/100"), "{out}");
    assert_eq!(out.lines().count(), 7);
    for line in out.lines() {
        let (name, rest) = line.split_once(": ").unwrap();
        let (done, total) = rest.split_whitespace().next().unwrap().split_once('/').unwrap();
        assert_eq!(done, total, "{name}");
    }
}

#[test]
fn usage_errors_exit_1() {
    for args in [&["no-such-command"][..], &["pretrain-local", "--strategy", "nope"], &[]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert_eq!(error_json(&o)["kind"], "usage");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let o = run(&["--set", "losses.tau=0", "verify-losses"]);
    assert_eq!(o.status.code(), Some(2));
    let j = error_json(&o);
    assert_eq!(j["code"], 2);
    assert_eq!(j["key"], "losses.tau");

    let o = run(&["--config", "/nonexistent/cfg.toml", "verify-losses"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["key"], "config");
}

#[test]
fn plot_without_artifacts_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["plot", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let j = error_json(&o);
    assert_eq!(j["kind"], "runtime");
    assert!(j["message"].as_str().unwrap().contains("config.toml"));
}

#[test]
fn gen_data_writes_every_volume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("corpus");
    let o = run(&["--config", &cfg, "gen-data", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 10);
}

#[test]
fn bench_complexity_prints_counts() {
    let o = run(&["bench-complexity", "--sides", "16", "--time-up-to", "0"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("strategy\th\tparam\tcount\twall_time"));
    let full: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(full[0], "full");
    assert_eq!(full[3], (512u64 * 511).to_string());
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let out = String::from_utf8(o.stdout).unwrap();
        let (path, hash) = out.trim().split_once('\t').unwrap();
        assert_eq!(hash.len(), 64);
        path.to_string()
    };
    let global = ok(run(&["--config", &cfg, "pretrain-global"]));
    assert!(global.ends_with("fold0/global/checkpoint.ckpt"));
    let local = ok(run(&["--config", &cfg, "pretrain-local", "--strategy", "block", "--init", &global]));
    let tuned = ok(run(&["--config", &cfg, "finetune", "--init", &local]));

    let emb = dir.path().join("emb.tsv");
    let o = run(&["--config", &cfg, "evaluate", "--checkpoint", &tuned, "--embeddings", emb.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(j["per_class_dice"].as_array().unwrap().len(), 2);
    assert!(emb.is_file());

    let o = run(&["--config", &cfg, "pretrain-global", "--fold", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_matrix_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let root = dir.path().join("env_root");
    let o = bin().args(["--config", &cfg, "run-matrix"]).env("SEMICONTRAST_OUTPUT_ROOT", &root).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("global+local(block)"));
    assert!(root.join("summary.tsv").is_file());

    let o = run(&["--config", &cfg, "plot", "--dir", root.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("plots/dice_bars.svg").is_file());
    assert!(root.join("plots/overlay.png").is_file());
}
