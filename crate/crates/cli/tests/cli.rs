//! End-to-end tests of the `daqn` binary: exit codes, flag precedence, and
//! the generate → train → evaluate → interpret workflow on a tiny cohort.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_daqn"))
}

/// A complete tiny run configuration: small synthetic environment, small
/// networks, few batches, so every subcommand finishes in seconds.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
seed = 7

[synthetic]
n_episodes = 24

[synthetic.env]
severities = 3
actions_per_channel = 2
episode_len_min = 6
episode_len_max = 8
distractors = 2
init_severity_weights = [0.4, 0.4, 0.2]

[net]
blocks = 1
heads = 2
embed = 16
ff = 32
lookback = 3
hidden = 16

[train]
batches = 60
batch_size = 16
target_sync_period = 20
log_interval = 20

[ope]
n_splits = 2

[ope.behavior]
blocks = 1
heads = 2
embed = 16
ff = 32
lookback = 3
batches = 40
batch_size = 16

[interpret]
dump_episodes = 2
"#,
    )
    .expect("write config");
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn daqn");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn run_err(cmd: &mut Command, expected_code: i32) -> String {
    let out = cmd.output().expect("spawn daqn");
    assert_eq!(
        out.status.code(),
        Some(expected_code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn generate(dir: &Path, config: &Path) -> PathBuf {
    let gen = dir.join("gen");
    run_ok(bin()
        .args(["generate", "--config"])
        .arg(config)
        .arg("--out")
        .arg(&gen));
    gen
}

#[test]
fn workflow_generate_train_evaluate_interpret() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_tiny_config(dir.path());
    let gen = generate(dir.path(), &config);
    for name in ["cohort.csv", "schema.toml", "sidecar.csv", "config_echo.toml"] {
        assert!(gen.join(name).is_file(), "generate should write {name}");
    }

    // Train with a flag override: 200 batches instead of the file's 60.
    let train = dir.path().join("train");
    let out = run_ok(bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--cohort")
        .arg(gen.join("cohort.csv"))
        .arg("--schema")
        .arg(gen.join("schema.toml"))
        .arg("--out")
        .arg(&train)
        .args(["--batches", "200"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("200 batches"));
    let ckpt = train.join("checkpoints/daqn.ckpt");
    assert!(ckpt.is_file(), "training should write a checkpoint");
    let metrics =
        std::fs::read_to_string(train.join("reports/train_metrics_daqn.csv")).expect("metrics");
    // 200 batches at log_interval 20 → header plus exactly 10 rows.
    assert_eq!(metrics.lines().count(), 1 + 10);

    // Evaluate only the attention architecture over two splits.
    let eval = dir.path().join("eval");
    run_ok(bin()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--cohort")
        .arg(gen.join("cohort.csv"))
        .arg("--schema")
        .arg(gen.join("schema.toml"))
        .arg("--out")
        .arg(&eval)
        .args(["--splits", "2", "--archs", "daqn"]));
    let summary =
        std::fs::read_to_string(eval.join("reports/ope_summary.csv")).expect("summary");
    assert_eq!(
        summary.lines().next(),
        Some("policy,kind,mean_wdr,std_wdr,n_splits")
    );
    let per_split =
        std::fs::read_to_string(eval.join("reports/ope_per_split.csv")).expect("per-split");
    for policy in ["daqn", "behavior", "random"] {
        let rows = per_split
            .lines()
            .skip(1)
            .filter(|l| l.split(',').nth(1) == Some(policy))
            .count();
        assert_eq!(rows, 2, "two per-split rows for {policy}");
    }

    // Interpret the trained attention policy.
    let interp = dir.path().join("interp");
    run_ok(bin()
        .args(["interpret", "--config"])
        .arg(&config)
        .arg("--cohort")
        .arg(gen.join("cohort.csv"))
        .arg("--schema")
        .arg(gen.join("schema.toml"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&interp));
    assert!(interp.join("reports/attention_correlations.csv").is_file());
    assert!(interp.join("reports/trace_dump.csv").is_file());
    let figures = std::fs::read_dir(interp.join("figures"))
        .expect("figures dir")
        .count();
    assert_eq!(figures, 3, "one figure per marker for the single layer");
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let stderr = run_err(bin().args(["generate", "--seed", "1"]), 2);
    assert!(
        stderr.contains("output directory"),
        "stderr should say what is missing: {stderr}"
    );
}

#[test]
fn evaluate_without_checkpoint_when_retraining_disabled_is_actionable() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_tiny_config(dir.path());
    let gen = generate(dir.path(), &config);
    let stderr = run_err(
        bin()
            .args(["evaluate", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(gen.join("cohort.csv"))
            .arg("--schema")
            .arg(gen.join("schema.toml"))
            .arg("--out")
            .arg(dir.path().join("eval"))
            .args(["--retrain", "false", "--archs", "drqn-lstm"]),
        2,
    );
    assert!(stderr.contains("drqn-lstm"), "stderr: {stderr}");
    assert!(stderr.contains("evaluate.checkpoints"), "stderr: {stderr}");
}

#[test]
fn gradcheck_fault_injection_exits_nonzero_and_names_the_tensor() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("gc");
    let stderr = run_err(
        bin()
            .args(["gradcheck", "--seed", "5", "--inject-failure", "--out"])
            .arg(&out),
        1,
    );
    assert!(
        stderr.contains("fixture.corrupted_backward.w"),
        "stderr should name the failing tensor: {stderr}"
    );
    let report = std::fs::read_to_string(out.join("reports/gradcheck.txt")).expect("report");
    assert!(report.contains("FAILED"));
    // The report still lists every healthy tensor alongside the corrupted one.
    for needle in ["matmul", "daqn.", "dqn-mlp.", "drqn-lstm."] {
        assert!(report.contains(needle), "report should mention {needle}");
    }
}

#[test]
fn interpret_on_a_memoryless_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = write_tiny_config(dir.path());
    let gen = generate(dir.path(), &config);
    let train = dir.path().join("train");
    run_ok(bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--cohort")
        .arg(gen.join("cohort.csv"))
        .arg("--schema")
        .arg(gen.join("schema.toml"))
        .arg("--out")
        .arg(&train)
        .args(["--arch", "dqn-mlp"]));
    let stderr = run_err(
        bin()
            .args(["interpret", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(gen.join("cohort.csv"))
            .arg("--schema")
            .arg(gen.join("schema.toml"))
            .arg("--checkpoint")
            .arg(train.join("checkpoints/dqn-mlp.ckpt"))
            .arg("--out")
            .arg(dir.path().join("interp")),
        1,
    );
    assert!(stderr.contains("dqn-mlp"), "stderr: {stderr}");
}

#[test]
fn bad_flags_and_unknown_subcommands_are_usage_errors() {
    run_err(bin().arg("trane"), 2);
    run_err(bin().args(["train", "--batches", "many"]), 2);
    run_err(bin().args(["evaluate", "--retrain", "maybe"]), 2);
}
