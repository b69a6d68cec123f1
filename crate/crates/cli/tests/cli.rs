//! End-to-end tests of the `trip` binary: the synth -> train -> detect ->
//! eval workflow, rerun determinism, error exit codes, and the ablation and
//! benchmark grids.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_trip")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "model.window = 16\n\
         model.stride = 1\n\
         model.patch_sizes = 4,8\n\
         model.d = 3\n\
         model.d_prime = 6\n\
         model.global_hidden = 4\n\
         backbone.kind = pretrained_frozen\n\
         backbone.d_model = 8\n\
         backbone.layers = 1\n\
         backbone.heads = 2\n\
         train.lr = 0.002\n\
         train.epochs = 1\n\
         train.batch_size = 8\n\
         train.seed = 5\n\
         data.window_stride = 3\n\
         synth.length = 240\n\
         synth.channels = 2\n\
         synth.spikes = 60:2:8\n\
         synth.shifts = 150:15:4\n",
    )
    .unwrap();
    path
}

#[test]
fn full_workflow_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);

    run_ok(&["synth", "--config", "run.conf", "--out", "synth_out"], d);
    assert!(d.join("synth_out/manifest.txt").exists());
    assert!(d.join("synth_out/values.csv").exists());
    assert!(d.join("synth_out/labels.csv").exists());

    run_ok(
        &[
            "train",
            "--config",
            "run.conf",
            "--set",
            "data.values_path=synth_out/values.csv",
            "--out",
            "train_out",
        ],
        d,
    );
    assert!(d.join("train_out/model.ckpt").exists());
    assert!(d.join("train_out/loss_history.csv").exists());

    let detect_args = [
        "detect",
        "--config",
        "run.conf",
        "--set",
        "detect.checkpoint=train_out/model.ckpt",
        "--set",
        "data.values_path=synth_out/values.csv",
        "--set",
        "data.labels_path=synth_out/labels.csv",
    ];
    let mut a1 = detect_args.to_vec();
    a1.extend_from_slice(&["--out", "detect_a"]);
    run_ok(&a1, d);
    let mut a2 = detect_args.to_vec();
    a2.extend_from_slice(&["--out", "detect_b"]);
    run_ok(&a2, d);
    let s1 = std::fs::read(d.join("detect_a/scores.csv")).unwrap();
    let s2 = std::fs::read(d.join("detect_b/scores.csv")).unwrap();
    assert_eq!(s1, s2, "identical manifests must produce identical scores");

    run_ok(
        &[
            "eval",
            "--config",
            "run.conf",
            "--set",
            "eval.scores_path=detect_a/scores.csv",
            "--out",
            "eval_out",
        ],
        d,
    );
    let report = std::fs::read_to_string(d.join("eval_out/report.txt")).unwrap();
    // The injected anomalies are strong: the smoke model must separate them.
    let auc_line = report.lines().find(|l| l.starts_with("auc_roc")).unwrap();
    let auc: f64 = auc_line.split('=').nth(1).unwrap().trim().parse().unwrap();
    assert!(auc > 0.9, "workflow smoke detection too weak: {report}");
}

#[test]
fn unknown_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let out = run(
        &["synth", "--config", "run.conf", "--set", "mode.typo=1", "--out", "o"],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mode.typo"), "stderr must name the key: {stderr}");
}

#[test]
fn missing_required_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let out = run(&["train", "--config", "run.conf", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.values_path"));
}

#[test]
fn runtime_failure_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let out = run(
        &[
            "train",
            "--config",
            "run.conf",
            "--set",
            "data.values_path=missing.csv",
            "--out",
            "o",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn manifest_written_before_results_and_contains_run_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    run_ok(&["synth", "--config", "run.conf", "--seed", "99", "--out", "s"], d);
    let manifest = std::fs::read_to_string(d.join("s/manifest.txt")).unwrap();
    assert!(manifest.contains("run.command = synth"));
    assert!(manifest.contains("run.seed = 99"));
    assert!(manifest.contains("run.code_version ="));
    assert!(manifest.contains("synth.length = 240"));
}

#[test]
fn ablate_emits_nine_distinct_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    run_ok(
        &[
            "ablate",
            "--config",
            "run.conf",
            "--set",
            "data.window_stride=6",
            "--out",
            "ab",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 10, "header + 9 variants: {csv}");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        vec![
            "TriP-LLM",
            "w/o Selection",
            "w/o Patching",
            "w/o Global",
            "Base LLM",
            "Seq-decoder",
            "Remove LLM",
            "LLM2Trans",
            "LLM2Atten"
        ]
    );
    // score columns differ across variants
    let mut rows: Vec<&str> = lines[1..].to_vec();
    rows.sort_unstable();
    rows.dedup();
    assert_eq!(rows.len(), 9, "variant rows must be pairwise distinct");
}

#[test]
fn membench_grid_shows_channel_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    run_ok(
        &[
            "membench",
            "--config",
            "run.conf",
            "--set",
            "bench.batch_sizes=2",
            "--set",
            "bench.channels=2,6",
            "--set",
            "bench.patch_sizes=4",
            "--out",
            "mb",
        ],
        d,
    );
    let csv = std::fs::read_to_string(d.join("mb/membench.csv")).unwrap();
    let mut ci_tokens = Vec::new();
    let mut trip_tokens = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let mode = cols[4];
        let total: usize = cols[7].parse().unwrap();
        let measured: u64 = cols[9].parse().unwrap();
        assert!(measured > 0, "CLI binary must have the allocator hook");
        if mode == "CI" {
            ci_tokens.push(total);
        } else {
            trip_tokens.push(total);
        }
    }
    // CI totals scale with the channel count; patch-token totals do not.
    assert_eq!(ci_tokens.len(), 2);
    assert_eq!(ci_tokens[1], 3 * ci_tokens[0]);
    assert_eq!(trip_tokens[0], trip_tokens[1]);
}
