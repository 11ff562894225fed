use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sdeorder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeorder")).args(args).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, "dims = 3\nn_traj = 60\nn_steps = 8\n\n[baseline]\ndpt_n_eigs = 4\n").unwrap();
    path.display().to_string()
}

#[test]
fn simulate_corrupt_retrace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let raw = dir.path().join("raw.bin").display().to_string();
    let shuffled = dir.path().join("shuffled.bin").display().to_string();
    let fixed = dir.path().join("fixed.bin").display().to_string();

    let v = json_of(&sdeorder(&["--config", &cfg, "--seed", "4", "--out", &raw, "--json", "simulate"]));
    assert_eq!(v["n_traj"], 60);
    assert_eq!(v["n_steps"], 8);
    json_of(&sdeorder(&["--seed", "4", "--out", &shuffled, "--json", "corrupt", "--in", &raw]));

    let runs: Vec<Value> = ["1", "3"]
        .iter()
        .map(|t| json_of(&sdeorder(&["--config", &cfg, "--threads", t, "--out", &fixed, "--json", "retrace", "--in", &shuffled])))
        .collect();
    for key in ["accuracy", "kendall_tau", "mae_A", "mae_H", "pairwise_error_trace"] {
        assert_eq!(runs[0][key], runs[1][key], "{key}");
    }
    let acc = runs[0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let est = json_of(&sdeorder(&["--json", "estimate", "--in", &fixed]));
    assert_eq!(est["a_hat"].as_array().unwrap().len(), 3);
}

#[test]
fn baseline_reports_errors_against_stored_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let raw = dir.path().join("raw.bin").display().to_string();
    json_of(&sdeorder(&["--config", &cfg, "--seed", "1", "--out", &raw, "--json", "simulate"]));
    let v = json_of(&sdeorder(&["--json", "baseline", "--in", &raw, "--method", "mst"]));
    assert!(v["mae_A"].as_f64().unwrap().is_finite());
}

#[test]
fn bad_usage_exits_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin").display().to_string();
    let out = sdeorder(&["estimate", "--in", &missing]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"));
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "dt = -1.0\n").unwrap();
    let out = sdeorder(&["--config", &bad.display().to_string(), "--out", &missing, "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dt"));

    assert!(!sdeorder(&["retrace"]).status.success());
}

#[test]
fn bench_then_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("bench");
    let v = json_of(&sdeorder(&[
        "--config",
        &cfg,
        "--seed",
        "2",
        "--out",
        &out_dir.display().to_string(),
        "--json",
        "bench",
    ]));
    assert_eq!(v["failures"], 0);
    let results = out_dir.join("results.csv").display().to_string();
    let m = json_of(&sdeorder(&["--json", "metrics", "--results", &results]));
    assert_eq!(m.as_array().unwrap().len(), 5);
}
