//! End-to-end runs of the `matern-lasso` binary on small simulated data.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matern-lasso"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn simulate(dir: &Path, out: &str, seed: &str) {
    ok(dir, &["--preset", "illustrative", "--seed", seed, "simulate", "--n", "40", "--out", out]);
}

#[test]
fn simulation_repeats_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "a.csv", "7");
    simulate(dir.path(), "b.csv", "7");
    simulate(dir.path(), "c.csv", "8");
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn replicates_go_to_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--preset", "illustrative", "simulate", "--n", "20", "--replicates", "3", "--out", "reps", "--manifest", "m.json"]);
    for r in 0..3 {
        assert!(dir.path().join(format!("reps/replicate_{r:03}.csv")).exists());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 20);
}

#[test]
fn fit_path_select_report_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "data.csv", "3");
    ok(d, &["--preset", "illustrative", "fit", "--data", "data.csv", "--lambda", "5", "--max-iter", "20", "--out", "fit.json"]);
    let fit: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["lambda"], 5.0);

    ok(d, &["--preset", "illustrative", "path", "--data", "data.csv", "--objective", "composite", "--v", "3", "--count", "3", "--max-iter", "20"]);
    ok(d, &["select", "--path", "path.json", "--params-out", "params.json"]);
    ok(d, &["report", "--path", "path.json"]);
    let report = std::fs::read_to_string(d.join("report.md")).unwrap();
    assert!(report.contains("CLIC"), "{report}");
    assert_eq!(std::fs::read_to_string(d.join("path.csv")).unwrap().lines().count(), 4);

    ok(d, &["predict", "--data", "data.csv", "--params", "params.json", "--grid", "100x100", "--neighbors", "10"]);
    let text = std::fs::read_to_string(d.join("predictions.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "variable").expect("variable column");
    let mut per_var = std::collections::BTreeMap::<String, usize>::new();
    for line in text.lines().skip(1) {
        *per_var.entry(line.split(',').nth(col).unwrap().to_string()).or_default() += 1;
    }
    assert_eq!(per_var.len(), 5);
    assert!(per_var.values().all(|&c| c == 10_000), "{per_var:?}");
}

#[test]
fn exploratory_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "data.csv", "1");
    ok(d, &["variogram", "--data", "data.csv", "--var1", "0", "--var2", "1", "--bins", "5"]);
    assert_eq!(std::fs::read_to_string(d.join("variogram.csv")).unwrap().lines().count(), 6);
    ok(d, &["transform", "--data", "data.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("scores.csv")).unwrap().lines().count(), 41);
}

#[test]
fn invalid_requests_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "data.csv", "2");
    let o = run(d, &["fit", "--data", "data.csv", "--objective", "composite", "--lambda", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    // parameters for two variables against five-variable data
    std::fs::write(
        d.join("two.toml"),
        "p = 2\nnu = 0.5\nsigma2 = [1.0, 1.0]\nalpha = [3.0, 3.0]\ntau2 = [0.0, 0.0]\nL = [1.0, 0.0, 1.0]\nDeltaB = 0.0\nRB = [1.0, 0.0, 0.0, 1.0]\n",
    )
    .unwrap();
    ok(d, &["simulate", "--params", "two.toml", "--n", "10", "--out", "two.csv"]);
    let o = run(d, &["predict", "--data", "data.csv", "--params", "two.toml", "--grid", "5x5"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
