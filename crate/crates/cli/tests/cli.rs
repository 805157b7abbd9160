use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn subtype(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subtype"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path, command: &str) -> Value {
    let text = std::fs::read_to_string(dir.join(format!("manifest-{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap()
}

fn simulate(dir: &Path, n_eyes: usize) {
    let out = subtype(&[
        "simulate",
        "--n-eyes",
        &n_eyes.to_string(),
        "--seed",
        "3",
        "--out",
        path(dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn fit(dir: &Path, classes: usize) {
    let d = path(dir);
    let out = subtype(&[
        "fit",
        "--data",
        d,
        "--classes",
        &classes.to_string(),
        "--starts",
        "2",
        "--seed",
        "3",
        "--out",
        d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_is_a_usage_error_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = subtype(&["fit", "--data", path(&missing), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["exit_code"], 2);
    assert_eq!(err["error"]["kind"], "usage");
    let m = manifest(dir.path(), "fit");
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["kind"], "usage");
}

#[test]
fn unknown_subcommand_exits_with_usage_code() {
    let out = subtype(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_trajectory_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 40);
    std::fs::write(
        dir.path().join("trajectories.csv"),
        "eye_id,subject_id,time\nE1,S1,zero\n",
    )
    .unwrap();
    let out = subtype(&["fit", "--data", path(dir.path()), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_line(&out)["error"]["kind"], "data");
    assert_eq!(manifest(dir.path(), "fit")["status"], "error");
}

#[test]
fn fit_from_another_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 60);
    fit(dir.path(), 2);
    let fit_path = dir.path().join("fit.json");
    let mut value: Value = serde_json::from_str(&std::fs::read_to_string(&fit_path).unwrap()).unwrap();
    value["version"] = Value::from("0.0.0-old");
    std::fs::write(&fit_path, serde_json::to_string(&value).unwrap()).unwrap();
    let d = path(dir.path());
    let out = subtype(&["survival", "--data", d, "--fit", path(&fit_path), "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("version"));
}

#[test]
fn manifest_records_digests_of_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 60);
    let m = manifest(dir.path(), "simulate");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    let outputs = m["outputs"].as_object().unwrap();
    for name in ["trajectories.csv", "covariates.csv", "events.csv", "true_labels.csv"] {
        let digest = outputs[name].as_str().unwrap();
        assert_eq!(digest.len(), 64);
        assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    }
    fit(dir.path(), 2);
    let m = manifest(dir.path(), "fit");
    let inputs: Vec<&str> = m["inputs"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(inputs.contains(&outputs["trajectories.csv"].as_str().unwrap()));
}

#[test]
fn single_class_report_has_no_entropy_line() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 60);
    fit(dir.path(), 1);
    let d = path(dir.path());
    let report_dir = dir.path().join("report");
    let out = subtype(&["report", "--run", d, "--out", path(&report_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(report_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("1 class (identity link)"));
    assert!(!summary.to_lowercase().contains("entropy"));
}

#[test]
fn select_writes_one_row_per_class_count() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 80);
    let d = path(dir.path());
    let out = subtype(&[
        "select",
        "--data",
        d,
        "--g-range",
        "1-2",
        "--starts",
        "2",
        "--seed",
        "1",
        "--out",
        d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("selection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn zero_threads_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = subtype(&["simulate", "--threads", "0", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}
