//! End-to-end runs of the `scoreuq` binary.

use std::path::Path;
use std::process::Command;

use scoreuq::io::{RunManifest, MANIFEST_NAME};

fn run(command: &str, config: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scoreuq"))
        .arg(command)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("SCOREUQ_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn manifest(out: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(out.join(MANIFEST_NAME)).unwrap()).unwrap()
}

fn hashes(out: &Path) -> Vec<(String, String)> {
    manifest(out).files.into_iter().map(|f| (f.path, f.sha256)).collect()
}

const SMALL_SCHEDULE: &str = r#""schedule": {"timesteps": 100}"#;

fn sample_config() -> String {
    format!(
        r#"{{"command": "sample", "data": {{"benchmark": {{"dim": 3}}}}, "predictor": "exact",
            {SMALL_SCHEDULE}, "sampler": {{"steps": 20}}, "count": 40,
            "uncertainty": {{"samples": 3}}, "trajectories": 1, "seed": 5}}"#
    )
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        ("sample", r#"{"command": "sample", "predictor": "exact", "data": {"benchmark": {"dim": 2}}, "strength": 1.0}"#),
        ("sample", r#"{"command": "sample", "predictor": "exact", "data": {"benchmark": {"dim": 2}}, "guidance": {}}"#),
        ("guide", r#"{"command": "sample", "predictor": "exact", "data": {"benchmark": {"dim": 2}}}"#),
        ("sample", r#"{"command": "sample", "predictor": "exact"}"#),
        ("sample", r#"{"command": "sample", "predictor": "exact", "data": {"benchmark": {"dim": 2}}, "sampler": {"steps": 0}}"#),
        ("teleport", r#"{"command": "teleport"}"#),
        ("sample", "not json"),
    ];
    for (i, (command, json)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), json);
        let o = run(command, &cfg, &out, &[]);
        assert_eq!(code(&o), 1, "case {i}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run("sample", &dir.path().join("missing.json"), &out, &[]);
    assert_eq!(code(&o), 3);
    let o = Command::new(env!("CARGO_BIN_EXE_scoreuq")).arg("sample").output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn failed_identity_check_is_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "id.json",
        r#"{"command": "verify-identity", "data": {"gmm": {"weights": [1.0], "means": [[0.0]], "variances": [[1.0]]}},
            "timesteps": [10], "samples": 1000, "max_z": 0.0}"#,
    );
    let o = run("verify-identity", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn identity_on_standard_normal_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "id.json",
        r#"{"command": "verify-identity", "data": {"gmm": {"weights": [1.0], "means": [[0.0, 0.0]], "variances": [[1.0, 1.0]]}},
            "timesteps": [1, 500, 1000], "samples": 100000}"#,
    );
    let out = dir.path().join("out");
    let o = run("verify-identity", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("identity.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let cols: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[2] - cols[3]).abs() < 0.02, "{row}");
    }
    assert!(manifest(&out).verify(&out).unwrap());
}

#[test]
fn outputs_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", &sample_config());
    let max = std::thread::available_parallelism().map_or(1, |n| n.get()).to_string();
    let mut reference = None;
    for (i, threads) in ["1", "4", max.as_str(), "1"].iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        let o = run("sample", &cfg, &out, &["--threads", threads]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let h = hashes(&out);
        assert!(h.iter().any(|(p, _)| p == "samples.udt"));
        assert!(h.iter().any(|(p, _)| p.starts_with("trajectories/0000/")));
        match &reference {
            None => reference = Some(h),
            Some(r) => assert_eq!(&h, r, "threads={threads}"),
        }
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", &sample_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run("sample", &cfg, &a, &["--seed", "5"])), 0);
    assert_eq!(code(&run("sample", &cfg, &b, &["--seed", "6"])), 0);
    assert_eq!(manifest(&b).root_seed, 6);
    let ha = hashes(&a);
    let hb = hashes(&b);
    let get = |h: &[(String, String)]| h.iter().find(|(p, _)| p == "samples.udt").unwrap().1.clone();
    assert_ne!(get(&ha), get(&hb));
}

#[test]
fn every_command_runs_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bench = r#"{"benchmark": {"dim": 4}}"#;
    let model = dir.path().join("model");
    let configs = [
        (
            "train",
            format!(
                r#"{{"command": "train", "data": {bench}, {SMALL_SCHEDULE}, "train_samples": 200,
                    "mlp": {{"hidden": [8], "epochs": 2}}}}"#
            ),
            model.clone(),
        ),
        (
            "guide",
            format!(
                r#"{{"command": "guide", "data": {bench}, "predictor": {{"model": "model"}}, {SMALL_SCHEDULE},
                    "sampler": {{"steps": 10}}, "count": 8, "calibrate": 6,
                    "guidance": {{"samples": 3, "window": [0.5, 1.0]}}, "image_shape": [2, 2], "images": 1}}"#
            ),
            dir.path().join("guide"),
        ),
        (
            "filter-eval",
            format!(
                r#"{{"command": "filter-eval", "data": {bench}, "predictor": "exact", {SMALL_SCHEDULE},
                    "sampler": {{"steps": 10, "kind": "ddim"}}, "pool": 12, "keep": 10, "reference": 20,
                    "uncertainty": {{"samples": 2, "window": [0.5, 1.0]}}}}"#
            ),
            dir.path().join("filter"),
        ),
        (
            "sparsify-eval",
            format!(
                r#"{{"command": "sparsify-eval", "data": {bench}, "predictor": "exact", {SMALL_SCHEDULE},
                    "steps": 10, "test_count": 3, "uncertainty": {{"samples": 2, "window": [0.5, 1.0]}},
                    "mc_dropout": {{"model": "model", "passes": 3}}, "image_shape": [2, 2], "images": 1}}"#
            ),
            dir.path().join("sparsify"),
        ),
        (
            "profile",
            format!(
                r#"{{"command": "profile", "data": {bench}, "predictor": "exact", {SMALL_SCHEDULE},
                    "sampler": {{"steps": 10}}, "count": 5, "uncertainty": {{"samples": 2}}}}"#
            ),
            dir.path().join("profile"),
        ),
        (
            "bench",
            format!(
                r#"{{"command": "bench", "data": {bench}, "predictor": "exact", {SMALL_SCHEDULE},
                    "sampler": {{"steps": 10}}, "count": 4, "samples": [2, 3]}}"#
            ),
            dir.path().join("bench"),
        ),
    ];
    for (command, json, out) in &configs {
        let cfg = write_config(dir.path(), &format!("{command}.json"), json);
        let o = run(command, &cfg, out, &[]);
        assert_eq!(code(&o), 0, "{command}: {}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(out);
        assert_eq!(m.command, *command);
        assert!(!m.files.is_empty());
        assert!(m.verify(out).unwrap(), "{command}");
    }
    let filter = std::fs::read_to_string(dir.path().join("filter/filter.csv")).unwrap();
    assert_eq!(filter.lines().count(), 4);
    let summary = std::fs::read_to_string(dir.path().join("sparsify/summary.csv")).unwrap();
    assert!(summary.contains("mc_dropout"));
    let bench = std::fs::read_to_string(dir.path().join("bench/bench.csv")).unwrap();
    let nfe: Vec<&str> = bench.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    // 10 plan steps; window [0.9, 0.96] of 10 steps covers step 9 only.
    assert_eq!(nfe, ["10", "12", "13"]);
}
