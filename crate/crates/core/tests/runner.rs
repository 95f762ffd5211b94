use std::path::Path;

use subelliptic::runner::{parse_config, run_experiment, Command, RunError, RunOptions};

fn run(cmd: Command, text: &str, dir: &Path) -> Result<subelliptic::runner::RunReport, RunError> {
    let config = parse_config(text)?;
    let opts = RunOptions { out: Some(dir.to_path_buf()), quiet: true, ..Default::default() };
    run_experiment(cmd, &config, &opts)
}

fn files(report: &subelliptic::runner::RunReport) -> Vec<String> {
    report.artifacts.iter().map(|a| a.file.clone()).collect()
}

const HEAT: &str = r#""group": {"preset": "heisenberg"}, "seed": 2, "initial": {"point": [0, 0, 0], "eps": 0.3},
    "grid": {"radii": [2, 2, 1], "cells": [16, 16, 16]}, "time": {"s": 0, "t": 0.05}"#;

#[test]
fn every_subcommand_writes_its_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| root.path().join(name);

    let r = run(Command::GroupCheck, r#"{"group": {"preset": "engel"}, "seed": 1}"#, &dir("g")).unwrap();
    assert_eq!(files(&r), ["group_check.json", "summary.txt"]);
    assert_eq!(r.values["hormander"]["min_rank"], 4);
    assert!(r.summary.contains("homogeneity: pass") && r.summary.contains("divergence-free: pass"));

    let sim = format!(r#"{{{HEAT}, "dt": 0.01, "paths": 20, "simulate": {{"sup_moment": 2}}}}"#);
    let r = run(Command::Simulate, &sim, &dir("s")).unwrap();
    assert_eq!(files(&r), ["ensemble.csv", "simulate.json", "summary.txt"]);
    let csv = std::fs::read_to_string(dir("s").join("ensemble.csv")).unwrap();
    assert!(csv.starts_with("path_id,time,x_1,x_2,x_3\n"));

    let fp = format!(r#"{{{HEAT}, "fp": {{"output_times": [0.025, 0.05], "format": "binary", "marginal": [0, 1]}}}}"#);
    let r = run(Command::FpSolve, &fp, &dir("f")).unwrap();
    for name in ["density_000.bin", "density_001.bin.json", "marginal_001.csv", "monitors.csv", "fp.json"] {
        assert!(files(&r).iter().any(|f| f == name), "{name} missing from {:?}", files(&r));
        assert!(dir("f").join(name).exists());
    }

    let fm = r#"{"group": {"preset": "heisenberg"}, "seed": 1,
        "fm": {"a": {"dirac": [0, 0, 0]}, "b": {"dirac": [1, 0, 0]}, "dump": true}}"#;
    let r = run(Command::FmDist, fm, &dir("m")).unwrap();
    let d0: f64 = r.values["d0"].as_str().unwrap().parse().unwrap();
    assert!((d0 - 2.0 / 3.0).abs() < 1e-12);
    assert!(dir("m").join("fm_problem.json").exists());

    let holder = r#"{"group": {"preset": "heisenberg"}, "seed": 3, "dt": 0.00390625, "paths": 200,
        "time": {"s": 0, "t": 1}, "initial": {"point": [0, 0, 0], "eps": 0.05}}"#;
    let r = run(Command::HolderCurve, holder, &dir("h")).unwrap();
    let curve = std::fs::read_to_string(dir("h").join("holder_curve.csv")).unwrap();
    assert!(curve.starts_with("t1,t2,d0,bound_rhs,pass\n"));
    assert_eq!(curve.lines().count(), 6);
    assert!(r.values["slope"].is_string());

    let fk = r#"{"group": {"preset": "heisenberg"}, "seed": 5, "dt": 0.01, "paths": 4000,
        "time": {"s": 0, "t": 0.5}, "initial": {"point": [0, 0, 0]},
        "feynman_kac": {"manufactured": "1 + x1^2 + x3 + s*x2", "h": {"kind": "constant", "value": -0.2}}}"#;
    let r = run(Command::FeynmanKac, fk, &dir("k")).unwrap();
    let est: f64 = r.values["estimate"].as_str().unwrap().parse().unwrap();
    let se: f64 = r.values["stderr"].as_str().unwrap().parse().unwrap();
    assert!((est - 1.0).abs() <= (4.0 * se).max(0.03), "{est} +- {se}");

    let du = format!(r#"{{{HEAT}, "dt": 0.01, "paths": 2000, "duality": {{"cells": [8, 8, 8]}}}}"#);
    let r = run(Command::CompareDuality, &du, &dir("d")).unwrap();
    assert_eq!(files(&r), ["duality.csv", "duality.json", "summary.txt"]);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir("d").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "compare-duality");
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 3);
}

#[test]
fn config_faults_map_to_exit_code_2() {
    let root = tempfile::tempdir().unwrap();
    let cases = [
        (Command::GroupCheck, r#"{"group": {"preset": "nope"}, "seed": 1}"#, "group.preset"),
        (Command::GroupCheck, r#"{"group": {"preset": "heisenberg", "file": "x.json"}, "seed": 1}"#, "group"),
        (Command::FpSolve, &format!(r#"{{{HEAT}, "fp": {{"dt": 10.0}}}}"#), "fp.dt"),
        (Command::Simulate, r#"{"group": {"preset": "heisenberg"}, "seed": 1, "paths": 0}"#, "paths"),
        (Command::FmDist, r#"{"group": {"preset": "heisenberg"}, "seed": 1, "fm": {"a": {"dirac": [0, 0]}, "b": {"dirac": [0, 0, 0]}}}"#, "fm.a"),
        (
            Command::FpSolve,
            r#"{"group": {"preset": "heisenberg"}, "seed": 1, "time": {"s": 0, "t": 1}, "grid": {"radii": [1, 1, 1], "cells": [8, 8, 8]},
               "initial": {"point": [0, 0, 0]}, "drift": {"components": [{"kind": "constant", "value": 3}, {"kind": "constant", "value": 0}], "bound": 1}}"#,
            "drift.bound",
        ),
    ];
    for (cmd, text, key) in cases {
        match run(cmd, text, root.path()) {
            Err(RunError::Config { path, .. }) => assert_eq!(path, key, "{text}"),
            other => panic!("{text}: expected a config error, got {other:?}"),
        }
    }
    assert_eq!(parse_config("{").unwrap_err().exit_code(), 2);
}

#[test]
fn seed_flag_overrides_the_config() {
    let root = tempfile::tempdir().unwrap();
    let text = r#"{"group": {"preset": "heisenberg"}, "seed": 1, "dt": 0.1, "paths": 5,
        "time": {"s": 0, "t": 0.2}, "initial": {"point": [0, 0, 0]}}"#;
    let config = parse_config(text).unwrap();
    let go = |seed: Option<u64>, name: &str| {
        let opts = RunOptions { out: Some(root.path().join(name)), seed, quiet: true, workers: Some(1) };
        run_experiment(Command::Simulate, &config, &opts).unwrap().artifacts[0].sha256.clone()
    };
    assert_eq!(go(None, "a"), go(Some(1), "b"));
    assert_ne!(go(None, "c"), go(Some(2), "d"));
}
