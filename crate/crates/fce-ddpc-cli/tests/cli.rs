//! End-to-end tests of the command-line interface: exit codes, file
//! artifacts, determinism, and the JSON summary contract.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_fce-ddpc");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("the binary must spawn")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_deterministic_and_reports_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", "{}");
    let a = run(dir.path(), &["simulate", "--config", &cfg, "--out", "a.csv", "--seed", "42"]);
    let b = run(dir.path(), &["simulate", "--config", &cfg, "--out", "b.csv", "--seed", "42"]);
    assert!(a.status.success(), "stderr: {}", stderr_of(&a));
    assert!(b.status.success());
    let text_a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let text_b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(text_a, text_b, "same seed must give byte-identical datasets");
    assert_eq!(String::from_utf8(text_a).unwrap().lines().count(), 251, "header plus 250 rows");
    let msg = stdout_of(&a);
    assert!(msg.contains("seed 42"), "stdout: {msg}");
    assert!(msg.contains("SNR"), "stdout: {msg}");
}

#[test]
fn fit_selects_an_order_and_saves_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", "{}");
    let sim = run(dir.path(), &["simulate", "--config", &cfg, "--out", "data.csv"]);
    assert!(sim.status.success(), "stderr: {}", stderr_of(&sim));
    let fit =
        run(dir.path(), &["fit", "--config", &cfg, "--data", "data.csv", "--out", "model.json"]);
    assert!(fit.status.success(), "stderr: {}", stderr_of(&fit));
    assert!(stdout_of(&fit).contains("order"), "stdout: {}", stdout_of(&fit));

    let model = read_json(&dir.path().join("model.json"));
    let rho = model["rho"].as_u64().unwrap();
    assert!((1..=6).contains(&rho), "selected order {rho} must lie in the search range");
    assert!(model["sigma2_hat"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_config_exits_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["simulate", "--config", "nope.json", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("config not found"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"t_vee": 100}"#);
    let out = run(dir.path(), &["simulate", "--config", &cfg, "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("config schema violation"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_flags_exit_with_the_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["bench", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn noise_free_oracle_settles_on_a_constant_reference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"sigma2": 0.0, "rho": 4, "t_v": 120,
            "reference": {"kind": "constant", "value": 0.01},
            "scheme": {"kind": "mpc-oracle"}}"#,
    );
    let sim = run(dir.path(), &["simulate", "--config", &cfg, "--out", "data.csv"]);
    assert!(sim.status.success(), "stderr: {}", stderr_of(&sim));
    assert!(stdout_of(&sim).contains("noise-free"), "stdout: {}", stdout_of(&sim));
    let ctl = run(dir.path(), &["control", "--config", &cfg, "--data", "data.csv", "--out", "ep"]);
    assert!(ctl.status.success(), "stderr: {}", stderr_of(&ctl));

    let summary = read_json(&dir.path().join("ep/summary.json"));
    assert_eq!(summary["scheme"], "mpc-oracle");
    assert_eq!(summary["unstable"], Value::Bool(false));
    assert!(summary["j_a"].as_f64().unwrap().is_finite());

    let logs = std::fs::read_to_string(dir.path().join("ep/logs.csv")).unwrap();
    let last = logs.lines().last().unwrap();
    let y: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
    assert!(
        (y - 0.01).abs() < 1e-6,
        "the noise-free loop must settle on the reference, final y = {y}"
    );
}

#[test]
fn noise_free_oracle_at_rest_has_vanishing_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"sigma2": 0.0, "rho": 4, "t_v": 120,
            "reference": {"kind": "constant", "value": 0.0},
            "scheme": {"kind": "mpc-oracle"}}"#,
    );
    let mut csv = String::from("m=1,p=1\n");
    for _ in 0..250 {
        csv.push_str("0,0\n");
    }
    std::fs::write(dir.path().join("rest.csv"), csv).unwrap();

    let ctl = run(dir.path(), &["control", "--config", &cfg, "--data", "rest.csv", "--out", "ep"]);
    assert!(ctl.status.success(), "stderr: {}", stderr_of(&ctl));
    let summary = read_json(&dir.path().join("ep/summary.json"));
    let j_a = summary["j_a"].as_f64().unwrap();
    assert!(j_a < 1e-6, "an at-rest loop with a zero reference must stay at rest, J_a = {j_a}");
}

#[test]
fn fce_episode_writes_the_split_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", r#"{"t_v": 500, "scheme": {"kind": "fce"}}"#);
    let sim = run(dir.path(), &["simulate", "--config", &cfg, "--out", "data.csv"]);
    assert!(sim.status.success(), "stderr: {}", stderr_of(&sim));
    let ctl = run(dir.path(), &["control", "--config", &cfg, "--data", "data.csv", "--out", "ep"]);
    assert!(ctl.status.success(), "stderr: {}", stderr_of(&ctl));

    let summary = read_json(&dir.path().join("ep/summary.json"));
    assert_eq!(summary["scheme"], "fce");
    let j_a = summary["j_a"].as_f64().unwrap();
    assert!(j_a.is_finite() && j_a > 0.0);
    let steps = summary["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 500, "one split entry per closed-loop step");
    for step in steps {
        let j = step["j"].as_f64().unwrap();
        let r = step["r"].as_f64().unwrap();
        assert!(j.is_finite() && j >= 0.0, "tracking term must be a finite square, got {j}");
        assert!(r > 0.0, "the variance term is strictly positive under noise, got {r}");
    }
    assert_eq!(
        std::fs::read_to_string(dir.path().join("ep/logs.csv")).unwrap().lines().count(),
        501,
        "header plus one row per step"
    );
}

#[test]
fn unstable_episodes_flag_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"t_v": 500, "reference": {"kind": "multilevel"}, "scheme": {"kind": "gamma3"}}"#,
    );
    let sim =
        run(dir.path(), &["simulate", "--config", &cfg, "--out", "data.csv", "--seed", "1002"]);
    assert!(sim.status.success(), "stderr: {}", stderr_of(&sim));
    let ctl = run(
        dir.path(),
        &["control", "--config", &cfg, "--data", "data.csv", "--out", "ep", "--seed", "1002"],
    );
    assert!(ctl.status.success(), "instability is an outcome, not an error: {}", stderr_of(&ctl));
    assert!(stdout_of(&ctl).contains("unstable"), "stdout: {}", stdout_of(&ctl));

    let summary = read_json(&dir.path().join("ep/summary.json"));
    assert_eq!(summary["unstable"], Value::Bool(true));
    assert_eq!(summary["j_a"], Value::Null, "the sentinel serializes as null");
}

#[test]
fn bench_writes_reproducible_reports_and_honors_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"setup": 2, "t_v": 120, "schemes": [{"kind": "mpc-oracle"}]}"#,
    );
    let args = ["bench", "--config", &cfg, "--out", "first", "--runs", "2", "--seed", "777"];
    let first = run(dir.path(), &args);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));

    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("first"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["report.json", "samples_mpc-oracle.csv", "timing.csv"]);

    let report = read_json(&dir.path().join("first/report.json"));
    assert_eq!(report["n_runs"], 2, "--runs override must land in the report");
    assert_eq!(report["base_seed"], 777, "--seed override must land in the report");
    let schemes = report["schemes"].as_array().unwrap();
    assert_eq!(schemes.len(), 1);
    assert_eq!(schemes[0]["name"], "mpc-oracle");
    let samples = schemes[0]["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.as_f64().is_some_and(f64::is_finite)));

    let mut again = args;
    again[4] = "second";
    let second = run(dir.path(), &again);
    assert!(second.status.success(), "stderr: {}", stderr_of(&second));
    assert_eq!(
        std::fs::read(dir.path().join("first/report.json")).unwrap(),
        std::fs::read(dir.path().join("second/report.json")).unwrap(),
        "the report must be a pure function of the configuration"
    );

    let shown = run(dir.path(), &["report", "first/report.json"]);
    assert!(shown.status.success(), "stderr: {}", stderr_of(&shown));
    let table = stdout_of(&shown);
    assert!(table.contains("mpc-oracle"), "stdout: {table}");
    assert!(table.contains("median"), "stdout: {table}");
}

#[test]
fn bench_rejects_fixed_parameters_in_the_roster() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "run.json", r#"{"schemes": [{"kind": "gamma2", "beta2": 0.1}]}"#);
    let out = run(dir.path(), &["bench", "--config", &cfg, "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("grid search"), "stderr: {}", stderr_of(&out));
}
