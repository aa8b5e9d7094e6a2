use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn model(name: &str) -> String {
    models().join(format!("{name}.json")).display().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmp-avgctl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Copy of a bundled model with `edit` applied to its JSON.
fn edited(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> String {
    let mut v = read_json(&models().join(format!("{name}.json")));
    edit(&mut v);
    let path = dir.join(format!("{name}-edited.json"));
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn validate_bundled_toy() {
    let out = run(&["validate", "--model", &model("ctmdp_toy")]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).starts_with("ok:"));
}

#[test]
fn validate_corrupted_kernel_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "ctmdp_toy", |v| {
        v["kernel"][1][0] = serde_json::json!([0.4, 0.1, 0.6]);
    });
    let out = run(&["validate", "--model", &path]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    assert!(text.contains("violation:"), "{text}");
    assert!(text.contains("1.1") || text.to_lowercase().contains("kernel"), "{text}");
}

#[test]
fn missing_file_is_an_io_error() {
    let out = run(&["validate", "--model", "/nonexistent/model.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["solve", "--modle", "x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn solve_single_action_model() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let out = run(&["solve", "--model", &model("constant_cost"), "--out", &out_dir]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("# schema=pdmp-result/1"));
    assert!(lines[0].contains("model_sha256="));
    // Comment line, column header, one iteration.
    assert_eq!(lines.len(), 3, "{trace}");
    let eval = read_json(&dir.path().join("evaluation.json"));
    assert_eq!(eval["schema"], "pdmp-result/1");
    assert!((eval["data"]["rho"].as_f64().unwrap() - 2.0).abs() < 1e-10);
}

#[test]
fn solve_dominated_toy_picks_the_cheaper_action() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let out = run(&["solve", "--model", &model("ctmdp_toy"), "--out", &out_dir]);
    assert_eq!(code(&out), 0);
    let policy = read_json(&dir.path().join("policy.json"));
    let interior = policy["data"]["interior"].as_array().unwrap();
    assert!(interior.iter().all(|a| a.as_u64() == Some(1)));
}

#[test]
fn strict_audit_stops_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited(dir.path(), "drift_boundary", |v| {
        v["constants"]["b"] = serde_json::json!(1e-3);
    });
    let out_dir = dir.path().join("out");
    let out_s = out_dir.display().to_string();
    let out = run(&["solve", "--model", &path, "--out", &out_s, "--strict-audit"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Cu1"));
    assert!(!out_dir.join("evaluation.json").exists());
    // Without strict mode the failure is only a warning.
    let out = run(&["solve", "--model", &path, "--out", &out_s]);
    assert_eq!(code(&out), 0);
    assert!(out_dir.join("evaluation.json").exists());
}

#[test]
fn iteration_cap_reports_non_convergence_and_keeps_best() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let out = run(&["solve", "--model", &model("drift_boundary"), "--max-iter", "1", "--out", &out_dir]);
    assert_eq!(code(&out), 3);
    assert!(dir.path().join("evaluation.json").exists());
    assert_eq!(read_json(&dir.path().join("solve.json"))["data"]["status"], "max_iter");
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out_dir = d.path().display().to_string();
        let m = model("drift_boundary");
        let out = run(&["solve", "--model", &m, "--out", &out_dir, "--deterministic"]);
        assert_eq!(code(&out), 0);
        let args = [
            "simulate", "--model", &m, "--out", &out_dir, "--seed", "11", "--reps", "4",
            "--horizon", "200", "--trajectory", "--deterministic",
        ];
        assert_eq!(code(&run(&args)), 0);
    }
    for f in ["evaluation.json", "policy.json", "solve.json", "trace.csv", "audit.json", "simulation.json", "trajectory.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    assert!(read_json(&a.path().join("solve.json")).get("elapsed_seconds").is_none());
}

#[test]
fn solve_then_simulate_passes_validation() {
    for name in ["ctmdp_toy", "boundary_cycle"] {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().display().to_string();
        let m = model(name);
        assert_eq!(code(&run(&["solve", "--model", &m, "--out", &out_dir])), 0);
        let rho = read_json(&dir.path().join("evaluation.json"))["data"]["rho"].as_f64().unwrap();
        let rho = rho.to_string();
        let out = run(&[
            "simulate", "--model", &m, "--out", &out_dir, "--seed", "5", "--reps", "8", "--horizon", "2000",
            "--rho", &rho,
        ]);
        assert_eq!(code(&out), 0);
        let sim = read_json(&dir.path().join("simulation.json"));
        assert_eq!(sim["data"]["verdict"]["pass"], true, "{name}: {}", stdout(&out));
    }
}

#[test]
fn constant_cost_simulation_mean() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let m = model("constant_cost");
    assert_eq!(code(&run(&["solve", "--model", &m, "--out", &out_dir])), 0);
    let out = run(&["simulate", "--model", &m, "--out", &out_dir, "--seed", "1", "--reps", "2", "--horizon", "100"]);
    assert_eq!(code(&out), 0);
    let mean = read_json(&dir.path().join("simulation.json"))["data"]["mean"].as_f64().unwrap();
    assert!((mean - 2.0).abs() < 1e-12, "{mean}");
}

#[test]
fn simulate_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let m = model("ctmdp_toy");
    assert_eq!(code(&run(&["solve", "--model", &m, "--out", &out_dir])), 0);
    let horizon0 = run(&["simulate", "--model", &m, "--out", &out_dir, "--seed", "1", "--horizon", "0"]);
    assert_eq!(code(&horizon0), 2);
    let no_seed = run(&["simulate", "--model", &m, "--out", &out_dir]);
    assert_eq!(code(&no_seed), 2);
    let empty = tempfile::tempdir().unwrap();
    let no_policy = run(&["simulate", "--model", &m, "--out", &empty.path().display().to_string(), "--seed", "1"]);
    assert_eq!(code(&no_policy), 2);
}

#[test]
fn report_writes_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let out = run(&["report", "--model", &model("drift_boundary"), "--out", &out_dir]);
    assert_eq!(code(&out), 0);
    let rho = fs::read_to_string(dir.path().join("rho.csv")).unwrap();
    let rows: Vec<&str> = rho.lines().skip(2).collect();
    assert!(rows.len() >= 2);
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-7));
    assert!(fs::read_to_string(dir.path().join("residuals.csv")).unwrap().contains("optimality_residual"));
}

#[test]
fn audit_with_policy_reports_ergodicity() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let m = model("contracting");
    assert_eq!(code(&run(&["solve", "--model", &m, "--out", &out_dir])), 0);
    let policy = dir.path().join("policy.json").display().to_string();
    let out = run(&["audit", "--model", &m, "--policy", &policy, "--out", &out_dir]);
    assert_eq!(code(&out), 0);
    let audit = read_json(&dir.path().join("audit.json"));
    assert!(audit["data"]["ergodicity"]["kappa"].as_f64().unwrap() < 1.0);
}
