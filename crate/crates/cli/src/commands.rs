use std::fs;
use std::path::{Path, PathBuf};

use pdmp_core::audit::{audit_assumptions, AuditReport, AuditStatus};
use pdmp_core::evaluation::{evaluate_with, EvalOptions, EvaluationResult};
use pdmp_core::operators::Engine;
use pdmp_core::pia::{run_pia, select_mesh, PiaOptions, PiaStatus, StopReason};
use pdmp_core::simulate::{batch_se, mc_validate, simulate_replication, Event, SimOptions, SimulationSummary};
use pdmp_core::{parse_model, validate_model, EvalError, FeedbackPolicy, ModelError, PdmpModel, SimError};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{sha256_hex, unwrap_envelope, Sink};
use crate::{exit, CliError, RunConfig};

struct Loaded {
    model: PdmpModel,
    sha256: String,
}

/// Read and parse the model file. Violations are returned rather than raised
/// so `validate` can list them all.
fn read_model(cfg: &RunConfig) -> Result<(Loaded, Vec<String>), CliError> {
    let path = cfg.model.as_ref().expect("checked by RunConfig::check");
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("cannot read model file {}: {e}", path.display())))?;
    let sha256 = sha256_hex(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::new(exit::VALIDATION, format!("{}: not UTF-8 text", path.display())))?;
    let model = parse_model(&text).map_err(|e| match e {
        ModelError::Io { .. } => CliError::io(e.to_string()),
        ModelError::Invalid(ref v) => CliError::new(exit::VALIDATION, violation_listing(v.iter().map(|x| x.to_string()))),
        other => CliError::new(exit::VALIDATION, format!("{}: {other}", path.display())),
    })?;
    let violations = validate_model(&model).iter().map(|v| v.to_string()).collect();
    Ok((Loaded { model, sha256 }, violations))
}

fn violation_listing(lines: impl Iterator<Item = String>) -> String {
    lines.map(|l| format!("violation: {l}")).collect::<Vec<_>>().join("\n")
}

fn load_valid(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let (loaded, violations) = read_model(cfg)?;
    if !violations.is_empty() {
        return Err(CliError::new(
            exit::VALIDATION,
            format!(
                "model has {} violation(s)\n{}",
                violations.len(),
                violation_listing(violations.into_iter())
            ),
        ));
    }
    Ok(loaded)
}

fn read_policy(path: &Path, model: &PdmpModel) -> Result<FeedbackPolicy, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read policy file {}: {e}", path.display())))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| CliError::new(exit::VALIDATION, format!("{}: {e}", path.display())))?;
    let policy: FeedbackPolicy = serde_json::from_value(unwrap_envelope(value))
        .map_err(|e| CliError::new(exit::VALIDATION, format!("{}: not a policy: {e}", path.display())))?;
    policy
        .check(model)
        .map_err(|e| CliError::new(exit::VALIDATION, format!("{}: {e}", path.display())))?;
    Ok(policy)
}

fn policy_or_default(cfg: &RunConfig, model: &PdmpModel) -> Result<FeedbackPolicy, CliError> {
    match &cfg.policy {
        Some(p) => read_policy(p, model),
        None => Ok(FeedbackPolicy::lowest_index(model)),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Policy(p) => CliError::new(exit::VALIDATION, p.to_string()),
        EvalError::Flow(f) => CliError::new(exit::VALIDATION, f.to_string()),
        other => CliError::new(exit::NOT_CONVERGED, other.to_string()),
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Policy(p) => CliError::new(exit::VALIDATION, p.to_string()),
        SimError::Horizon(_) => CliError::usage(e.to_string()),
        other => CliError::new(exit::SIM_ABORT, format!("simulation aborted: {other}")),
    }
}

fn sink(cfg: &RunConfig, loaded: &Loaded) -> Result<Sink, CliError> {
    Sink::new(&cfg.out, loaded.sha256.clone(), cfg.deterministic)
}

fn say(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn validate(cfg: &RunConfig) -> Result<u8, CliError> {
    let (loaded, violations) = read_model(cfg)?;
    let m = &loaded.model;
    if violations.is_empty() {
        println!(
            "ok: {} interior states, {} boundary points, {} actions (sha256 {})",
            m.n_interior(),
            m.grid.n_boundary(),
            m.n_actions(),
            loaded.sha256
        );
        Ok(exit::OK)
    } else {
        println!("{}", violation_listing(violations.iter().cloned()));
        println!("{} violation(s)", violations.len());
        Ok(exit::VALIDATION)
    }
}

fn print_audit(report: &AuditReport) {
    for item in &report.items {
        let status = match item.status {
            AuditStatus::Pass => "pass",
            AuditStatus::Fail => "FAIL",
            AuditStatus::NotCheckable => "n/a",
        };
        let slack = item.worst_slack.map(|s| format!("{s:.3e}")).unwrap_or_else(|| "-".into());
        let mut line = format!("  {:<6} {:<5} slack {:>11}  {}", item.item, status, slack, item.description);
        if let Some(s) = item.worst_state {
            line.push_str(&format!(" [state {s}"));
            if let Some(a) = item.worst_action {
                line.push_str(&format!(", action {a}"));
            }
            line.push(']');
        }
        println!("{line}");
    }
}

/// Runs the audit; with `--strict-audit` a failure aborts with exit 4.
fn run_audit(cfg: &RunConfig, loaded: &Loaded, sink: &Sink, policy: Option<&FeedbackPolicy>) -> Result<AuditReport, CliError> {
    let report = audit_assumptions(&loaded.model, policy).map_err(eval_error)?;
    say(&sink.write_json("audit.json", "audit", &report)?);
    if !report.passed() {
        let names: Vec<&str> = report.failures().iter().map(|i| i.item.as_str()).collect();
        if cfg.strict_audit {
            print_audit(&report);
            return Err(CliError::new(
                exit::STRICT_AUDIT,
                format!("assumption check failed: {}", names.join(", ")),
            ));
        }
        eprintln!("warning: assumption check failed: {} (see audit.json)", names.join(", "));
    }
    Ok(report)
}

pub fn audit(cfg: &RunConfig) -> Result<u8, CliError> {
    let loaded = load_valid(cfg)?;
    let sink = sink(cfg, &loaded)?;
    let policy = match &cfg.policy {
        Some(p) => Some(read_policy(p, &loaded.model)?),
        None => None,
    };
    let report = run_audit(cfg, &loaded, &sink, policy.as_ref())?;
    print_audit(&report);
    println!("audit {}", if report.passed() { "passed" } else { "failed (warning only)" });
    Ok(exit::OK)
}

pub fn evaluate(cfg: &RunConfig) -> Result<u8, CliError> {
    let loaded = load_valid(cfg)?;
    let sink = sink(cfg, &loaded)?;
    let policy = policy_or_default(cfg, &loaded.model)?;
    let opts = EvalOptions {
        tol: cfg.tol,
        ..EvalOptions::default()
    };
    let mesh = select_mesh(&loaded.model, &policy, &opts, PiaOptions::default().resolution_tol).map_err(eval_error)?;
    let engine = Engine::with_mesh(&loaded.model, mesh).map_err(|e| CliError::new(exit::VALIDATION, e.to_string()))?;
    let result = evaluate_with(&engine, &policy, &opts).map_err(eval_error)?;
    print_result(&result);
    say(&sink.write_json("evaluation.json", "evaluation", &result)?);
    Ok(exit::OK)
}

fn print_result(r: &EvaluationResult) {
    println!("rho      = {}", r.rho);
    println!("D        = {}", r.d);
    println!("residual = {:.3e}", r.residual);
    println!("|h|_g    = {}", r.h_norm_g);
    if let Some(e) = &r.ergodicity {
        println!("(a, kappa) = ({}, {})", e.a, e.kappa);
    }
}

#[derive(Serialize)]
struct SolveSummary {
    status: PiaStatus,
    stop_reason: StopReason,
    iterations: usize,
    rho: f64,
    bias_bound: Option<f64>,
    mesh: pdmp_core::MeshSpec,
    initial_policy: FeedbackPolicy,
}

#[derive(Serialize)]
struct RhoRow {
    n: usize,
    rho: f64,
}

#[derive(Serialize)]
struct ResidualRow {
    n: usize,
    poisson_residual: f64,
    optimality_residual: f64,
    h_change: Option<f64>,
    changed_states: usize,
}

fn solve_pipeline(cfg: &RunConfig, report: bool) -> Result<u8, CliError> {
    let loaded = load_valid(cfg)?;
    let sink = sink(cfg, &loaded)?;
    let u0 = policy_or_default(cfg, &loaded.model)?;
    let audit = run_audit(cfg, &loaded, &sink, Some(&u0))?;
    let opts = PiaOptions {
        tol_rho: cfg.tol_rho,
        max_iter: cfg.max_iter,
        eval: EvalOptions {
            tol: cfg.tol,
            ..EvalOptions::default()
        },
        ..PiaOptions::default()
    };
    let out = run_pia(&loaded.model, &u0, &opts).map_err(eval_error)?;
    let t = &out.trace;
    print_result(&out.result);
    println!(
        "policy iteration: {:?} ({:?}) after {} iteration(s)",
        t.status,
        t.stop_reason,
        t.records.len()
    );

    say(&sink.write_json("evaluation.json", "evaluation", &out.result)?);
    say(&sink.write_json("policy.json", "policy", &out.policy)?);
    say(&sink.write_json(
        "solve.json",
        "solve",
        &SolveSummary {
            status: t.status,
            stop_reason: t.stop_reason,
            iterations: t.records.len(),
            rho: out.result.rho,
            bias_bound: t.bias_bound,
            mesh: t.mesh,
            initial_policy: u0,
        },
    )?);
    say(&sink.write_csv("trace.csv", "pia_trace", &t.records)?);

    if report {
        let rho: Vec<RhoRow> = t.records.iter().map(|r| RhoRow { n: r.n, rho: r.rho }).collect();
        let res: Vec<ResidualRow> = t
            .records
            .iter()
            .map(|r| ResidualRow {
                n: r.n,
                poisson_residual: r.poisson_residual,
                optimality_residual: r.optimality_residual,
                h_change: r.h_change,
                changed_states: r.changed_states,
            })
            .collect();
        say(&sink.write_csv("rho.csv", "rho_by_iteration", &rho)?);
        say(&sink.write_csv("residuals.csv", "residuals_by_iteration", &res)?);
        println!(
            "audit: {} of {} checks failed",
            audit.failures().len(),
            audit.items.len()
        );
    }

    if t.status == PiaStatus::Converged {
        Ok(exit::OK)
    } else {
        eprintln!("warning: policy iteration did not converge; best iterate written");
        Ok(exit::NOT_CONVERGED)
    }
}

pub fn solve(cfg: &RunConfig) -> Result<u8, CliError> {
    solve_pipeline(cfg, false)
}

pub fn report(cfg: &RunConfig) -> Result<u8, CliError> {
    solve_pipeline(cfg, true)
}

#[derive(Serialize)]
struct Verdict {
    pass: bool,
    rho: f64,
    z: f64,
}

#[derive(Serialize)]
struct SimulationArtifact {
    x0: f64,
    horizon: f64,
    seed: u64,
    replications: u64,
    mean: f64,
    se: f64,
    verdict: Option<Verdict>,
    runs: Vec<SimulationSummary>,
}

#[derive(Serialize)]
struct EventRow {
    t: f64,
    event_type: pdmp_core::simulate::EventKind,
    state: f64,
    cost_so_far: f64,
}

impl From<&Event> for EventRow {
    fn from(e: &Event) -> Self {
        Self {
            t: e.t,
            event_type: e.event_type,
            state: e.state,
            cost_so_far: e.cost_so_far,
        }
    }
}

fn simulation_policy(cfg: &RunConfig, model: &PdmpModel) -> Result<(FeedbackPolicy, PathBuf), CliError> {
    let path = cfg.policy.clone().unwrap_or_else(|| cfg.out.join("policy.json"));
    if !path.exists() {
        return Err(CliError::usage(format!(
            "no policy file at {} (run `solve` first or pass --policy)",
            path.display()
        )));
    }
    Ok((read_policy(&path, model)?, path))
}

pub fn simulate(cfg: &RunConfig) -> Result<u8, CliError> {
    let loaded = load_valid(cfg)?;
    let sink = sink(cfg, &loaded)?;
    let model = &loaded.model;
    let (policy, policy_path) = simulation_policy(cfg, model)?;
    let seed = cfg.seed.expect("checked by RunConfig::check");
    let x0 = cfg.x0.unwrap_or(model.grid.points[0]);
    let engine = Engine::new(model).map_err(|e| CliError::new(exit::VALIDATION, e.to_string()))?;
    let opts = SimOptions::default();
    println!("simulating {} from x0 = {x0}", policy_path.display());

    let (mean, se, verdict, runs) = match cfg.rho {
        Some(rho) => {
            let v = mc_validate(&engine, &policy, rho, x0, cfg.horizon, cfg.reps, seed, &opts).map_err(sim_error)?;
            let verdict = Verdict { pass: v.pass, rho, z: v.z };
            (v.mean, v.se, Some(verdict), v.replications)
        }
        None => {
            let runs = (0..cfg.reps)
                .into_par_iter()
                .map(|r| simulate_replication(&engine, &policy, x0, cfg.horizon, seed, r, &opts).map(|(_, s)| s))
                .collect::<Result<Vec<_>, _>>()
                .map_err(sim_error)?;
            let mean = runs.iter().map(|s| s.mean).sum::<f64>() / runs.len() as f64;
            let pooled: Vec<f64> = runs.iter().flat_map(|s| s.batch_means.iter().copied()).collect();
            (mean, batch_se(&pooled), None, runs)
        }
    };
    println!("mean = {mean} (SE {se:.3e}, {} replications)", runs.len());
    if let Some(v) = &verdict {
        println!(
            "validation against rho = {}: {} (z = {:.2})",
            v.rho,
            if v.pass { "pass" } else { "fail" },
            v.z
        );
    }

    if cfg.trajectory {
        let rec = SimOptions { record: true, ..opts };
        let (traj, _) = simulate_replication(&engine, &policy, x0, cfg.horizon, seed, 0, &rec).map_err(sim_error)?;
        let rows: Vec<EventRow> = traj.events.iter().map(EventRow::from).collect();
        say(&sink.write_csv("trajectory.csv", "trajectory", &rows)?);
    }
    say(&sink.write_json(
        "simulation.json",
        "simulation",
        &SimulationArtifact {
            x0,
            horizon: cfg.horizon,
            seed,
            replications: cfg.reps,
            mean,
            se,
            verdict,
            runs,
        },
    )?);
    Ok(exit::OK)
}
