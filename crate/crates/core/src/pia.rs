//! Policy iteration: evaluation, improvement by backward marching of the
//! one-stage functional along flow lines, and optimality certification.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::evaluation::{evaluate_with, g_norm, EvalOptions, EvaluationResult};
use crate::flow::MeshSpec;
use crate::model::PdmpModel;
use crate::operators::{default_mesh, Engine};
use crate::policy::FeedbackPolicy;

/// Relative margin an action must win by to displace the incumbent.
const TIE_TOL: f64 = 1e-10;

fn beats(candidate: f64, incumbent: f64) -> bool {
    candidate < incumbent - TIE_TOL * incumbent.abs().max(1.0)
}

/// Minimizer over `actions`: the incumbent `prev` unless some action beats it
/// by more than the tie margin, in which case the lowest index among the
/// near-minimizers.
fn argmin(actions: &[usize], prev: usize, value: impl Fn(usize) -> f64) -> (usize, f64) {
    let mut sorted = actions.to_vec();
    sorted.sort_unstable();
    let values: Vec<f64> = sorted.iter().map(|&a| value(a)).collect();
    let min_v = values.iter().copied().fold(f64::INFINITY, f64::min);
    if let Some(k) = sorted.iter().position(|&a| a == prev) {
        if !beats(min_v, values[k]) {
            return (prev, values[k]);
        }
    }
    let k = values
        .iter()
        .position(|&v| !beats(min_v, v))
        .expect("non-empty feasible set");
    (sorted[k], values[k])
}

/// Minimal one-stage values and their argmin policy.
pub struct Improvement {
    pub policy: FeedbackPolicy,
    /// `𝒯(ρ, h)` on the interior grid.
    pub values: Vec<f64>,
    /// `min_a [r + Qh]` at each boundary point.
    pub boundary_values: Vec<f64>,
}

/// Backward-marching minimization of the one-stage functional.
pub fn improve(engine: &Engine, rho: f64, h: &[f64], prev: &FeedbackPolicy) -> Improvement {
    let m = engine.model;
    let n = m.n_interior();
    let qh = engine.qh_table(h);
    let mut boundary = Vec::with_capacity(m.grid.n_boundary());
    let mut boundary_values = Vec::with_capacity(m.grid.n_boundary());
    for z in 0..m.grid.n_boundary() {
        let (a, v) = argmin(&m.actions.feasible[n + z], prev.boundary[z], |a| {
            engine.boundary_value(z, a, &qh)
        });
        boundary.push(a);
        boundary_values.push(v);
    }
    let mut interior = prev.interior.clone();
    let values = engine.march(&boundary_values, |j, exit| {
        let (a, v) = argmin(&m.actions.feasible[j], prev.interior[j], |a| {
            engine.cell_value(j, a, rho, &qh, exit)
        });
        interior[j] = a;
        v
    });
    Improvement {
        policy: FeedbackPolicy { interior, boundary },
        values,
        boundary_values,
    }
}

pub fn improve_policy(engine: &Engine, rho: f64, h: &[f64], prev: &FeedbackPolicy) -> FeedbackPolicy {
    improve(engine, rho, h, prev).policy
}

/// `-ρ𝓛 + Lf + Hr + Gh` along the feedback path of `policy`, on the interior grid.
pub fn one_stage_value(engine: &Engine, rho: f64, h: &[f64], policy: &FeedbackPolicy) -> Vec<f64> {
    let qh = engine.qh_table(h);
    let boundary: Vec<f64> = policy
        .boundary
        .iter()
        .enumerate()
        .map(|(z, &a)| engine.boundary_value(z, a, &qh))
        .collect();
    engine.march(&boundary, |j, exit| {
        engine.cell_value(j, policy.interior[j], rho, &qh, exit)
    })
}

/// `sup_x |h(x) - 𝒯(ρ, h)(x)|`, with the minimum taken exactly over
/// per-cell action sequences by backward marching.
///
/// This dominates the frozen-single-action certificate: every frozen sweep
/// is one of the sequences minimized over.
pub fn optimality_residual(engine: &Engine, rho: f64, h: &[f64], policy: &FeedbackPolicy) -> f64 {
    let imp = improve(engine, rho, h, policy);
    h.iter()
        .zip(&imp.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiaStatus {
    Converged,
    MaxIter,
    Cycling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PolicyStable,
    RhoStalled,
    MaxIter,
    Cycling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub rho: f64,
    pub poisson_residual: f64,
    pub changed_states: usize,
    pub optimality_residual: f64,
    /// `max_x |h_n(x) - h_{n-1}(x)|`; absent on the first iteration.
    pub h_change: Option<f64>,
    pub h_norm_g: f64,
    pub kappa: Option<f64>,
    pub a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiaTrace {
    pub records: Vec<IterationRecord>,
    pub status: PiaStatus,
    pub stop_reason: StopReason,
    /// `a M_{u0} / (1 - κ)` with the largest `(a, κ)` seen over the iterates.
    pub bias_bound: Option<f64>,
    pub mesh: MeshSpec,
}

impl PiaTrace {
    pub fn monotone(&self, slack: f64) -> bool {
        self.records.windows(2).all(|w| w[1].rho <= w[0].rho + slack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiaOptions {
    pub tol_rho: f64,
    pub max_iter: usize,
    pub eval: EvalOptions,
    /// Mesh doubling stops once `ρ_{u0}` moves by less than this.
    pub resolution_tol: f64,
}

impl Default for PiaOptions {
    fn default() -> Self {
        Self {
            tol_rho: 1e-8,
            max_iter: 200,
            eval: EvalOptions::default(),
            resolution_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PiaOutcome {
    pub result: EvaluationResult,
    pub policy: FeedbackPolicy,
    pub trace: PiaTrace,
}

const MAX_DOUBLINGS: usize = 8;

/// Coarsest mesh, starting from the default and doubling, on which `ρ` of
/// `policy` moves by less than `tol` under one more doubling.
pub fn select_mesh(
    model: &PdmpModel,
    policy: &FeedbackPolicy,
    eval: &EvalOptions,
    tol: f64,
) -> Result<MeshSpec, EvalError> {
    let opts = EvalOptions {
        ergodicity: false,
        ..*eval
    };
    let mut mesh = default_mesh(model);
    let mut rho = evaluate_with(&Engine::with_mesh(model, mesh)?, policy, &opts)?.rho;
    for _ in 0..MAX_DOUBLINGS {
        let finer = mesh.doubled();
        let next = evaluate_with(&Engine::with_mesh(model, finer)?, policy, &opts)?.rho;
        if (next - rho).abs() <= tol {
            return Ok(mesh);
        }
        mesh = finer;
        rho = next;
    }
    Ok(mesh)
}

/// Policy iteration on an automatically resolved mesh.
pub fn run_pia(model: &PdmpModel, u0: &FeedbackPolicy, opts: &PiaOptions) -> Result<PiaOutcome, EvalError> {
    u0.check(model)?;
    let mesh = select_mesh(model, u0, &opts.eval, opts.resolution_tol)?;
    let engine = Engine::with_mesh(model, mesh)?;
    run_pia_with(&engine, u0, opts)
}

/// Policy iteration on a fixed engine.
pub fn run_pia_with(engine: &Engine, u0: &FeedbackPolicy, opts: &PiaOptions) -> Result<PiaOutcome, EvalError> {
    let model = engine.model;
    u0.check(model)?;
    let g = &model.lyapunov_g[..model.n_interior()];
    let mut policy = u0.clone();
    let mut visited: HashSet<FeedbackPolicy> = HashSet::new();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut best: Option<(EvaluationResult, FeedbackPolicy)> = None;
    let mut last: Option<EvaluationResult> = None;
    let mut m_u0 = None;
    let (mut a_max, mut kappa_max) = (0.0f64, 0.0f64);
    let mut erg_known = true;

    for n in 0..opts.max_iter {
        let result = evaluate_with(engine, &policy, &opts.eval)?;
        m_u0.get_or_insert(result.m_u);
        match &result.ergodicity {
            Some(e) => {
                a_max = a_max.max(e.a);
                kappa_max = kappa_max.max(e.kappa);
            }
            None => erg_known = false,
        }
        let imp = improve(engine, result.rho, &result.h, &policy);
        let opt_res = result
            .h
            .iter()
            .zip(&imp.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let changed = imp.policy.changed_states(&policy);
        let h_change = last.as_ref().map(|prev| {
            prev.h
                .iter()
                .zip(&result.h)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        records.push(IterationRecord {
            n,
            rho: result.rho,
            poisson_residual: result.residual,
            changed_states: changed,
            optimality_residual: opt_res,
            h_change,
            h_norm_g: g_norm(&result.h, g),
            kappa: result.ergodicity.as_ref().map(|e| e.kappa),
            a: result.ergodicity.as_ref().map(|e| e.a),
        });
        let rho_drop = last.as_ref().map(|p| p.rho - result.rho);
        if best.as_ref().is_none_or(|(b, _)| result.rho < b.rho) {
            best = Some((result.clone(), policy.clone()));
        }

        let stop = if changed == 0 {
            Some((PiaStatus::Converged, StopReason::PolicyStable))
        } else if rho_drop.is_some_and(|d| d < opts.tol_rho) && opt_res < 10.0 * opts.tol_rho {
            Some((PiaStatus::Converged, StopReason::RhoStalled))
        } else if visited.contains(&imp.policy) {
            Some((PiaStatus::Cycling, StopReason::Cycling))
        } else {
            None
        };
        let bias_bound = (erg_known && kappa_max < 1.0)
            .then(|| a_max * m_u0.unwrap_or(0.0) / (1.0 - kappa_max));
        if let Some((status, stop_reason)) = stop {
            let (result, policy) = if status == PiaStatus::Converged {
                (result, policy)
            } else {
                best.expect("at least one iterate")
            };
            return Ok(PiaOutcome {
                result,
                policy,
                trace: PiaTrace {
                    records,
                    status,
                    stop_reason,
                    bias_bound,
                    mesh: engine.mesh,
                },
            });
        }
        visited.insert(policy);
        policy = imp.policy;
        last = Some(result);
    }
    let bias_bound =
        (erg_known && kappa_max < 1.0).then(|| a_max * m_u0.unwrap_or(0.0) / (1.0 - kappa_max));
    let (result, policy) = match best {
        Some(b) => b,
        None => {
            let r = evaluate_with(engine, u0, &opts.eval)?;
            (r, u0.clone())
        }
    };
    Ok(PiaOutcome {
        result,
        policy,
        trace: PiaTrace {
            records,
            status: PiaStatus::MaxIter,
            stop_reason: StopReason::MaxIter,
            bias_bound,
            mesh: engine.mesh,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::DEFAULT_TOL;
    use crate::fixtures::*;

    #[test]
    fn argmin_prefers_incumbent_then_lowest() {
        let v = [1.0, 1.0, 1.0];
        assert_eq!(argmin(&[0, 1, 2], 2, |a| v[a]).0, 2);
        let v = [1.0, 0.5, 0.5];
        assert_eq!(argmin(&[0, 1, 2], 0, |a| v[a]).0, 1);
        assert_eq!(argmin(&[0, 1, 2], 2, |a| v[a]).0, 2);
        let v = [1.0, 1.0 + 1e-14];
        assert_eq!(argmin(&[0, 1], 1, |a| v[a]).0, 1);
    }

    #[test]
    fn single_action_policy_is_fixed() {
        let m = trivial_constant(1.5, 2.0, 4);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let r = evaluate_with(&e, &p, &EvalOptions::default()).unwrap();
        assert_eq!(improve_policy(&e, r.rho, &r.h, &p), p);
        assert!(optimality_residual(&e, r.rho, &r.h, &p) < 1e-10);
        let out = run_pia(&m, &p, &PiaOptions::default()).unwrap();
        assert_eq!(out.trace.records.len(), 1);
        assert_eq!(out.trace.status, PiaStatus::Converged);
    }

    #[test]
    fn dominated_action_wins_everywhere() {
        let m = dominated_ctmdp(0.5);
        let p0 = FeedbackPolicy::lowest_index(&m);
        let out = run_pia(&m, &p0, &PiaOptions::default()).unwrap();
        assert!(out.policy.interior.iter().all(|&a| a == 1));
        assert_eq!(out.trace.stop_reason, StopReason::PolicyStable);
    }

    #[test]
    fn one_stage_examples() {
        let m = drift_model(12);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let r = evaluate_with(&e, &p, &EvalOptions::default()).unwrap();
        let v = one_stage_value(&e, r.rho, &r.h, &p);
        for (a, b) in v.iter().zip(&r.h) {
            assert!((a - b).abs() < 10.0 * DEFAULT_TOL);
        }
        let zero = vec![0.0; m.n_interior()];
        let v = one_stage_value(&e, 0.0, &zero, &p);
        assert!(v.iter().all(|&x| x >= 0.0));
        for (x, c) in v.iter().zip(&r.cost) {
            assert!((x - c).abs() < 1e-12);
        }

        let m = trivial_constant(1.5, 2.0, 4);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let v = one_stage_value(&e, 2.0, &[0.0; 4], &p);
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn suboptimal_policy_residual_reflects_gap() {
        let gap = 0.5;
        let m = dominated_ctmdp(gap);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let r = evaluate_with(&e, &p, &EvalOptions::default()).unwrap();
        // Same λ and Q, cost lower by gap: 𝒯 = h - gap 𝓛.
        let expected = r.ell.iter().fold(0.0f64, |a, l| a.max(gap * l));
        let res = optimality_residual(&e, r.rho, &r.h, &p);
        assert!((res - expected).abs() < 1e-10, "{res} vs {expected}");
    }

    #[test]
    fn improvement_never_worsens_one_stage_value() {
        let m = contracting_model(9);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::constant(&m, 2);
        let r = evaluate_with(&e, &p, &EvalOptions::default()).unwrap();
        let q = improve_policy(&e, r.rho, &r.h, &p);
        let before = one_stage_value(&e, r.rho, &r.h, &p);
        let after = one_stage_value(&e, r.rho, &r.h, &q);
        for (a, b) in after.iter().zip(&before) {
            assert!(*a <= b + 1e-10);
        }
        let rq = evaluate_with(&e, &q, &EvalOptions::default()).unwrap();
        assert!(rq.rho <= r.rho + 10.0 * DEFAULT_TOL);
    }

    #[test]
    fn drift_model_converges_monotonically() {
        let m = drift_model(16);
        let out = run_pia(&m, &FeedbackPolicy::lowest_index(&m), &PiaOptions::default()).unwrap();
        assert_eq!(out.trace.status, PiaStatus::Converged);
        assert!(out.trace.monotone(1e-7));
        assert!(out.trace.records.last().unwrap().optimality_residual < 1e-7);
    }
}
