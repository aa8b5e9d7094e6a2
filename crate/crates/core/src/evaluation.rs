//! Policy evaluation: invariant measure of the embedded chain and the
//! pseudo-Poisson equation `h = -ρ𝓛 + Lf + Hr + Gh` with `ν(h) = 0`.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::flow::MeshSpec;
use crate::model::PdmpModel;
use crate::operators::{Engine, KernelMatrix, PolicyTerms};
use crate::policy::FeedbackPolicy;

pub const DEFAULT_TOL: f64 = 1e-8;

/// Grids above this size use power iteration for `ν`.
const DIRECT_LIMIT: usize = 2000;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 1_000_000;
const SERIES_MAX_TERMS: usize = 1_000_000;
/// Kernel powers used for the ergodicity estimate.
const ERGODIC_POWERS: usize = 20;
/// Largest grid for which `(a, κ)` is estimated from dense kernel powers.
const ERGODIC_LIMIT: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Neumann,
}

/// Estimated geometric ergodicity constants: `‖Gᵏ - 1ν‖_g ≤ a κᵏ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ergodicity {
    pub a: f64,
    pub kappa: f64,
    /// `‖Gᵏ - 1ν‖_g` for `k = 0..=20`.
    pub norms: Vec<f64>,
}

impl Ergodicity {
    pub fn certified(&self) -> bool {
        self.kappa < 1.0 && self.a.is_finite()
    }

    /// `a M / (1 - κ)`, infinite when `κ ≥ 1`.
    pub fn bias_bound(&self, m_u: f64) -> f64 {
        if self.certified() {
            self.a * m_u / (1.0 - self.kappa)
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub rho: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub residual: f64,
    pub nu: Vec<f64>,
    pub h: Vec<f64>,
    pub method: Method,
    /// Series terms (Neumann) or power iterations spent on `ν` (0 for a direct solve).
    pub iterations: usize,
    pub ell: Vec<f64>,
    pub cost: Vec<f64>,
    /// `M_u = max{ρ K_λ, M(1 + b K_λ)/c}`.
    pub m_u: f64,
    /// `‖h‖_g`.
    pub h_norm_g: f64,
    pub ergodicity: Option<Ergodicity>,
    pub mesh: MeshSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub tol: f64,
    pub method: Method,
    /// Estimate `(a, κ)` even when the direct solver does not need it.
    pub ergodicity: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            method: Method::Direct,
            ergodicity: true,
        }
    }
}

/// Number of closed communicating classes of the support graph of `kernel`.
pub fn closed_classes(kernel: &KernelMatrix) -> usize {
    let n = kernel.dim();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if kernel.0[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&graph);
    let mut comp = vec![0; n];
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, members)| {
            members.iter().all(|v| {
                graph
                    .neighbors(*v)
                    .all(|w| comp[w.index()] == *c)
            })
        })
        .count()
}

/// Invariant probability row `ν G = ν`.
pub fn invariant_measure(kernel: &KernelMatrix) -> Result<Vec<f64>, EvalError> {
    invariant_measure_counted(kernel).map(|(nu, _)| nu)
}

fn invariant_measure_counted(kernel: &KernelMatrix) -> Result<(Vec<f64>, usize), EvalError> {
    let classes = closed_classes(kernel);
    if classes > 1 {
        return Err(EvalError::MultipleRecurrentClasses { classes });
    }
    let n = kernel.dim();
    if n <= DIRECT_LIMIT {
        if let Some(nu) = stationary_direct(kernel) {
            return Ok((nu, 0));
        }
    }
    power_iteration(kernel)
}

fn stationary_direct(kernel: &KernelMatrix) -> Option<Vec<f64>> {
    let n = kernel.dim();
    // (I - G)ᵀ νᵀ = 0 with the last equation replaced by Σν = 1.
    let mut a = DMatrix::<f64>::identity(n, n) - kernel.0.transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    let mut nu: Vec<f64> = sol.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = nu.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    nu.iter_mut().for_each(|v| *v /= total);
    (stationarity_defect(kernel, &nu) <= 1e-10).then_some(nu)
}

fn left_apply(kernel: &KernelMatrix, nu: &[f64]) -> Vec<f64> {
    let row = DVector::from_column_slice(nu);
    kernel.0.tr_mul(&row).iter().copied().collect()
}

/// `‖νG - ν‖₁`.
pub fn stationarity_defect(kernel: &KernelMatrix, nu: &[f64]) -> f64 {
    left_apply(kernel, nu)
        .iter()
        .zip(nu)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

fn power_iteration(kernel: &KernelMatrix) -> Result<(Vec<f64>, usize), EvalError> {
    let n = kernel.dim();
    let mut nu = vec![1.0 / n as f64; n];
    let mut prev_diff = f64::NAN;
    let mut ratio = f64::NAN;
    for it in 1..=POWER_MAX_ITER {
        let next = left_apply(kernel, &nu);
        let diff: f64 = next.iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
        if diff <= POWER_TOL {
            return Ok((next, it));
        }
        if prev_diff > 0.0 {
            ratio = diff / prev_diff;
        }
        prev_diff = diff;
        nu = next;
    }
    Err(EvalError::NoConvergence {
        iterations: POWER_MAX_ITER,
        subdominant: ratio,
    })
}

/// `‖h‖_g = sup |h| / g` over the interior grid.
pub fn g_norm(h: &[f64], g: &[f64]) -> f64 {
    h.iter().zip(g).map(|(v, w)| v.abs() / w).fold(0.0, f64::max)
}

/// Weighted operator norm `sup_x Σ_y |A(x,y)| g(y) / g(x)`.
fn operator_g_norm(a: &DMatrix<f64>, g: &[f64]) -> f64 {
    (0..a.nrows())
        .map(|i| {
            (0..a.ncols()).map(|j| a[(i, j)].abs() * g[j]).sum::<f64>() / g[i]
        })
        .fold(0.0, f64::max)
}

/// Fit `(a, κ)` from the exact weighted norms of `Gᵏ - 1ν`, `k = 0..=20`.
///
/// `κ` is the geometric decay rate over the second half of the window and
/// `a = max_k n_k / κᵏ`, so the bound is tight on the observed window.
pub fn estimate_ergodicity(kernel: &KernelMatrix, nu: &[f64], g: &[f64]) -> Ergodicity {
    let n = kernel.dim();
    let one_nu = DMatrix::from_fn(n, n, |_, j| nu[j]);
    let mut p = DMatrix::<f64>::identity(n, n) - &one_nu;
    let mut norms = Vec::with_capacity(ERGODIC_POWERS + 1);
    norms.push(operator_g_norm(&p, g));
    for _ in 0..ERGODIC_POWERS {
        p = &kernel.0 * p;
        norms.push(operator_g_norm(&p, g));
    }
    fit_geometric(norms)
}

fn fit_geometric(norms: Vec<f64>) -> Ergodicity {
    // Below this the powers are rounding noise.
    let floor = 1e-10 * norms[0].max(1.0);
    let last = (1..norms.len()).rev().find(|&k| norms[k] > floor);
    let kappa = match last {
        None => 0.0,
        Some(1) => norms[1] / norms[0],
        Some(k) => {
            let half = k / 2;
            (norms[k] / norms[half]).powf(1.0 / (k - half) as f64)
        }
    };
    let upto = last.unwrap_or(0);
    let a = (0..=upto)
        .map(|k| {
            if kappa == 0.0 {
                norms[k]
            } else {
                norms[k] / kappa.powi(k as i32)
            }
        })
        .fold(0.0, f64::max);
    Ergodicity { a, kappa, norms }
}

fn sup_defect(terms: &PolicyTerms, rho: f64, h: &[f64]) -> f64 {
    let gh = terms.kernel.apply(h);
    (0..h.len())
        .map(|x| (h[x] + rho * terms.ell[x] - terms.cost[x] - gh[x]).abs())
        .fold(0.0, f64::max)
}

fn project(h: &mut [f64], nu: &[f64]) {
    let mean: f64 = h.iter().zip(nu).map(|(a, b)| a * b).sum();
    h.iter_mut().for_each(|v| *v -= mean);
}

fn solve_direct(terms: &PolicyTerms, nu: &[f64], w: &[f64]) -> Result<Vec<f64>, EvalError> {
    let n = nu.len();
    let one_nu = DMatrix::from_fn(n, n, |_, j| nu[j]);
    let a = DMatrix::<f64>::identity(n, n) - &terms.kernel.0 + one_nu;
    let lu = a.lu();
    let sol = lu
        .solve(&DVector::from_column_slice(w))
        .ok_or(EvalError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Singular);
    }
    Ok(sol.iter().copied().collect())
}

fn solve_series(
    terms: &PolicyTerms,
    nu: &[f64],
    w: &[f64],
    erg: Option<&Ergodicity>,
    m_u: f64,
    g_sup: f64,
    tol: f64,
) -> Result<(Vec<f64>, usize), EvalError> {
    let erg = erg.ok_or_else(|| EvalError::SeriesRefused("no ergodicity estimate".into()))?;
    if !erg.certified() {
        return Err(EvalError::SeriesRefused(format!(
            "estimated κ = {:.6} is not below 1",
            erg.kappa
        )));
    }
    // Tail after K terms: a M κ^K ‖g‖∞ / (1 - κ) ≤ tol.
    let scale = erg.a * m_u * g_sup / (1.0 - erg.kappa);
    let terms_needed = if scale <= tol || erg.kappa == 0.0 {
        1
    } else {
        ((tol / scale).ln() / erg.kappa.ln()).ceil() as usize + 1
    };
    if terms_needed > SERIES_MAX_TERMS {
        return Err(EvalError::SeriesRefused(format!(
            "{terms_needed} terms needed at κ = {:.6}",
            erg.kappa
        )));
    }
    let mut term = w.to_vec();
    let mut h = term.clone();
    for _ in 1..terms_needed {
        term = terms.kernel.apply(&term);
        // Keep the iterate orthogonal to ν against rounding drift.
        project(&mut term, nu);
        h.iter_mut().zip(&term).for_each(|(a, b)| *a += b);
    }
    Ok((h, terms_needed))
}

/// Evaluate `policy` on the engine's mesh.
pub fn evaluate_with(
    engine: &Engine,
    policy: &FeedbackPolicy,
    opts: &EvalOptions,
) -> Result<EvaluationResult, EvalError> {
    let model = engine.model;
    let terms = engine.policy_terms(policy, 0.0)?;
    let (nu, power_its) = invariant_measure_counted(&terms.kernel)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let d = dot(&nu, &terms.ell);
    let rho = dot(&nu, &terms.cost) / d;
    let w: Vec<f64> = terms
        .cost
        .iter()
        .zip(&terms.ell)
        .map(|(c, l)| c - rho * l)
        .collect();

    let k = &model.constants;
    let m_u = (rho * k.k_lambda).max(k.big_m * (1.0 + k.b * k.k_lambda) / k.c);
    let g = &model.lyapunov_g[..model.n_interior()];
    let want_erg = opts.ergodicity || opts.method == Method::Neumann;
    let ergodicity = (want_erg && nu.len() <= ERGODIC_LIMIT)
        .then(|| estimate_ergodicity(&terms.kernel, &nu, g));

    let (mut h, iterations) = match opts.method {
        Method::Direct => (solve_direct(&terms, &nu, &w)?, power_its),
        Method::Neumann => {
            let g_sup = g.iter().copied().fold(0.0, f64::max);
            solve_series(&terms, &nu, &w, ergodicity.as_ref(), m_u, g_sup, opts.tol)?
        }
    };
    project(&mut h, &nu);
    let residual = sup_defect(&terms, rho, &h);
    if !(residual <= opts.tol) {
        return Err(EvalError::Residual {
            residual,
            tol: opts.tol,
        });
    }
    Ok(EvaluationResult {
        rho,
        d,
        residual,
        h_norm_g: g_norm(&h, g),
        nu,
        h,
        method: opts.method,
        iterations,
        ell: terms.ell,
        cost: terms.cost,
        m_u,
        ergodicity,
        mesh: engine.mesh,
    })
}

/// Evaluate `policy` on the default mesh by the direct method.
pub fn evaluate_policy(
    model: &PdmpModel,
    policy: &FeedbackPolicy,
    tol: f64,
) -> Result<EvaluationResult, EvalError> {
    let engine = Engine::new(model)?;
    evaluate_with(
        &engine,
        policy,
        &EvalOptions {
            tol,
            ..EvalOptions::default()
        },
    )
}

/// Pseudo-Poisson defect of `result` recomputed on a mesh twice as fine as
/// the one it was solved on.
pub fn residual(
    model: &PdmpModel,
    policy: &FeedbackPolicy,
    result: &EvaluationResult,
) -> Result<f64, EvalError> {
    let engine = Engine::with_mesh(model, result.mesh.doubled())?;
    let terms = engine.policy_terms(policy, 0.0)?;
    Ok(sup_defect(&terms, result.rho, &result.h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;

    fn km(rows: &[&[f64]]) -> KernelMatrix {
        let n = rows.len();
        KernelMatrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    #[test]
    fn invariant_measure_examples() {
        let nu = invariant_measure(&km(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((nu[0] - 0.5).abs() < 1e-14 && (nu[1] - 0.5).abs() < 1e-14);
        let nu = invariant_measure(&km(&[&[0.5, 0.5], &[0.25, 0.75]])).unwrap();
        assert!((nu[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((nu[1] - 2.0 / 3.0).abs() < 1e-14);
        let err = invariant_measure(&km(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap_err();
        assert!(matches!(err, EvalError::MultipleRecurrentClasses { classes: 2 }));
    }

    #[test]
    fn transient_states_get_zero_mass() {
        let k = km(&[&[0.2, 0.8, 0.0], &[0.0, 0.5, 0.5], &[0.0, 0.5, 0.5]]);
        let nu = invariant_measure(&k).unwrap();
        assert_eq!(nu[0], 0.0);
        assert!((nu[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn power_iteration_matches_direct() {
        let k = km(&[&[0.5, 0.5, 0.0], &[0.1, 0.6, 0.3], &[0.3, 0.3, 0.4]]);
        let direct = stationary_direct(&k).unwrap();
        let (power, its) = power_iteration(&k).unwrap();
        assert!(its > 1);
        for (a, b) in direct.iter().zip(&power) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn two_state_kappa_is_second_eigenvalue() {
        // Eigenvalues 1 and 0.5 + 0.75 - 1 = 0.25.
        let k = km(&[&[0.5, 0.5], &[0.25, 0.75]]);
        let nu = invariant_measure(&k).unwrap();
        let erg = estimate_ergodicity(&k, &nu, &[1.0, 2.0]);
        assert!((erg.kappa - 0.25).abs() < 1e-6, "{erg:?}");
        for (k, n) in erg.norms.iter().enumerate() {
            assert!(*n <= erg.a * erg.kappa.powi(k as i32) * (1.0 + 1e-6) + 1e-9);
        }
    }

    #[test]
    fn rank_one_kernel_has_zero_kappa() {
        let k = km(&[&[0.3, 0.7], &[0.3, 0.7]]);
        let nu = invariant_measure(&k).unwrap();
        let erg = estimate_ergodicity(&k, &nu, &[1.0, 1.0]);
        assert_eq!(erg.kappa, 0.0);
        assert!(erg.certified());
    }

    #[test]
    fn constant_cost_forces_zero_bias() {
        let m = trivial_constant(1.7, 2.5, 4);
        let r = evaluate_policy(&m, &FeedbackPolicy::lowest_index(&m), DEFAULT_TOL).unwrap();
        assert!((r.rho - 2.5).abs() < 1e-10);
        assert!(r.h.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn two_state_cycle_average() {
        let (l1, l2, f1, f2) = (2.0, 0.5, 3.0, 1.0);
        let m = two_state_ctmdp([l1, l2], [[f1, f1], [f2, f2]]);
        let r = evaluate_policy(&m, &FeedbackPolicy::lowest_index(&m), DEFAULT_TOL).unwrap();
        let expected = (f1 / l1 + f2 / l2) / (1.0 / l1 + 1.0 / l2);
        assert!((r.rho - expected).abs() < 1e-12);
        let nu_h: f64 = r.nu.iter().zip(&r.h).map(|(a, b)| a * b).sum();
        assert!(nu_h.abs() < 1e-12);
    }

    #[test]
    fn perturbed_bias_shows_in_residual() {
        let m = drift_model(16);
        let p = FeedbackPolicy::lowest_index(&m);
        let mut r = evaluate_policy(&m, &p, DEFAULT_TOL).unwrap();
        assert!(residual(&m, &p, &r).unwrap() <= 1e-10);
        r.h[3] += 0.01;
        assert!(residual(&m, &p, &r).unwrap() >= 0.005);
    }

    #[test]
    fn neumann_agrees_with_direct() {
        let m = drift_model(16);
        let p = FeedbackPolicy::constant(&m, 1);
        let e = Engine::new(&m).unwrap();
        let d = evaluate_with(&e, &p, &EvalOptions::default()).unwrap();
        let s = evaluate_with(
            &e,
            &p,
            &EvalOptions {
                method: Method::Neumann,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert!(s.iterations > 1);
        let diff = d.h.iter().zip(&s.h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn series_refuses_periodic_chain() {
        // The swap kernel has eigenvalue -1: no geometric rate below 1.
        let m = two_state_ctmdp([1.0, 1.0], [[1.0, 1.0], [2.0, 2.0]]);
        let e = Engine::new(&m).unwrap();
        let err = evaluate_with(
            &e,
            &FeedbackPolicy::lowest_index(&m),
            &EvalOptions {
                method: Method::Neumann,
                ..EvalOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::SeriesRefused(_)));
    }

    #[test]
    fn shift_covariance() {
        let m = drift_model(16);
        let p = FeedbackPolicy::lowest_index(&m);
        let base = evaluate_policy(&m, &p, DEFAULT_TOL).unwrap();
        let shifted = evaluate_policy(&m.with_shifted_running_cost(0.75), &p, DEFAULT_TOL).unwrap();
        assert!((shifted.rho - base.rho - 0.75).abs() < 1e-9);
        for (a, b) in base.h.iter().zip(&shifted.h) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
