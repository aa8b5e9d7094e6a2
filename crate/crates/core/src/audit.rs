//! Numerical audit of the standing assumptions on a discretized model.
//!
//! Every inequality is checked state by state with the supremum over feasible
//! actions, and reports the worst slack `rhs - lhs` with the state and action
//! that attain it. A check passes when the worst slack is `≥ -tol`.

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::evaluation::{estimate_ergodicity, invariant_measure, Ergodicity};
use crate::flow::{CellEnd, PieceKind};
use crate::model::{PdmpModel, StateActionTable};
use crate::operators::{integrate_piece, Engine};
use crate::policy::FeedbackPolicy;

pub const AUDIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Pass,
    Fail,
    NotCheckable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub item: String,
    pub description: String,
    pub status: AuditStatus,
    /// Smallest `rhs - lhs` over states and feasible actions.
    pub worst_slack: Option<f64>,
    pub worst_state: Option<usize>,
    pub worst_action: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tol: f64,
    pub items: Vec<AuditItem>,
    /// `(a, κ)` of the audited policy's kernel, when a policy was given.
    pub ergodicity: Option<Ergodicity>,
    pub omitted: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.status != AuditStatus::Fail)
    }

    pub fn failures(&self) -> Vec<&AuditItem> {
        self.items
            .iter()
            .filter(|i| i.status == AuditStatus::Fail)
            .collect()
    }

    pub fn item(&self, name: &str) -> Option<&AuditItem> {
        self.items.iter().find(|i| i.item == name)
    }
}

/// Running minimum of slacks with its location.
struct Worst {
    slack: f64,
    state: Option<usize>,
    action: Option<usize>,
}

impl Worst {
    fn new() -> Self {
        Self {
            slack: f64::INFINITY,
            state: None,
            action: None,
        }
    }

    fn see(&mut self, slack: f64, state: usize, action: Option<usize>) {
        // NaN slacks count as the worst possible.
        if slack < self.slack || (slack.is_nan() && !self.slack.is_nan()) {
            self.slack = slack;
            self.state = Some(state);
            self.action = action;
        }
    }

    fn item(self, item: &str, description: &str, tol: f64) -> AuditItem {
        let checked = self.state.is_some();
        let pass = !checked || self.slack >= -tol;
        AuditItem {
            item: item.into(),
            description: description.into(),
            status: if pass { AuditStatus::Pass } else { AuditStatus::Fail },
            worst_slack: checked.then_some(self.slack),
            worst_state: self.state,
            worst_action: self.action,
            note: (!checked).then(|| "no states to check".to_string()),
        }
    }
}

fn feasible(model: &PdmpModel, s: usize) -> &[usize] {
    &model.actions.feasible[s]
}

/// `𝒳g` at every interior grid point by a three-point stencil along the flow.
pub fn generator_of_g(engine: &Engine) -> Vec<f64> {
    let m = engine.model;
    let g = &m.lyapunov_g[..m.n_interior()];
    (0..m.n_interior())
        .map(|j| engine.flow.flow_derivative(g, j))
        .collect()
}

fn check_cu1(engine: &Engine, tol: f64) -> AuditItem {
    let m = engine.model;
    let n = m.n_interior();
    let k = &m.constants;
    let g_int = &m.lyapunov_g[..n];
    let xg = generator_of_g(engine);
    let mut worst = Worst::new();
    for j in 0..n {
        for &a in feasible(m, j) {
            let lam = m.jump_rate.get(j, a);
            let g = m.lyapunov_g[j];
            let lhs = xg[j] + k.c * g - lam * (g - m.qh(j, a, g_int));
            worst.see(k.b - lhs, j, Some(a));
        }
    }
    worst.item("Cu1", "Xg + c g - λ(g - Qg) ≤ b on the interior", tol)
}

fn check_cu3(model: &PdmpModel, tol: f64) -> AuditItem {
    let mut worst = Worst::new();
    for s in 0..model.n_states() {
        for &a in feasible(model, s) {
            let slack = model.constants.big_m * model.lyapunov_g[s] - model.running_cost.get(s, a);
            worst.see(slack, s, Some(a));
        }
    }
    worst.item("Cu3", "f ≤ M g", tol)
}

fn check_cu2(model: &PdmpModel, tol: f64) -> AuditItem {
    let n = model.n_interior();
    let g_int = &model.lyapunov_g[..n];
    let mut worst = Worst::new();
    for z in 0..model.grid.n_boundary() {
        let s = n + z;
        for &a in feasible(model, s) {
            let lhs = model.lyapunov_rbar[z] + model.qh(s, a, g_int);
            worst.see(model.lyapunov_g[s] - lhs, s, Some(a));
        }
    }
    worst.item("Cu2", "r̄ + Qg ≤ g on the boundary", tol)
}

fn check_cu3a(model: &PdmpModel, tol: f64) -> AuditItem {
    let n = model.n_interior();
    let k = &model.constants;
    let factor = k.big_m / (k.c + k.delta);
    let mut worst = Worst::new();
    for z in 0..model.grid.n_boundary() {
        for &a in feasible(model, n + z) {
            let slack = factor * model.lyapunov_rbar[z] - model.boundary_cost.get(z, a);
            worst.see(slack, n + z, Some(a));
        }
    }
    worst.item("Cu3a", "r ≤ M/(c+δ) r̄ on the boundary", tol)
}

/// `Gg` under `policy`, or its maximum over per-cell action sequences.
fn kernel_g(engine: &Engine, policy: Option<&FeedbackPolicy>) -> Result<Vec<f64>, EvalError> {
    let m = engine.model;
    let n = m.n_interior();
    let g_int = &m.lyapunov_g[..n];
    if let Some(p) = policy {
        return Ok(engine.kernel_matrix(p, 0.0)?.apply(g_int));
    }
    let qg = engine.qh_table(g_int);
    let boundary: Vec<f64> = (0..m.grid.n_boundary())
        .map(|z| {
            feasible(m, n + z)
                .iter()
                .map(|&a| qg.get(n + z, a))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(engine.march(&boundary, |j, exit| {
        feasible(m, j)
            .iter()
            .map(|&a| {
                let b = engine.block(j, a);
                b.jump(&qg) + b.survival * exit
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

fn check_eqa3(
    engine: &Engine,
    policy: Option<&FeedbackPolicy>,
    tol: f64,
) -> Result<AuditItem, EvalError> {
    let m = engine.model;
    let k = &m.constants;
    let gg = kernel_g(engine, policy)?;
    let mut worst = Worst::new();
    for (j, v) in gg.iter().enumerate() {
        worst.see(k.k_g * m.lyapunov_g[j] + k.big_k_g - v, j, policy.map(|p| p.interior[j]));
    }
    let mut item = worst.item("eqA3", "Gg ≤ k_g g + K_g", tol);
    item.note = Some(if policy.is_some() {
        "kernel of the audited policy".into()
    } else {
        "maximum over piecewise-constant action paths".into()
    });
    Ok(item)
}

/// Model whose jump rate is `λ̲` under every action, and whose running cost is
/// `sup_a f` (used for items b, c and e of the rate-floor assumption).
fn floor_model(model: &PdmpModel) -> PdmpModel {
    let mut m = model.clone();
    let ns = m.n_states();
    let mut lam = StateActionTable::filled(ns, m.n_actions(), 0.0);
    let mut f = StateActionTable::filled(ns, m.n_actions(), 0.0);
    for s in 0..ns {
        let fmax = feasible(model, s)
            .iter()
            .map(|&a| model.running_cost.get(s, a))
            .fold(0.0, f64::max);
        for a in 0..m.n_actions() {
            lam.set(s, a, model.constants.lambda_lower[s]);
            f.set(s, a, fmax);
        }
    }
    m.jump_rate = lam;
    m.running_cost = f;
    m
}

/// Per interior point: `(∫_0^{t*} e^{αt - Λ̲}, ∫_0^{t*} e^{-Λ̲} sup f, window decay)`.
struct FloorIntegrals {
    growth: Vec<f64>,
    cost: Vec<f64>,
    /// `e^{cT - Λ̲(T)}` at the end of the meshed window of never-hitting lines.
    window_decay: Vec<Option<f64>>,
}

fn floor_integrals(engine: &Engine) -> FloorIntegrals {
    let m = engine.model;
    let fm = floor_model(m);
    let c = m.constants.c;
    let n = m.n_interior();
    let mut growth_blocks = Vec::with_capacity(n);
    let mut cost_blocks = Vec::with_capacity(n);
    for j in 0..n {
        let piece = engine.cell_piece(j);
        let mut gb = integrate_piece(&fm, piece, 0, -c);
        if piece.kind == PieceKind::Sink && gb.survival > 0.0 {
            // λ̲ ≤ c at the fixed point: the growth integral diverges.
            gb.cal_l = f64::INFINITY;
        }
        growth_blocks.push(gb);
        let mut cb = integrate_piece(&fm, piece, 0, 0.0);
        if piece.kind == PieceKind::Sink && cb.survival > 0.0 && cb.linear(&fm.running_cost) > 0.0 {
            cb.v_lo = f64::INFINITY;
        }
        cost_blocks.push(cb);
    }
    let zeros = vec![0.0; m.grid.n_boundary()];
    let growth = engine.march(&zeros, |j, exit| {
        let b = &growth_blocks[j];
        b.cal_l + b.survival * exit
    });
    let cost = engine.march(&zeros, |j, exit| {
        let b = &cost_blocks[j];
        b.linear(&fm.running_cost) + b.survival * exit
    });
    // Decay at the window end along never-hitting lines: product of the
    // growth survivals up to the sink cell, times the window-end value.
    let mut window_decay = vec![None; n];
    for &j in engine.order() {
        window_decay[j] = match engine.cell_end(j) {
            CellEnd::Sink { .. } => Some(growth_blocks[j].tail_mass),
            CellEnd::Next { state, .. } => {
                window_decay[state].map(|d| d * growth_blocks[j].survival)
            }
            CellEnd::Boundary { .. } => None,
        };
    }
    FloorIntegrals {
        growth,
        cost,
        window_decay,
    }
}

fn check_rate_floor(model: &PdmpModel, tol: f64) -> AuditItem {
    let mut worst = Worst::new();
    for s in 0..model.n_states() {
        for &a in feasible(model, s) {
            worst.see(
                model.jump_rate.get(s, a) - model.constants.lambda_lower[s],
                s,
                Some(a),
            );
        }
    }
    worst.item("A3.7a", "λ ≥ λ̲", tol)
}

/// Audit the standing assumptions; `(a, κ)` is estimated when a policy is given.
pub fn audit_assumptions(
    model: &PdmpModel,
    policy: Option<&FeedbackPolicy>,
) -> Result<AuditReport, EvalError> {
    let engine = Engine::new(model)?;
    audit_with(&engine, policy, AUDIT_TOL)
}

pub fn audit_with(
    engine: &Engine,
    policy: Option<&FeedbackPolicy>,
    tol: f64,
) -> Result<AuditReport, EvalError> {
    let m = engine.model;
    if let Some(p) = policy {
        p.check(m)?;
    }
    let mut items = vec![
        check_cu1(engine, tol),
        check_cu3(m, tol),
        check_cu2(m, tol),
        check_cu3a(m, tol),
        check_eqa3(engine, policy, tol)?,
        check_rate_floor(m, tol),
    ];

    let floor = floor_integrals(engine);
    let mut worst = Worst::new();
    for (j, v) in floor.growth.iter().enumerate() {
        worst.see(m.constants.k_lambda - v, j, None);
    }
    items.push(worst.item("A3.7b", "∫ e^{ct - ∫λ̲} dt ≤ K_λ up to t*", tol));

    let never: Vec<usize> = (0..m.n_interior())
        .filter(|&j| floor.window_decay[j].is_some())
        .collect();
    let decay_note = never
        .iter()
        .map(|&j| floor.window_decay[j].unwrap_or(0.0))
        .fold(0.0, f64::max);
    for (name, description) in [
        ("A3.7c", "e^{ct - ∫λ̲} → 0 on never-hitting lines"),
        ("A3.7d", "e^{-∫λ̲} g(φ) → 0 on never-hitting lines"),
    ] {
        let (status, note) = if never.is_empty() {
            (AuditStatus::Pass, "every flow line reaches the boundary".to_string())
        } else {
            (
                AuditStatus::NotCheckable,
                format!(
                    "limit t → ∞ on {} never-hitting lines; largest e^{{cT - ∫λ̲}} at the window end T = {:.3}: {:.3e}",
                    never.len(),
                    engine.mesh.t_max,
                    decay_note
                ),
            )
        };
        items.push(AuditItem {
            item: name.into(),
            description: description.into(),
            status,
            worst_slack: None,
            worst_state: None,
            worst_action: None,
            note: Some(note),
        });
    }

    let (mut worst_cost, mut arg) = (0.0f64, None);
    for (j, v) in floor.cost.iter().enumerate() {
        if !(v <= &worst_cost) {
            worst_cost = *v;
            arg = Some(j);
        }
    }
    items.push(AuditItem {
        item: "A3.7e".into(),
        description: "∫ e^{-∫λ̲} sup_a f dt < ∞".into(),
        status: if worst_cost.is_finite() {
            AuditStatus::Pass
        } else {
            AuditStatus::Fail
        },
        worst_slack: None,
        worst_state: arg,
        worst_action: None,
        note: Some(format!("largest value {worst_cost:.6e}")),
    });

    let ergodicity = match policy {
        Some(p) => {
            let kernel = engine.kernel_matrix(p, 0.0)?;
            let nu = invariant_measure(&kernel)?;
            let erg = estimate_ergodicity(&kernel, &nu, &m.lyapunov_g[..m.n_interior()]);
            items.push(AuditItem {
                item: "A3.5".into(),
                description: "‖Gᵏ - 1ν‖_g ≤ a κᵏ with κ < 1".into(),
                status: if erg.certified() {
                    AuditStatus::Pass
                } else {
                    AuditStatus::Fail
                },
                worst_slack: Some(1.0 - erg.kappa),
                worst_state: None,
                worst_action: None,
                note: Some(format!("a = {:.6}, κ = {:.6}", erg.a, erg.kappa)),
            });
            Some(erg)
        }
        None => None,
    };

    Ok(AuditReport {
        tol,
        items,
        ergodicity,
        omitted: vec![
            "A2.5: finiteness of the discounted value has no constructive check".into(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;

    #[test]
    fn toy_with_unit_weight_passes_cu1() {
        let m = dominated_ctmdp(0.5);
        assert!(m.lyapunov_g.iter().all(|&g| g == 1.0));
        let r = audit_assumptions(&m, None).unwrap();
        let cu1 = r.item("Cu1").unwrap();
        assert_eq!(cu1.status, AuditStatus::Pass);
        assert!(cu1.worst_slack.unwrap() >= 0.0);
    }

    #[test]
    fn running_cost_above_bound_fails_cu3() {
        let mut m = drift_model(8);
        let bound = m.constants.big_m * m.lyapunov_g[2];
        m.running_cost.set(2, 0, bound + 1.0);
        let r = audit_assumptions(&m, None).unwrap();
        let cu3 = r.item("Cu3").unwrap();
        assert_eq!(cu3.status, AuditStatus::Fail);
        assert_eq!((cu3.worst_state, cu3.worst_action), (Some(2), Some(0)));
        assert!((cu3.worst_slack.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn bundled_fixtures_pass() {
        for m in [drift_model(16), contracting_model(9), boundary_cycle(2.0, 8), dominated_ctmdp(0.5)] {
            let p = FeedbackPolicy::lowest_index(&m);
            let r = audit_assumptions(&m, Some(&p)).unwrap();
            assert!(r.passed(), "{:#?}", r.failures());
        }
    }

    #[test]
    fn policy_free_eqa3_dominates_each_policy() {
        let m = drift_model(16);
        let e = Engine::new(&m).unwrap();
        let sup = kernel_g(&e, None).unwrap();
        for a in 0..2 {
            let p = FeedbackPolicy::constant(&m, a);
            for (v, s) in kernel_g(&e, Some(&p)).unwrap().iter().zip(&sup) {
                assert!(*v <= s + 1e-12);
            }
        }
    }

    #[test]
    fn larger_b_never_breaks_cu1() {
        let mut m = drift_model(8);
        m.constants.b = 0.0;
        let before = audit_assumptions(&m, None).unwrap().item("Cu1").unwrap().clone();
        m.constants.b = 100.0;
        let after = audit_assumptions(&m, None).unwrap().item("Cu1").unwrap().clone();
        assert!(after.worst_slack.unwrap() >= before.worst_slack.unwrap());
        assert_eq!(after.status, AuditStatus::Pass);
    }

    #[test]
    fn growth_integral_of_trivial_flow() {
        // t* = ∞, λ̲ ≡ 2, c: ∫ e^{(c-2)t} dt = 1/(2-c).
        let m = trivial_constant(2.0, 1.0, 3);
        let e = Engine::new(&m).unwrap();
        let f = floor_integrals(&e);
        let expected = 1.0 / (2.0 - m.constants.c);
        for v in f.growth {
            assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
        }
    }
}
