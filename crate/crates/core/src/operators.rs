//! Discrete-time operators of the embedded jump chain evaluated along
//! feedback-induced flow paths.
//!
//! Tables are interpolated linearly in space between the two states that
//! bracket a cell, and the motion inside a cell is exact, so `Λ(t)` and
//! `∫ f ds` have closed forms. Only the weighted integrals
//! `∫ e^{-αs-Λ(s)} (...) ds` need quadrature: composite eight-point
//! Gauss–Legendre on the cell mesh. The simulator samples the same
//! interpolated model, with no quadrature at all.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{FlowError, PolicyError};
use crate::flow::{CellEnd, Flow, FlowMesh, MeshPiece, MeshSpec, PathEnd, PieceKind};
use crate::model::{PdmpModel, StateActionTable};
use crate::policy::FeedbackPolicy;

/// Integrals of one mesh piece under a fixed action, relative to the piece start.
///
/// Linear functionals over a `[state][action]` table `v` are
/// `v_lo * v(lo, a) + v_hi * v(hi, a)`; the jump part of the kernel is
/// `j_lo * Q(lo, a; ·) + j_hi * Q(hi, a; ·)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PieceIntegrals {
    pub lo: usize,
    pub hi: usize,
    pub action: usize,
    /// `e^{-ατ - Λ(τ)}` at the piece end; zero for sinks whose tail was closed.
    pub survival: f64,
    pub cal_l: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    pub j_lo: f64,
    pub j_hi: f64,
    /// Cumulative rate over the meshed window.
    pub lambda_total: f64,
    /// Survival weight at the end of a sink's meshed window (before closure).
    pub tail_mass: f64,
}

impl PieceIntegrals {
    #[inline]
    pub fn linear(&self, table: &StateActionTable) -> f64 {
        self.v_lo * table.get(self.lo, self.action) + self.v_hi * table.get(self.hi, self.action)
    }

    /// Jump contribution `∫ e^{..} λ Qh`, given `Qh` as a `[state][action]` table.
    #[inline]
    pub fn jump(&self, qh: &StateActionTable) -> f64 {
        self.j_lo * qh.get(self.lo, self.action) + self.j_hi * qh.get(self.hi, self.action)
    }
}

/// Eight-point Gauss–Legendre rule on `[-1, 1]`: (node, weight).
const GAUSS: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

/// `Λ(t)` inside one piece under `action`, local time; sinks keep the end rate
/// frozen beyond the meshed window.
pub fn piece_cum_rate(model: &PdmpModel, piece: &MeshPiece, action: usize, t: f64) -> f64 {
    let l_lo = model.jump_rate.get(piece.lo, action);
    let l_hi = model.jump_rate.get(piece.hi, action);
    let end = piece.duration();
    if t <= end || piece.kind == PieceKind::Transit {
        piece.integrate_linear(l_lo, l_hi, t.min(end))
    } else {
        piece.integrate_linear(l_lo, l_hi, end) + piece.interpolate(l_lo, l_hi, end) * (t - end)
    }
}

/// Jump rate inside one piece at local time `t`.
pub fn piece_rate(model: &PdmpModel, piece: &MeshPiece, action: usize, t: f64) -> f64 {
    let l_lo = model.jump_rate.get(piece.lo, action);
    let l_hi = model.jump_rate.get(piece.hi, action);
    piece.interpolate(l_lo, l_hi, t.min(piece.duration()))
}

pub fn integrate_piece(
    model: &PdmpModel,
    piece: &MeshPiece,
    action: usize,
    alpha: f64,
) -> PieceIntegrals {
    let (lo, hi) = (piece.lo, piece.hi);
    let l_lo = model.jump_rate.get(lo, action);
    let l_hi = model.jump_rate.get(hi, action);
    let mut out = PieceIntegrals {
        lo,
        hi,
        action,
        survival: 1.0,
        cal_l: 0.0,
        v_lo: 0.0,
        v_hi: 0.0,
        j_lo: 0.0,
        j_hi: 0.0,
        lambda_total: 0.0,
        tail_mass: 0.0,
    };
    for k in 0..piece.times.len() - 1 {
        let (t0, t1) = (piece.times[k], piece.times[k + 1]);
        let half = 0.5 * (t1 - t0);
        let mid = 0.5 * (t0 + t1);
        for &(node, gw) in &GAUSS {
            let s = mid + half * node;
            let w = piece.weight_at(s);
            let lam = w * l_lo + (1.0 - w) * l_hi;
            let cum = piece.integrate_linear(l_lo, l_hi, s);
            let e = half * gw * (-alpha * s - cum).exp();
            out.cal_l += e;
            out.v_lo += e * w;
            out.v_hi += e * (1.0 - w);
            out.j_lo += e * lam * w;
            out.j_hi += e * lam * (1.0 - w);
        }
    }
    let end = piece.duration();
    out.lambda_total = piece.integrate_linear(l_lo, l_hi, end);
    let mut surv = (-alpha * end - out.lambda_total).exp();
    if piece.kind == PieceKind::Sink {
        out.tail_mass = surv;
        let w = piece.weight_at(end);
        let lam = w * l_lo + (1.0 - w) * l_hi;
        let r = alpha + lam;
        if r > 0.0 {
            // Frozen data beyond the meshed window, integrated to infinity.
            let e = surv / r;
            out.cal_l += e;
            out.v_lo += e * w;
            out.v_hi += e * (1.0 - w);
            out.j_lo += e * lam * w;
            out.j_hi += e * lam * (1.0 - w);
            surv = 0.0;
        }
    }
    out.survival = surv;
    out
}

/// Feedback policy sampled along the flow line of one origin.
#[derive(Debug, Clone)]
pub struct PolicyPath {
    pub mesh: FlowMesh,
    /// Action applied along each mesh piece.
    pub actions: Vec<usize>,
    /// Action at the boundary hit, when the line reaches the boundary.
    pub boundary_action: Option<usize>,
}

impl PolicyPath {
    pub fn new(
        model: &PdmpModel,
        flow: &Flow,
        mesh_spec: &MeshSpec,
        policy: &FeedbackPolicy,
        x: f64,
    ) -> Result<Self, FlowError> {
        let mesh = flow.build_mesh(x, mesh_spec)?;
        Ok(Self::from_mesh(model, mesh, policy))
    }

    pub fn from_mesh(model: &PdmpModel, mesh: FlowMesh, policy: &FeedbackPolicy) -> Self {
        let actions = mesh.pieces.iter().map(|p| policy.interior[p.owner]).collect();
        let boundary_action = match mesh.end {
            PathEnd::Boundary { boundary, .. } => Some(policy.boundary[boundary]),
            PathEnd::Never => None,
        };
        let _ = model;
        Self {
            mesh,
            actions,
            boundary_action,
        }
    }

    pub fn hit_time(&self) -> f64 {
        match self.mesh.end {
            PathEnd::Boundary { hit_time, .. } => hit_time,
            PathEnd::Never => f64::INFINITY,
        }
    }

    /// Check every node action against the feasible set of its owner.
    pub fn check(&self, model: &PdmpModel) -> Result<(), PolicyError> {
        for (p, &a) in self.mesh.pieces.iter().zip(&self.actions) {
            if !model.actions.is_feasible(p.owner, a) {
                return Err(PolicyError::Infeasible {
                    state: p.owner,
                    action: a,
                });
            }
        }
        if let (PathEnd::Boundary { boundary, .. }, Some(a)) = (self.mesh.end, self.boundary_action)
        {
            let s = model.n_interior() + boundary;
            if !model.actions.is_feasible(s, a) {
                return Err(PolicyError::Infeasible { state: s, action: a });
            }
        }
        Ok(())
    }

    fn integrals(&self, model: &PdmpModel, alpha: f64) -> Vec<PieceIntegrals> {
        self.mesh
            .pieces
            .iter()
            .zip(&self.actions)
            .map(|(p, &a)| integrate_piece(model, p, a, alpha))
            .collect()
    }

    /// Survival weight at the boundary hit (0 when never hit).
    pub fn terminal_weight(&self, model: &PdmpModel, alpha: f64) -> f64 {
        match self.mesh.end {
            PathEnd::Never => 0.0,
            PathEnd::Boundary { .. } => self
                .integrals(model, alpha)
                .iter()
                .map(|b| b.survival)
                .product(),
        }
    }

    /// Survival weight left at the end of the meshed window of a never-hitting
    /// line, before the frozen-data tail closure: the truncation error scale.
    pub fn tail_mass(&self, model: &PdmpModel, alpha: f64) -> f64 {
        if let PathEnd::Boundary { .. } = self.mesh.end {
            return 0.0;
        }
        let ints = self.integrals(model, alpha);
        let before: f64 = ints[..ints.len() - 1].iter().map(|b| b.survival).product();
        before * ints.last().expect("piece").tail_mass
    }

    /// Chain the pieces: `Σ_i (Π_{k<i} S_k) term_i`.
    fn chain(&self, model: &PdmpModel, alpha: f64, term: impl Fn(&PieceIntegrals) -> f64) -> (f64, f64) {
        let mut acc = 0.0;
        let mut surv = 1.0;
        for b in self.integrals(model, alpha) {
            acc += surv * term(&b);
            surv *= b.survival;
        }
        (acc, surv)
    }
}

/// `Λ(x, t)` along the path.
pub fn cum_rate(model: &PdmpModel, path: &PolicyPath, t: f64) -> f64 {
    let mut total = 0.0;
    let last = path.mesh.pieces.len() - 1;
    for (i, ((piece, &a), &off)) in path
        .mesh
        .pieces
        .iter()
        .zip(&path.actions)
        .zip(&path.mesh.offsets)
        .enumerate()
    {
        let local = t - off;
        if local <= piece.duration() || i == last {
            return total + piece_cum_rate(model, piece, a, local.max(0.0));
        }
        total += piece_cum_rate(model, piece, a, piece.duration());
    }
    total
}

/// `L_α v(x, u_φ)`.
pub fn op_l(model: &PdmpModel, alpha: f64, v: &StateActionTable, path: &PolicyPath) -> f64 {
    path.chain(model, alpha, |b| b.linear(v)).0
}

/// `𝓛_α(x, u_φ) = L_α 1`.
pub fn op_cal_l(model: &PdmpModel, alpha: f64, path: &PolicyPath) -> f64 {
    path.chain(model, alpha, |b| b.cal_l).0
}

/// `H_α w(x, u_φ)`; exactly zero when the line never reaches the boundary.
pub fn op_h(model: &PdmpModel, alpha: f64, w: &StateActionTable, path: &PolicyPath) -> f64 {
    match (path.mesh.end, path.boundary_action) {
        (PathEnd::Boundary { boundary, .. }, Some(a)) => {
            path.terminal_weight(model, alpha) * w.get(boundary, a)
        }
        _ => 0.0,
    }
}

/// `G_α h(x, u_φ)` for `h` on the interior grid.
pub fn op_g(model: &PdmpModel, alpha: f64, h: &[f64], path: &PolicyPath) -> f64 {
    let (jumps, surv) = path.chain(model, alpha, |b| {
        b.j_lo * model.qh(b.lo, b.action, h) + b.j_hi * model.qh(b.hi, b.action, h)
    });
    match (path.mesh.end, path.boundary_action) {
        (PathEnd::Boundary { boundary, .. }, Some(a)) => {
            jumps + surv * model.qh(model.n_interior() + boundary, a, h)
        }
        _ => jumps,
    }
}

/// Policy-induced kernel `G_α(x, u_φ(x); ·)` on the interior grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(pub DMatrix<f64>);

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(h);
        (&self.0 * v).iter().copied().collect()
    }
}

/// Per-policy quantities on the interior grid.
#[derive(Debug, Clone)]
pub struct PolicyTerms {
    /// `𝓛(x, u_φ(x))`.
    pub ell: Vec<f64>,
    /// `Lf(x, u_φ(x)) + Hr(x, u_φ(x))`.
    pub cost: Vec<f64>,
    pub kernel: KernelMatrix,
}

#[derive(Debug, Clone)]
struct CellInfo {
    piece: MeshPiece,
    end: CellEnd,
}

/// A model bound to its flow geometry and mesh, with cell integrals cached at `α = 0`.
#[derive(Debug, Clone)]
pub struct Engine<'m> {
    pub model: &'m PdmpModel,
    pub flow: Flow,
    pub mesh: MeshSpec,
    cells: Vec<CellInfo>,
    /// Interior states ordered so that every cell's successor comes first.
    order: Vec<usize>,
    /// `[cell][action]`, present for feasible actions.
    blocks: Vec<Vec<Option<PieceIntegrals>>>,
}

/// Default mesh: at least 4 segments per cell, step at most `1/(2 sup λ)`.
pub fn default_mesh(model: &PdmpModel) -> MeshSpec {
    let rate = model.max_rate();
    MeshSpec {
        per_cell: 4,
        max_step: if rate > 0.0 { 0.5 / rate } else { f64::INFINITY },
        t_max: model.t_max(),
    }
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m PdmpModel) -> Result<Self, FlowError> {
        Self::with_mesh(model, default_mesh(model))
    }

    pub fn with_mesh(model: &'m PdmpModel, mesh: MeshSpec) -> Result<Self, FlowError> {
        let flow = Flow::new(&model.flow, &model.grid)?;
        let n = model.n_interior();
        let cells = (0..n)
            .into_par_iter()
            .map(|j| flow.cell_piece(j, &mesh).map(|(piece, end)| CellInfo { piece, end }))
            .collect::<Result<Vec<_>, _>>()?;
        let order = downstream_order(&cells);
        let blocks = (0..n)
            .into_par_iter()
            .map(|j| {
                (0..model.n_actions())
                    .map(|a| {
                        model.actions.is_feasible(j, a).then(|| {
                            integrate_piece(model, &cells[j].piece, a, 0.0)
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            flow,
            mesh,
            cells,
            order,
            blocks,
        })
    }

    /// Same model with doubled mesh resolution.
    pub fn refined(&self) -> Result<Engine<'m>, FlowError> {
        Engine::with_mesh(self.model, self.mesh.doubled())
    }

    pub fn n(&self) -> usize {
        self.model.n_interior()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn cell_end(&self, j: usize) -> CellEnd {
        self.cells[j].end
    }

    pub fn cell_piece(&self, j: usize) -> &MeshPiece {
        &self.cells[j].piece
    }

    /// Cached `α = 0` integrals of cell `j` under action `a` (feasible only).
    pub fn block(&self, j: usize, a: usize) -> &PieceIntegrals {
        self.blocks[j][a]
            .as_ref()
            .expect("integrals are cached for feasible actions")
    }

    fn block_at(&self, j: usize, a: usize, alpha: f64) -> PieceIntegrals {
        if alpha == 0.0 {
            *self.block(j, a)
        } else {
            integrate_piece(self.model, &self.cells[j].piece, a, alpha)
        }
    }

    pub fn path(&self, policy: &FeedbackPolicy, x: f64) -> Result<PolicyPath, FlowError> {
        PolicyPath::new(self.model, &self.flow, &self.mesh, policy, x)
    }

    /// Path from interior grid point `j`.
    pub fn grid_path(&self, policy: &FeedbackPolicy, j: usize) -> PolicyPath {
        self.path(policy, self.model.grid.points[j])
            .expect("grid flow lines were validated when the engine was built")
    }

    /// `Qh(s, a)` for every state and action.
    pub fn qh_table(&self, h: &[f64]) -> StateActionTable {
        let m = self.model;
        let mut t = StateActionTable::filled(m.n_states(), m.n_actions(), 0.0);
        for s in 0..m.n_states() {
            for a in 0..m.n_actions() {
                t.set(s, a, m.qh(s, a, h));
            }
        }
        t
    }

    /// `𝓛`, `Lf + Hr` and the kernel of a feedback policy at discount `alpha`.
    pub fn policy_terms(&self, policy: &FeedbackPolicy, alpha: f64) -> Result<PolicyTerms, PolicyError> {
        policy.check(self.model)?;
        let m = self.model;
        let n = self.n();
        let mut ell = vec![0.0; n];
        let mut cost = vec![0.0; n];
        let mut kernel = DMatrix::<f64>::zeros(n, n);
        for &j in &self.order {
            let a = policy.interior[j];
            let b = self.block_at(j, a, alpha);
            let mut row: Vec<f64> = m
                .kernel
                .row(b.lo, a)
                .iter()
                .zip(m.kernel.row(b.hi, a))
                .map(|(ql, qh)| b.j_lo * ql + b.j_hi * qh)
                .collect();
            let mut l = b.cal_l;
            let mut c = b.linear(&m.running_cost);
            match self.cells[j].end {
                CellEnd::Next { state, .. } => {
                    l += b.survival * ell[state];
                    c += b.survival * cost[state];
                    for (r, k) in row.iter_mut().zip(kernel.row(state).iter()) {
                        *r += b.survival * k;
                    }
                }
                CellEnd::Boundary { boundary, .. } => {
                    let s = n + boundary;
                    let ab = policy.boundary[boundary];
                    c += b.survival * m.boundary_cost.get(boundary, ab);
                    for (r, q) in row.iter_mut().zip(m.kernel.row(s, ab)) {
                        *r += b.survival * q;
                    }
                }
                CellEnd::Sink { .. } => {}
            }
            ell[j] = l;
            cost[j] = c;
            for (k, v) in row.into_iter().enumerate() {
                kernel[(j, k)] = v;
            }
        }
        Ok(PolicyTerms {
            ell,
            cost,
            kernel: KernelMatrix(kernel),
        })
    }

    pub fn kernel_matrix(&self, policy: &FeedbackPolicy, alpha: f64) -> Result<KernelMatrix, PolicyError> {
        Ok(self.policy_terms(policy, alpha)?.kernel)
    }

    /// One-stage value of cell `j` under action `a`, given the value at the cell exit.
    #[inline]
    pub fn cell_value(&self, j: usize, a: usize, rho: f64, qh: &StateActionTable, exit_value: f64) -> f64 {
        let b = self.block(j, a);
        -rho * b.cal_l + b.linear(&self.model.running_cost) + b.jump(qh) + b.survival * exit_value
    }

    /// `r(z, a) + Qh(z, a)` at boundary point `b`.
    #[inline]
    pub fn boundary_value(&self, boundary: usize, a: usize, qh: &StateActionTable) -> f64 {
        self.model.boundary_cost.get(boundary, a) + qh.get(self.n() + boundary, a)
    }

    /// Backward march over cells, downstream first: `value[j] = cell(j, exit)`
    /// where `exit` is the value where cell `j` ends (`boundary[b]` at a
    /// boundary point, zero for sinks).
    pub fn march(&self, boundary: &[f64], mut cell: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
        let mut value = vec![0.0; self.n()];
        for &j in &self.order {
            let exit = match self.cells[j].end {
                CellEnd::Next { state, .. } => value[state],
                CellEnd::Boundary { boundary: b, .. } => boundary[b],
                CellEnd::Sink { .. } => 0.0,
            };
            value[j] = cell(j, exit);
        }
        value
    }

    /// Boundary points reached by at least one interior flow line.
    pub fn reached_boundaries(&self) -> Vec<bool> {
        let mut hit = vec![false; self.model.grid.n_boundary()];
        for c in &self.cells {
            if let CellEnd::Boundary { boundary, .. } = c.end {
                hit[boundary] = true;
            }
        }
        hit
    }

    /// `t*(x_j)` for every interior grid point.
    pub fn hit_times(&self) -> Vec<f64> {
        let mut t = vec![f64::INFINITY; self.n()];
        for &j in &self.order {
            t[j] = match self.cells[j].end {
                CellEnd::Next { state, tau } => tau + t[state],
                CellEnd::Boundary { tau, .. } => tau,
                CellEnd::Sink { .. } => f64::INFINITY,
            };
        }
        t
    }
}

fn downstream_order(cells: &[CellInfo]) -> Vec<usize> {
    let n = cells.len();
    let mut depth = vec![usize::MAX; n];
    for start in 0..n {
        let mut chain = Vec::new();
        let mut j = start;
        loop {
            if depth[j] != usize::MAX {
                break;
            }
            chain.push(j);
            match cells[j].end {
                CellEnd::Next { state, .. } => j = state,
                _ => {
                    depth[j] = 0;
                    chain.pop();
                    break;
                }
            }
        }
        let mut d = depth[j];
        for &k in chain.iter().rev() {
            d += 1;
            depth[k] = d;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| (depth[j], j));
    order
}
