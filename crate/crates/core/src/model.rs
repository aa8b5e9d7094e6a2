//! Problem-instance schema, loading, and structural validation.
//!
//! State tables are indexed by *state index*: interior grid points come first
//! (`0..n_interior`), followed by boundary points (`n_interior..n_states`).
//! Kernel rows are distributions over interior grid points only.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::flow::{Flow, FlowKind, FlowSpec};

pub const MODEL_SCHEMA: &str = "pdmp-model/1";

/// Row-sum tolerance for kernel rows.
pub const KERNEL_ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    pub points: Vec<f64>,
    pub boundary_points: Vec<f64>,
}

impl StateGrid {
    pub fn n_interior(&self) -> usize {
        self.points.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary_points.len()
    }

    pub fn n_states(&self) -> usize {
        self.points.len() + self.boundary_points.len()
    }

    /// Coordinate of a state index (interior or boundary).
    pub fn coord(&self, state: usize) -> f64 {
        if state < self.points.len() {
            self.points[state]
        } else {
            self.boundary_points[state - self.points.len()]
        }
    }

    pub fn is_boundary(&self, state: usize) -> bool {
        state >= self.points.len()
    }

    /// Index of the interior point equal to `x` within `tol`, if any.
    pub fn interior_index(&self, x: f64, tol: f64) -> Option<usize> {
        self.points.iter().position(|p| (p - x).abs() <= tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionGrid {
    pub values: Vec<f64>,
    /// Feasible action indices per state index.
    pub feasible: Vec<Vec<usize>>,
}

impl ActionGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_feasible(&self, state: usize, action: usize) -> bool {
        self.feasible[state].contains(&action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub b: f64,
    pub c: f64,
    pub delta: f64,
    #[serde(rename = "m")]
    pub big_m: f64,
    /// Lower jump-rate envelope per state index.
    pub lambda_lower: Vec<f64>,
    pub k_lambda: f64,
    pub k_g: f64,
    #[serde(rename = "big_k_g")]
    pub big_k_g: f64,
}

/// Dense `[state][action]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionTable {
    n_actions: usize,
    data: Vec<f64>,
}

impl StateActionTable {
    pub fn from_rows(rows: &[Vec<f64>], n_actions: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * n_actions);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self { n_actions, data }
    }

    pub fn filled(n_rows: usize, n_actions: usize, value: f64) -> Self {
        Self {
            n_actions,
            data: vec![value; n_rows * n_actions],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, action: usize) -> f64 {
        self.data[row * self.n_actions + action]
    }

    #[inline]
    pub fn set(&mut self, row: usize, action: usize, value: f64) {
        self.data[row * self.n_actions + action] = value;
    }

    pub fn n_rows(&self) -> usize {
        if self.n_actions == 0 {
            0
        } else {
            self.data.len() / self.n_actions
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.n_actions.max(1))
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n_actions: self.n_actions,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Transition kernel: a distribution over interior points per `(state, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n_actions: usize,
    n_targets: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn new(n_states: usize, n_actions: usize, n_targets: usize) -> Self {
        Self {
            n_actions,
            n_targets,
            data: vec![0.0; n_states * n_actions * n_targets],
        }
    }

    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.n_actions + action) * self.n_targets;
        &self.data[start..start + self.n_targets]
    }

    #[inline]
    pub fn row_mut(&mut self, state: usize, action: usize) -> &mut [f64] {
        let start = (state * self.n_actions + action) * self.n_targets;
        &mut self.data[start..start + self.n_targets]
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    /// `Σ_z h(z) Q(state, action; z)`.
    pub fn apply(&self, state: usize, action: usize, h: &[f64]) -> f64 {
        self.row(state, action)
            .iter()
            .zip(h)
            .map(|(q, v)| q * v)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdmpModel {
    pub grid: StateGrid,
    pub actions: ActionGrid,
    pub flow: FlowSpec,
    /// `λ(x, a)` over all states.
    pub jump_rate: StateActionTable,
    pub kernel: Kernel,
    /// `f(x, a)` over all states (boundary rows close the interpolation bracket).
    pub running_cost: StateActionTable,
    /// `r(z, a)` over boundary points.
    pub boundary_cost: StateActionTable,
    /// `g` over all states.
    pub lyapunov_g: Vec<f64>,
    /// `r̄` over boundary points.
    pub lyapunov_rbar: Vec<f64>,
    pub constants: Constants,
}

impl PdmpModel {
    pub fn n_interior(&self) -> usize {
        self.grid.n_interior()
    }

    pub fn n_states(&self) -> usize {
        self.grid.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Truncation horizon for never-hitting flow lines, defaulting to `50 / c`.
    pub fn t_max(&self) -> f64 {
        self.flow.t_max.unwrap_or(50.0 / self.constants.c)
    }

    /// Largest jump rate over feasible pairs.
    pub fn max_rate(&self) -> f64 {
        let mut m: f64 = 0.0;
        for s in 0..self.n_states() {
            for &a in &self.actions.feasible[s] {
                m = m.max(self.jump_rate.get(s, a));
            }
        }
        m
    }

    pub fn qh(&self, state: usize, action: usize, h: &[f64]) -> f64 {
        self.kernel.apply(state, action, h)
    }

    /// Replace the running cost with `f ↦ f + shift` everywhere.
    pub fn with_shifted_running_cost(&self, shift: f64) -> Self {
        let mut m = self.clone();
        m.running_cost = m.running_cost.map(|v| v + shift);
        m
    }

    pub fn to_file(&self) -> ModelFile {
        let n_act = self.n_actions();
        let kernel = (0..self.n_states())
            .map(|s| (0..n_act).map(|a| self.kernel.row(s, a).to_vec()).collect())
            .collect();
        ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            grid: GridSection {
                points: self.grid.points.clone(),
                boundary_points: self.grid.boundary_points.clone(),
            },
            actions: ActionSection {
                values: self.actions.values.clone(),
                feasible: self.actions.feasible.clone(),
            },
            flow: FlowSection::from_spec(&self.flow),
            rates: RateSection {
                jump_rate: self.jump_rate.rows(),
            },
            kernel,
            costs: CostSection {
                running: self.running_cost.rows(),
                boundary: self.boundary_cost.rows(),
            },
            lyapunov: LyapunovSection {
                g: self.lyapunov_g.clone(),
                rbar: self.lyapunov_rbar.clone(),
            },
            constants: self.constants.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: String,
    pub grid: GridSection,
    pub actions: ActionSection,
    pub flow: FlowSection,
    pub rates: RateSection,
    /// `[state][action][interior target]`.
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub costs: CostSection,
    pub lyapunov: LyapunovSection,
    pub constants: Constants,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub points: Vec<f64>,
    #[serde(default)]
    pub boundary_points: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSection {
    pub values: Vec<f64>,
    pub feasible: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
}

impl FlowSection {
    fn from_spec(spec: &FlowSpec) -> Self {
        let mut s = FlowSection {
            kind: String::new(),
            alpha0: None,
            alpha1: None,
            velocity: None,
            t_max: spec.t_max,
            domain: spec.domain.map(|(a, b)| [a, b]),
        };
        match &spec.kind {
            FlowKind::Trivial => s.kind = "trivial".into(),
            FlowKind::Affine { alpha0, alpha1 } => {
                s.kind = "affine1d".into();
                s.alpha0 = Some(*alpha0);
                s.alpha1 = Some(*alpha1);
            }
            FlowKind::Tabulated { velocity } => {
                s.kind = "tabulated1d".into();
                s.velocity = Some(velocity.clone());
            }
        }
        s
    }

    fn to_spec(&self) -> Result<FlowSpec, ModelError> {
        let missing = |field: &str| ModelError::Field {
            field: format!("flow.{field}"),
            message: format!("required for flow kind \"{}\"", self.kind),
        };
        let kind = match self.kind.as_str() {
            "trivial" => FlowKind::Trivial,
            "affine1d" => FlowKind::Affine {
                alpha0: self.alpha0.ok_or_else(|| missing("alpha0"))?,
                alpha1: self.alpha1.unwrap_or(0.0),
            },
            "tabulated1d" => FlowKind::Tabulated {
                velocity: self.velocity.clone().ok_or_else(|| missing("velocity"))?,
            },
            other => {
                return Err(ModelError::Field {
                    field: "flow.kind".into(),
                    message: format!(
                        "unknown flow kind \"{other}\" (expected trivial, affine1d or tabulated1d)"
                    ),
                })
            }
        };
        Ok(FlowSpec {
            kind,
            t_max: self.t_max,
            domain: self.domain.map(|[a, b]| (a, b)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub jump_rate: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub running: Vec<Vec<f64>>,
    #[serde(default)]
    pub boundary: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSection {
    pub g: Vec<f64>,
    #[serde(default)]
    pub rbar: Vec<f64>,
}

fn check_len(table: &str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            table: table.to_string(),
            expected,
            found,
        })
    }
}

impl ModelFile {
    /// Dimension-check every table against the grids and build the model.
    pub fn into_model(self) -> Result<PdmpModel, ModelError> {
        if self.schema != MODEL_SCHEMA {
            return Err(ModelError::Field {
                field: "schema".into(),
                message: format!("expected \"{MODEL_SCHEMA}\", found \"{}\"", self.schema),
            });
        }
        let n = self.grid.points.len();
        let nb = self.grid.boundary_points.len();
        let ns = n + nb;
        let na = self.actions.values.len();
        if n == 0 {
            return Err(ModelError::Field {
                field: "grid.points".into(),
                message: "at least one interior point is required".into(),
            });
        }
        if na == 0 {
            return Err(ModelError::Field {
                field: "actions.values".into(),
                message: "at least one action is required".into(),
            });
        }
        check_len("actions.feasible", ns, self.actions.feasible.len())?;
        for (s, set) in self.actions.feasible.iter().enumerate() {
            if let Some(&a) = set.iter().find(|&&a| a >= na) {
                return Err(ModelError::Field {
                    field: format!("actions.feasible[{s}]"),
                    message: format!("action index {a} out of range (have {na} actions)"),
                });
            }
        }
        check_len("rates.jump_rate", ns, self.rates.jump_rate.len())?;
        for (s, row) in self.rates.jump_rate.iter().enumerate() {
            check_len(&format!("rates.jump_rate[{s}]"), na, row.len())?;
        }
        check_len("kernel", ns, self.kernel.len())?;
        for (s, per_action) in self.kernel.iter().enumerate() {
            check_len(&format!("kernel[{s}]"), na, per_action.len())?;
            for (a, row) in per_action.iter().enumerate() {
                check_len(&format!("kernel[{s}][{a}]"), n, row.len())?;
            }
        }
        check_len("costs.running", ns, self.costs.running.len())?;
        for (s, row) in self.costs.running.iter().enumerate() {
            check_len(&format!("costs.running[{s}]"), na, row.len())?;
        }
        check_len("costs.boundary", nb, self.costs.boundary.len())?;
        for (b, row) in self.costs.boundary.iter().enumerate() {
            check_len(&format!("costs.boundary[{b}]"), na, row.len())?;
        }
        check_len("lyapunov.g", ns, self.lyapunov.g.len())?;
        check_len("lyapunov.rbar", nb, self.lyapunov.rbar.len())?;
        check_len(
            "constants.lambda_lower",
            ns,
            self.constants.lambda_lower.len(),
        )?;
        let flow = self.flow.to_spec()?;
        if let FlowKind::Tabulated { velocity } = &flow.kind {
            check_len("flow.velocity", ns, velocity.len())?;
        }

        let mut kernel = Kernel::new(ns, na, n);
        for (s, per_action) in self.kernel.iter().enumerate() {
            for (a, row) in per_action.iter().enumerate() {
                kernel.row_mut(s, a).copy_from_slice(row);
            }
        }
        Ok(PdmpModel {
            grid: StateGrid {
                points: self.grid.points,
                boundary_points: self.grid.boundary_points,
            },
            actions: ActionGrid {
                values: self.actions.values,
                feasible: self.actions.feasible,
            },
            flow,
            jump_rate: StateActionTable::from_rows(&self.rates.jump_rate, na),
            kernel,
            running_cost: StateActionTable::from_rows(&self.costs.running, na),
            boundary_cost: StateActionTable::from_rows(&self.costs.boundary, na),
            lyapunov_g: self.lyapunov.g,
            lyapunov_rbar: self.lyapunov.rbar,
            constants: self.constants,
        })
    }
}

/// Parse and dimension-check a model document without semantic validation.
pub fn parse_model(text: &str) -> Result<PdmpModel, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ModelFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ModelError::Parse {
            field: path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    file.into_model()
}

/// Read a model file, dimension-check it, and reject it if any invariant fails.
pub fn load_model(path: impl AsRef<Path>) -> Result<PdmpModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let model = parse_model(&text)?;
    let violations = validate_model(&model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(ModelError::Invalid(violations))
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub location: String,
    pub magnitude: f64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at {}: {} (magnitude {:.3e})",
            self.invariant, self.location, self.message, self.magnitude
        )
    }
}

fn state_label(model: &PdmpModel, s: usize) -> String {
    let n = model.n_interior();
    if s < n {
        format!("x{s}={}", model.grid.points[s])
    } else {
        format!("z{}={}", s - n, model.grid.boundary_points[s - n])
    }
}

/// Check every structural invariant; an empty list means the model is well formed.
pub fn validate_model(model: &PdmpModel) -> Vec<Violation> {
    let out = std::cell::RefCell::new(Vec::new());
    let push = |invariant: &str, location: String, magnitude: f64, message: String| {
        out.borrow_mut().push(Violation {
            invariant: invariant.to_string(),
            location,
            magnitude,
            message,
        })
    };
    let n = model.n_interior();
    let ns = model.n_states();

    for (i, w) in model.grid.points.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            push(
                "grid_ordered",
                format!("points[{i}..{}]", i + 2),
                w[0] - w[1],
                "interior points must be strictly increasing".into(),
            );
        }
    }
    for (b, z) in model.grid.boundary_points.iter().enumerate() {
        if model.grid.points.iter().any(|p| p == z) {
            push(
                "grid_distinct",
                format!("z{b}={z}"),
                0.0,
                "boundary point coincides with an interior point".into(),
            );
        }
    }
    for (s, coord) in (0..ns).map(|s| (s, model.grid.coord(s))) {
        if !coord.is_finite() {
            push(
                "finite",
                state_label(model, s),
                f64::NAN,
                "state coordinate is not finite".into(),
            );
        }
    }

    for s in 0..ns {
        if model.actions.feasible[s].is_empty() {
            push(
                "feasible_nonempty",
                state_label(model, s),
                0.0,
                "feasible action set is empty".into(),
            );
        }
    }

    let c = &model.constants;
    for (name, value, ok) in [
        ("b", c.b, c.b >= 0.0),
        ("c", c.c, c.c > 0.0),
        ("delta", c.delta, c.delta > 0.0),
        ("m", c.big_m, c.big_m >= 0.0),
        ("k_lambda", c.k_lambda, c.k_lambda >= 0.0),
        ("k_g", c.k_g, c.k_g > 0.0 && c.k_g < 1.0),
        ("big_k_g", c.big_k_g, c.big_k_g >= 0.0),
    ] {
        if !ok || !value.is_finite() {
            push(
                "constant_range",
                format!("constants.{name}"),
                value,
                format!("constant {name} = {value} outside its admissible range"),
            );
        }
    }

    for s in 0..ns {
        let label = state_label(model, s);
        let floor = c.lambda_lower[s];
        if !(floor.is_finite() && floor >= 0.0) {
            push(
                "nonnegative",
                format!("lambda_lower({label})"),
                floor,
                "lower rate must be finite and non-negative".into(),
            );
        }
        for a in 0..model.n_actions() {
            let lam = model.jump_rate.get(s, a);
            if !(lam.is_finite() && lam >= 0.0) {
                push(
                    "nonnegative",
                    format!("lambda({label},a{a})"),
                    lam,
                    "jump rate must be finite and non-negative".into(),
                );
            }
            let f = model.running_cost.get(s, a);
            if !(f.is_finite() && f >= 0.0) {
                push(
                    "nonnegative",
                    format!("f({label},a{a})"),
                    f,
                    "running cost must be finite and non-negative".into(),
                );
            }
            if model.actions.is_feasible(s, a) && lam < floor {
                push(
                    "rate_floor",
                    format!("({label},a{a})"),
                    floor - lam,
                    format!("lambda = {lam} below lambda_lower = {floor}"),
                );
            }
            let row = model.kernel.row(s, a);
            if let Some(q) = row.iter().find(|q| !(q.is_finite() && **q >= 0.0)) {
                push(
                    "kernel_nonnegative",
                    format!("Q({label},a{a})"),
                    *q,
                    "kernel entries must be finite and non-negative".into(),
                );
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > KERNEL_ROW_TOL {
                push(
                    "kernel_row_sum",
                    format!("Q({label},a{a})"),
                    sum - 1.0,
                    format!("kernel row sums to {sum}"),
                );
            }
        }
        let g = model.lyapunov_g[s];
        if !(g.is_finite() && g >= 1.0) {
            push(
                "lyapunov_g",
                label.clone(),
                g,
                format!("g >= 1 fails at {label}"),
            );
        }
    }
    for b in 0..model.grid.n_boundary() {
        let s = n + b;
        let label = state_label(model, s);
        let rbar = model.lyapunov_rbar[b];
        if !(rbar.is_finite() && rbar >= 0.0) {
            push(
                "nonnegative",
                format!("rbar({label})"),
                rbar,
                "rbar must be finite and non-negative".into(),
            );
        }
        for a in 0..model.n_actions() {
            let r = model.boundary_cost.get(b, a);
            if !(r.is_finite() && r >= 0.0) {
                push(
                    "nonnegative",
                    format!("r({label},a{a})"),
                    r,
                    "boundary cost must be finite and non-negative".into(),
                );
            }
        }
    }
    if let Some(t) = model.flow.t_max {
        if !(t.is_finite() && t > 0.0) {
            push(
                "flow_horizon",
                "flow.t_max".into(),
                t,
                "truncation horizon must be positive".into(),
            );
        }
    }

    // Flow geometry: every interior line must end at a boundary point or be
    // absorbed by a fixed point, and never-hitting lines need a positive rate.
    if out.borrow().is_empty() {
        match Flow::new(&model.flow, &model.grid) {
            Err(e) => push("flow_spec", "flow".into(), 0.0, e.to_string()),
            Ok(flow) => {
                for j in 0..n {
                    match flow.cell_end(j) {
                        Err(e) => push(
                            "flow_escapes",
                            state_label(model, j),
                            0.0,
                            e.to_string(),
                        ),
                        Ok(crate::flow::CellEnd::Sink { lo, hi }) => {
                            let rate_ok = model.actions.feasible[j].iter().all(|&a| {
                                model.jump_rate.get(lo, a) > 0.0 || model.jump_rate.get(hi, a) > 0.0
                            });
                            if !rate_ok {
                                push(
                                    "sink_rate",
                                    state_label(model, j),
                                    0.0,
                                    "flow line never reaches the boundary but the jump rate vanishes on it"
                                        .into(),
                                );
                            }
                        }
                        Ok(_) => {}
                    }
                }
            }
        }
    }
    out.into_inner()
}
