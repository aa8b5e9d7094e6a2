//! Deterministic flow between jumps: closed-form motion along 1-D flow lines,
//! boundary hitting times, per-cell meshes, and derivatives along the flow.
//!
//! Velocity fields are affine on every interval between consecutive state
//! coordinates (globally affine for `affine1d`, linearly interpolated samples
//! for `tabulated1d`), so motion inside an interval has the closed form
//! `y(t) = y0 + v(y0) (e^{qt} - 1) / q` where `q` is the local slope.

use serde::{Deserialize, Serialize};

use crate::error::FlowError;
use crate::model::StateGrid;

#[derive(Debug, Clone, PartialEq)]
pub enum FlowKind {
    /// `φ(x, t) = x`.
    Trivial,
    /// `ẏ = alpha0 + alpha1 y`.
    Affine { alpha0: f64, alpha1: f64 },
    /// Velocity samples per state index, linearly interpolated between coordinates.
    Tabulated { velocity: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub t_max: Option<f64>,
    pub domain: Option<(f64, f64)>,
}

impl FlowSpec {
    pub fn trivial() -> Self {
        Self {
            kind: FlowKind::Trivial,
            t_max: None,
            domain: None,
        }
    }

    pub fn affine(alpha0: f64, alpha1: f64) -> Self {
        Self {
            kind: FlowKind::Affine { alpha0, alpha1 },
            t_max: None,
            domain: None,
        }
    }
}

/// Where the flow line leaving an interior grid point ends its first cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellEnd {
    /// Reaches the next interior grid point after `tau`.
    Next { state: usize, tau: f64 },
    /// Reaches a boundary point after `tau`.
    Boundary { boundary: usize, tau: f64 },
    /// Never leaves the cell: the state is stationary or converges to a
    /// fixed point inside the bracket `[lo, hi]` (state indices).
    Sink { lo: usize, hi: usize },
}

/// Resolution controls for flow meshes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    /// Minimum number of segments per cell traversal.
    pub per_cell: usize,
    /// Largest admissible segment length in time.
    pub max_step: f64,
    /// Window covered in cells the flow never leaves.
    pub t_max: f64,
}

impl MeshSpec {
    pub fn segments(&self, duration: f64) -> usize {
        let by_step = if self.max_step.is_finite() && self.max_step > 0.0 {
            (duration / self.max_step).ceil() as usize
        } else {
            0
        };
        self.per_cell.max(by_step).max(1)
    }

    /// Twice the resolution.
    pub fn doubled(&self) -> Self {
        Self {
            per_cell: self.per_cell * 2,
            max_step: self.max_step / 2.0,
            t_max: self.t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PieceKind {
    Transit,
    Sink,
}

/// `(e^{qt} - 1) / q`, continuous at `q = 0`.
#[inline]
pub(crate) fn phi1(q: f64, t: f64) -> f64 {
    let x = q * t;
    if x.abs() < 1e-8 {
        t * (1.0 + 0.5 * x)
    } else {
        x.exp_m1() / q
    }
}

/// `(e^{qt} - 1 - qt) / q²`, continuous at `q = 0`.
#[inline]
pub(crate) fn phi2(q: f64, t: f64) -> f64 {
    let x = q * t;
    if x.abs() < 1e-3 {
        t * t * (0.5 + x / 6.0 + x * x / 24.0 + x * x * x / 120.0)
    } else {
        (x.exp_m1() - x) / (q * q)
    }
}

/// Motion inside one affine velocity piece: `y(t) = y0 + v0 (e^{qt} - 1) / q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub y0: f64,
    pub v0: f64,
    pub q: f64,
}

impl Motion {
    #[inline]
    pub fn at(&self, t: f64) -> f64 {
        self.y0 + self.v0 * phi1(self.q, t)
    }

    /// `∫_0^t (y(s) - y0) ds`.
    #[inline]
    pub fn excursion(&self, t: f64) -> f64 {
        self.v0 * phi2(self.q, t)
    }
}

/// Mesh of one cell traversal. Node times are relative to the piece start.
///
/// Inside the piece the interpolation weight on `lo` is affine in the state,
/// `w(t) = w0 + dw (y(t) - y0)`, so tables interpolated linearly in space have
/// closed-form time integrals along the piece.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshPiece {
    /// Interior state whose feedback action applies along the piece.
    pub owner: usize,
    /// Interpolation bracket (state indices) containing every node.
    pub lo: usize,
    pub hi: usize,
    pub kind: PieceKind,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    /// Interpolation weight on `lo` at each node.
    pub weights: Vec<f64>,
    pub motion: Motion,
    pub w0: f64,
    pub dw: f64,
}

impl MeshPiece {
    pub fn duration(&self) -> f64 {
        *self.times.last().expect("non-empty piece")
    }

    /// State `t` time units after the piece start.
    #[inline]
    pub fn state_at(&self, t: f64) -> f64 {
        self.motion.at(t)
    }

    /// Interpolation weight on `lo` at local time `t`.
    #[inline]
    pub fn weight_at(&self, t: f64) -> f64 {
        (self.w0 + self.dw * self.motion.v0 * phi1(self.motion.q, t)).clamp(0.0, 1.0)
    }

    /// `∫_0^t w(s) ds`.
    #[inline]
    pub fn weight_integral(&self, t: f64) -> f64 {
        self.w0 * t + self.dw * self.motion.excursion(t)
    }

    /// `∫_0^t v(y(s)) ds` for a table `v` interpolated between `lo` and `hi`.
    #[inline]
    pub fn integrate_linear(&self, v_lo: f64, v_hi: f64, t: f64) -> f64 {
        v_hi * t + (v_lo - v_hi) * self.weight_integral(t)
    }

    /// Value at local time `t` of a table interpolated between `lo` and `hi`.
    #[inline]
    pub fn interpolate(&self, v_lo: f64, v_hi: f64, t: f64) -> f64 {
        let w = self.weight_at(t);
        w * v_lo + (1.0 - w) * v_hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathEnd {
    Boundary { boundary: usize, hit_time: f64 },
    /// The flow never reaches the boundary; the last piece is a sink.
    Never,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowMesh {
    pub origin: f64,
    pub pieces: Vec<MeshPiece>,
    /// Absolute start time of each piece.
    pub offsets: Vec<f64>,
    pub end: PathEnd,
}

impl FlowMesh {
    /// Absolute node times, shared nodes between pieces listed once.
    pub fn times(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (p, off) in self.pieces.iter().zip(&self.offsets) {
            let skip = usize::from(!out.is_empty());
            out.extend(p.times.iter().skip(skip).map(|t| off + t));
        }
        if let PathEnd::Boundary { hit_time, .. } = self.end {
            if let Some(last) = out.last_mut() {
                *last = hit_time;
            }
        }
        out
    }

    pub fn states(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.pieces {
            let skip = usize::from(!out.is_empty());
            out.extend(p.states.iter().skip(skip).copied());
        }
        out
    }

    pub fn last_time(&self) -> f64 {
        match self.end {
            PathEnd::Boundary { hit_time, .. } => hit_time,
            PathEnd::Never => {
                let i = self.pieces.len() - 1;
                self.offsets[i] + self.pieces[i].duration()
            }
        }
    }
}

/// A flow specification bound to a state grid.
#[derive(Debug, Clone)]
pub struct Flow {
    kind: FlowKind,
    n_interior: usize,
    /// Sorted coordinates of all states.
    coords: Vec<f64>,
    /// State index at each sorted position.
    state_at: Vec<usize>,
    /// Sorted position of each state index.
    pos_of: Vec<usize>,
    /// Velocity at each sorted position (tabulated flows only).
    vel: Vec<f64>,
}

#[inline]
fn advance_in_piece(y0: f64, v0: f64, q: f64, t: f64) -> f64 {
    if q == 0.0 {
        y0 + v0 * t
    } else {
        y0 + v0 * (q * t).exp_m1() / q
    }
}

/// Time to move from `y0` to `y1` inside one affine piece, `∞` if unreachable.
#[inline]
fn time_in_piece(y0: f64, y1: f64, v0: f64, q: f64) -> f64 {
    if v0 == 0.0 {
        return f64::INFINITY;
    }
    let t = if q == 0.0 {
        (y1 - y0) / v0
    } else {
        let arg = q * (y1 - y0) / v0;
        if arg <= -1.0 {
            return f64::INFINITY;
        }
        arg.ln_1p() / q
    };
    if t >= 0.0 {
        t
    } else {
        f64::INFINITY
    }
}

impl Flow {
    pub fn new(spec: &FlowSpec, grid: &StateGrid) -> Result<Self, FlowError> {
        let ns = grid.n_states();
        let mut state_at: Vec<usize> = (0..ns).collect();
        state_at.sort_by(|&a, &b| grid.coord(a).total_cmp(&grid.coord(b)));
        let coords: Vec<f64> = state_at.iter().map(|&s| grid.coord(s)).collect();
        if coords.windows(2).any(|w| w[0] == w[1]) {
            return Err(FlowError::Spec("state coordinates must be distinct".into()));
        }
        let mut pos_of = vec![0; ns];
        for (p, &s) in state_at.iter().enumerate() {
            pos_of[s] = p;
        }
        let vel = match &spec.kind {
            FlowKind::Tabulated { velocity } => {
                if velocity.len() != ns {
                    return Err(FlowError::Spec(format!(
                        "velocity table has {} entries, expected {ns}",
                        velocity.len()
                    )));
                }
                if velocity.iter().any(|v| !v.is_finite()) {
                    return Err(FlowError::Spec("velocity samples must be finite".into()));
                }
                state_at.iter().map(|&s| velocity[s]).collect()
            }
            FlowKind::Affine { alpha0, alpha1 } => {
                if !(alpha0.is_finite() && alpha1.is_finite()) {
                    return Err(FlowError::Spec("affine coefficients must be finite".into()));
                }
                Vec::new()
            }
            FlowKind::Trivial => Vec::new(),
        };
        Ok(Self {
            kind: spec.kind.clone(),
            n_interior: grid.n_interior(),
            coords,
            state_at,
            pos_of,
            vel,
        })
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self.kind, FlowKind::Trivial)
    }

    pub fn coord_of(&self, state: usize) -> f64 {
        self.coords[self.pos_of[state]]
    }

    /// Velocity field `ẏ = v(y)`.
    pub fn velocity(&self, y: f64) -> f64 {
        match &self.kind {
            FlowKind::Trivial => 0.0,
            FlowKind::Affine { alpha0, alpha1 } => alpha0 + alpha1 * y,
            FlowKind::Tabulated { .. } => {
                let c = &self.coords;
                let n = c.len();
                if y <= c[0] {
                    return self.vel[0];
                }
                if y >= c[n - 1] {
                    return self.vel[n - 1];
                }
                let k = c.partition_point(|&v| v <= y) - 1;
                let w = (y - c[k]) / (c[k + 1] - c[k]);
                self.vel[k] + w * (self.vel[k + 1] - self.vel[k])
            }
        }
    }

    /// Slope of the affine piece used when leaving `y` in direction `dir`.
    fn slope(&self, y: f64, dir: f64) -> f64 {
        match &self.kind {
            FlowKind::Trivial => 0.0,
            FlowKind::Affine { alpha1, .. } => *alpha1,
            FlowKind::Tabulated { .. } => {
                let c = &self.coords;
                let n = c.len();
                let k = if dir > 0.0 {
                    // piece [c_k, c_{k+1}] with c_k <= y < c_{k+1}
                    let p = c.partition_point(|&v| v <= y);
                    if p == 0 || p >= n {
                        return 0.0;
                    }
                    p - 1
                } else {
                    // piece (c_{k}, c_{k+1}] with c_k < y <= c_{k+1}
                    let p = c.partition_point(|&v| v < y);
                    if p == 0 || p >= n {
                        return 0.0;
                    }
                    p - 1
                };
                (self.vel[k + 1] - self.vel[k]) / (c[k + 1] - c[k])
            }
        }
    }

    /// Sorted position of the first coordinate strictly beyond `y` in direction `dir`.
    fn next_pos(&self, y: f64, dir: f64) -> Option<usize> {
        let c = &self.coords;
        if dir > 0.0 {
            let p = c.partition_point(|&v| v <= y);
            (p < c.len()).then_some(p)
        } else {
            let p = c.partition_point(|&v| v < y);
            p.checked_sub(1)
        }
    }

    /// Whether the affine tail beyond the last coordinate has a fixed point ahead.
    fn fixed_point_ahead(&self, y: f64, dir: f64) -> bool {
        match &self.kind {
            FlowKind::Affine { alpha0, alpha1 } => {
                if *alpha1 == 0.0 {
                    return false;
                }
                let fixed = -alpha0 / alpha1;
                (fixed - y) * dir > 0.0
            }
            _ => false,
        }
    }

    fn is_boundary_pos(&self, p: usize) -> bool {
        self.state_at[p] >= self.n_interior
    }

    /// `t*(x)`: time for the flow from `x` to reach a boundary point, `∞` if never.
    pub fn hit_time(&self, x: f64) -> f64 {
        self.walk(x).0
    }

    /// Hitting time and the boundary index reached.
    fn walk(&self, x: f64) -> (f64, Option<usize>) {
        let mut y = x;
        let mut total = 0.0;
        loop {
            let v = self.velocity(y);
            if v == 0.0 {
                return (f64::INFINITY, None);
            }
            let dir = v.signum();
            let Some(p) = self.next_pos(y, dir) else {
                return (f64::INFINITY, None);
            };
            let target = self.coords[p];
            let v_target = self.velocity(target);
            if v_target * v <= 0.0 {
                return (f64::INFINITY, None);
            }
            total += time_in_piece(y, target, v, self.slope(y, dir));
            if !total.is_finite() {
                return (f64::INFINITY, None);
            }
            if self.is_boundary_pos(p) {
                return (total, Some(self.state_at[p] - self.n_interior));
            }
            y = target;
        }
    }

    /// `φ(x, t)`; errors when `t` exceeds `t*(x)`.
    pub fn advance(&self, x: f64, t: f64) -> Result<f64, FlowError> {
        if t < 0.0 {
            return Err(FlowError::NegativeTime(t));
        }
        if t == 0.0 {
            return Ok(x);
        }
        let (t_hit, hit) = self.walk(x);
        let tol = 1e-12 * t_hit.max(1.0);
        if t > t_hit + tol {
            return Err(FlowError::PastBoundary {
                state: x,
                time: t,
                hit_time: t_hit,
            });
        }
        if let Some(b) = hit {
            if t >= t_hit {
                return Ok(self.coord_of(self.n_interior + b));
            }
        }
        let mut y = x;
        let mut left = t;
        loop {
            let v = self.velocity(y);
            if v == 0.0 {
                return Ok(y);
            }
            let dir = v.signum();
            let q = self.slope(y, dir);
            let tau = match self.next_pos(y, dir) {
                Some(p) => {
                    let target = self.coords[p];
                    if self.velocity(target) * v <= 0.0 {
                        f64::INFINITY
                    } else {
                        time_in_piece(y, target, v, q)
                    }
                }
                None => f64::INFINITY,
            };
            if tau >= left {
                return Ok(advance_in_piece(y, v, q, left));
            }
            y = self.coords[self.next_pos(y, dir).expect("finite tau has a target")];
            left -= tau;
        }
    }

    /// First cell of the flow line from interior grid point `j`.
    pub fn cell_end(&self, j: usize) -> Result<CellEnd, FlowError> {
        let p = self.pos_of[j];
        let x = self.coords[p];
        let v = self.velocity(x);
        if v == 0.0 {
            return Ok(CellEnd::Sink { lo: j, hi: j });
        }
        let dir = v.signum();
        let Some(np) = self.next_pos(x, dir) else {
            return if self.fixed_point_ahead(x, dir) {
                Ok(CellEnd::Sink { lo: j, hi: j })
            } else {
                Err(FlowError::Escapes { state: x })
            };
        };
        let target = self.coords[np];
        let ns = self.state_at[np];
        if self.velocity(target) * v <= 0.0 {
            return Ok(CellEnd::Sink { lo: j, hi: ns });
        }
        let tau = time_in_piece(x, target, v, self.slope(x, dir));
        Ok(if ns >= self.n_interior {
            CellEnd::Boundary {
                boundary: ns - self.n_interior,
                tau,
            }
        } else {
            CellEnd::Next { state: ns, tau }
        })
    }

    fn weight(&self, lo: usize, hi: usize, y: f64) -> f64 {
        if lo == hi {
            return 1.0;
        }
        let (a, b) = (self.coord_of(lo), self.coord_of(hi));
        ((b - y) / (b - a)).clamp(0.0, 1.0)
    }

    fn make_piece(
        &self,
        owner: usize,
        lo: usize,
        hi: usize,
        y0: f64,
        end: Option<(f64, f64)>,
        mesh: &MeshSpec,
    ) -> MeshPiece {
        let v0 = self.velocity(y0);
        let dir = if v0 == 0.0 { 1.0 } else { v0.signum() };
        let q = self.slope(y0, dir);
        let (duration, kind) = match end {
            Some((tau, _)) => (tau, PieceKind::Transit),
            None => (mesh.t_max, PieceKind::Sink),
        };
        let m = mesh.segments(duration);
        let mut times = Vec::with_capacity(m + 1);
        let mut states = Vec::with_capacity(m + 1);
        for i in 0..=m {
            let t = if i == m {
                duration
            } else {
                duration * i as f64 / m as f64
            };
            let y = if i == 0 {
                y0
            } else if i == m && end.is_some() {
                end.expect("transit").1
            } else {
                advance_in_piece(y0, v0, q, t)
            };
            times.push(t);
            states.push(y);
        }
        let w0 = self.weight(lo, hi, y0);
        let dw = if lo == hi {
            0.0
        } else {
            -1.0 / (self.coord_of(hi) - self.coord_of(lo))
        };
        let motion = Motion { y0, v0, q };
        let mut piece = MeshPiece {
            owner,
            lo,
            hi,
            kind,
            times,
            states,
            weights: Vec::new(),
            motion,
            w0,
            dw,
        };
        piece.weights = piece.times.iter().map(|&t| piece.weight_at(t)).collect();
        piece
    }

    /// Mesh of the first cell of interior grid point `j`.
    pub fn cell_piece(&self, j: usize, mesh: &MeshSpec) -> Result<(MeshPiece, CellEnd), FlowError> {
        let end = self.cell_end(j)?;
        let x = self.coord_of(j);
        let piece = match end {
            CellEnd::Next { state, tau } => {
                self.make_piece(j, j, state, x, Some((tau, self.coord_of(state))), mesh)
            }
            CellEnd::Boundary { boundary, tau } => {
                let s = self.n_interior + boundary;
                self.make_piece(j, j, s, x, Some((tau, self.coord_of(s))), mesh)
            }
            CellEnd::Sink { lo, hi } => self.make_piece(j, lo, hi, x, None, mesh),
        };
        Ok((piece, end))
    }

    /// Interior state closest to `y`.
    fn nearest_interior(&self, y: f64) -> usize {
        (0..self.n_interior)
            .min_by(|&a, &b| {
                (self.coord_of(a) - y)
                    .abs()
                    .total_cmp(&(self.coord_of(b) - y).abs())
            })
            .expect("at least one interior point")
    }

    /// Mesh of the whole flow line from an arbitrary interior state `x`.
    ///
    /// Grid origins reproduce the per-cell meshes of [`Flow::cell_piece`]
    /// exactly; other origins start with a partial cell.
    pub fn build_mesh(&self, x: f64, mesh: &MeshSpec) -> Result<FlowMesh, FlowError> {
        let mut pieces = Vec::new();
        let mut offsets = Vec::new();
        let mut t = 0.0;
        let first_state = self
            .state_at
            .iter()
            .copied()
            .find(|&s| s < self.n_interior && self.coord_of(s) == x);
        let mut current = match first_state {
            Some(j) => j,
            None => {
                // Partial first cell from an off-grid origin.
                let v = self.velocity(x);
                let dir = if v == 0.0 { 1.0 } else { v.signum() };
                let (lo, hi) = self.bracket(x);
                if v == 0.0 {
                    let owner = self.nearest_interior(x);
                    pieces.push(self.make_piece(owner, lo, hi, x, None, mesh));
                    offsets.push(0.0);
                    return Ok(FlowMesh {
                        origin: x,
                        pieces,
                        offsets,
                        end: PathEnd::Never,
                    });
                }
                let upstream = if dir > 0.0 { lo } else { hi };
                let owner = if upstream < self.n_interior {
                    upstream
                } else {
                    self.nearest_interior(x)
                };
                match self.next_pos(x, dir) {
                    None => {
                        if !self.fixed_point_ahead(x, dir) {
                            return Err(FlowError::Escapes { state: x });
                        }
                        pieces.push(self.make_piece(owner, lo, hi, x, None, mesh));
                        offsets.push(0.0);
                        return Ok(FlowMesh {
                            origin: x,
                            pieces,
                            offsets,
                            end: PathEnd::Never,
                        });
                    }
                    Some(np) => {
                        let target = self.coords[np];
                        let ts = self.state_at[np];
                        if self.velocity(target) * v <= 0.0 {
                            pieces.push(self.make_piece(owner, lo, hi, x, None, mesh));
                            offsets.push(0.0);
                            return Ok(FlowMesh {
                                origin: x,
                                pieces,
                                offsets,
                                end: PathEnd::Never,
                            });
                        }
                        let tau = time_in_piece(x, target, v, self.slope(x, dir));
                        pieces.push(self.make_piece(owner, lo, hi, x, Some((tau, target)), mesh));
                        offsets.push(0.0);
                        t += tau;
                        if ts >= self.n_interior {
                            return Ok(FlowMesh {
                                origin: x,
                                pieces,
                                offsets,
                                end: PathEnd::Boundary {
                                    boundary: ts - self.n_interior,
                                    hit_time: t,
                                },
                            });
                        }
                        ts
                    }
                }
            }
        };
        loop {
            let (piece, end) = self.cell_piece(current, mesh)?;
            pieces.push(piece);
            offsets.push(t);
            match end {
                CellEnd::Next { state, tau } => {
                    t += tau;
                    current = state;
                }
                CellEnd::Boundary { boundary, tau } => {
                    t += tau;
                    return Ok(FlowMesh {
                        origin: x,
                        pieces,
                        offsets,
                        end: PathEnd::Boundary {
                            boundary,
                            hit_time: t,
                        },
                    });
                }
                CellEnd::Sink { .. } => {
                    return Ok(FlowMesh {
                        origin: x,
                        pieces,
                        offsets,
                        end: PathEnd::Never,
                    })
                }
            }
        }
    }

    /// Bracketing states `(lo, hi)` with `coord(lo) <= y <= coord(hi)`, clamped at the ends.
    pub fn bracket(&self, y: f64) -> (usize, usize) {
        let c = &self.coords;
        let n = c.len();
        if y <= c[0] {
            return (self.state_at[0], self.state_at[0]);
        }
        if y >= c[n - 1] {
            return (self.state_at[n - 1], self.state_at[n - 1]);
        }
        let k = c.partition_point(|&v| v <= y) - 1;
        if c[k] == y {
            return (self.state_at[k], self.state_at[k]);
        }
        (self.state_at[k], self.state_at[k + 1])
    }

    /// Finite-difference approximation of `d/dt h(φ(x_j, t))` at `t = 0+`,
    /// with `h` tabulated on the interior grid (by interior index).
    pub fn flow_derivative(&self, h: &[f64], j: usize) -> f64 {
        let x = self.coord_of(j);
        let v = self.velocity(x);
        if v == 0.0 {
            return 0.0;
        }
        let order: Vec<usize> = self
            .state_at
            .iter()
            .copied()
            .filter(|&s| s < self.n_interior)
            .collect();
        let xs: Vec<f64> = order.iter().map(|&s| self.coord_of(s)).collect();
        let hs: Vec<f64> = order.iter().map(|&s| h[s]).collect();
        let k = order.iter().position(|&s| s == j).expect("interior state");
        v * grid_slope(&xs, &hs, k)
    }
}

/// Derivative estimate at position `k` of sorted samples: the three-point
/// non-uniform stencil (exact for quadratics), central in the interior and
/// one-sided at the ends.
fn grid_slope(xs: &[f64], hs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    match n {
        0 | 1 => 0.0,
        2 => (hs[1] - hs[0]) / (xs[1] - xs[0]),
        _ => {
            let (i0, i1, i2) = if k == 0 {
                (0, 1, 2)
            } else if k == n - 1 {
                (n - 3, n - 2, n - 1)
            } else {
                (k - 1, k, k + 1)
            };
            // Derivative of the interpolating parabola through three points at xs[k].
            let (x0, x1, x2) = (xs[i0], xs[i1], xs[i2]);
            let x = xs[k];
            let l0 = ((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2));
            let l1 = ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2));
            let l2 = ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1));
            l0 * hs[i0] + l1 * hs[i1] + l2 * hs[i2]
        }
    }
}
