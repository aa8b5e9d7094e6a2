//! Davis-construction simulation of the controlled process under a feedback
//! policy, and Monte Carlo validation of average costs.
//!
//! Sojourns are sampled by inverting the closed-form cumulative rate of the
//! interpolated model cell by cell; post-jump locations mix the kernel rows of
//! the two bracketing states with the interpolation weight at the jump point.
//! This is exactly the model the operators integrate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::flow::{CellEnd, MeshPiece, PathEnd, PieceKind};
use crate::model::StateActionTable;
use crate::operators::{piece_cum_rate, piece_rate, Engine};
use crate::policy::FeedbackPolicy;

/// RNG words reserved per jump: exponential level, bracket choice, kernel draw.
const WORDS_PER_JUMP: u128 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Jump,
    Boundary,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub event_type: EventKind,
    /// Post-jump state (for `end`, the state at the horizon).
    pub state: f64,
    pub cost_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Empty unless recording was requested.
    pub events: Vec<Event>,
    pub running_cost: f64,
    pub boundary_cost: f64,
    /// Boundary hits `p*(t)`.
    pub boundary_hits: u64,
    /// All jumps `N(t)`, boundary hits included.
    pub jumps: u64,
    pub final_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub mean: f64,
    pub se: f64,
    pub batch_means: Vec<f64>,
    pub jumps: u64,
    pub boundary_hits: u64,
    pub seed: u64,
    pub replication: u64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub batches: usize,
    pub max_jumps: u64,
    pub record: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            batches: 20,
            max_jumps: 1_000_000_000,
            record: false,
        }
    }
}

/// Per-replication random stream; each jump reads from its own block of words.
pub struct JumpStream {
    rng: ChaCha8Rng,
    jump: u64,
}

impl JumpStream {
    pub fn new(seed: u64, replication: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replication);
        Self { rng, jump: 0 }
    }

    /// Uniforms in `[0, 1)` for the next jump.
    fn next_jump(&mut self) -> [f64; 3] {
        self.rng.set_word_pos(u128::from(self.jump) * WORDS_PER_JUMP);
        self.jump += 1;
        [self.rng.gen(), self.rng.gen(), self.rng.gen()]
    }
}

/// Where the walk currently is: a grid cell, or the partial piece leading
/// from an off-grid start to the grid.
#[derive(Debug, Clone)]
enum Cursor {
    Cell(usize),
    Lead(Box<MeshPiece>, CellEnd),
}

struct Walker<'a, 'm> {
    engine: &'a Engine<'m>,
    policy: &'a FeedbackPolicy,
    cursor: Cursor,
    /// Local time inside the current piece.
    t_in: f64,
    /// Remaining cumulative-rate level before the next spontaneous jump.
    level: f64,
    time: f64,
    running: f64,
    boundary: f64,
    hits: u64,
    jumps: u64,
}

fn table_integral(
    table: &StateActionTable,
    piece: &MeshPiece,
    a: usize,
    t0: f64,
    t1: f64,
) -> f64 {
    let (lo, hi) = (table.get(piece.lo, a), table.get(piece.hi, a));
    let end = piece.duration();
    let at = |t: f64| {
        if t <= end || piece.kind == PieceKind::Transit {
            piece.integrate_linear(lo, hi, t.min(end))
        } else {
            piece.integrate_linear(lo, hi, end) + piece.interpolate(lo, hi, end) * (t - end)
        }
    };
    at(t1) - at(t0)
}

/// Local time `t ≥ t0` with `Λ(t) - Λ(t0) = level`, or `None` when the piece
/// ends first (transit) or the rate vanishes (sink).
fn solve_level(
    engine: &Engine,
    piece: &MeshPiece,
    a: usize,
    t0: f64,
    level: f64,
) -> Option<f64> {
    let m = engine.model;
    let base = piece_cum_rate(m, piece, a, t0);
    let target = base + level;
    let end = piece.duration();
    let at_end = piece_cum_rate(m, piece, a, end);
    if target > at_end {
        if piece.kind == PieceKind::Transit {
            return None;
        }
        let rate = piece_rate(m, piece, a, end);
        if rate <= 0.0 {
            return None;
        }
        return Some(end.max(t0) + (target - at_end.max(base)) / rate);
    }
    // Safeguarded Newton on the monotone Λ over [t0, end].
    let (mut lo, mut hi) = (t0, end);
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = piece_cum_rate(m, piece, a, t) - target;
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let d = piece_rate(m, piece, a, t);
        let newton = if d > 0.0 { t - f / d } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - t).abs() <= 1e-15 * next.abs().max(1.0) || hi - lo <= 1e-15 * hi.max(1.0) {
            return Some(next);
        }
        t = next;
    }
    Some(t)
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let total: f64 = row.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (k, p) in row.iter().enumerate() {
        acc += p;
        if target < acc {
            return k;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

impl<'a, 'm> Walker<'a, 'm> {
    fn piece(&self) -> (&MeshPiece, CellEnd) {
        match &self.cursor {
            Cursor::Cell(j) => (self.engine.cell_piece(*j), self.engine.cell_end(*j)),
            Cursor::Lead(p, end) => (p, *end),
        }
    }

    fn action(&self, piece: &MeshPiece) -> usize {
        self.policy.interior[piece.owner]
    }

    fn state(&self) -> f64 {
        let (piece, _) = self.piece();
        piece.state_at(self.t_in.min(piece.duration()))
    }

    /// Land on interior grid point `target` and draw the next exponential level.
    fn jump_to(&mut self, target: usize, u: f64) {
        self.cursor = Cursor::Cell(target);
        self.t_in = 0.0;
        self.level = -(1.0 - u).ln();
    }

    /// Advance until `limit` or one event, whichever comes first.
    fn step(
        &mut self,
        limit: f64,
        stream: &mut JumpStream,
        events: Option<&mut Vec<Event>>,
    ) -> Result<bool, SimError> {
        let m = self.engine.model;
        let n = m.n_interior();
        let engine = self.engine;
        let lead;
        let (piece, end): (&MeshPiece, CellEnd) = match &self.cursor {
            Cursor::Cell(j) => (engine.cell_piece(*j), engine.cell_end(*j)),
            Cursor::Lead(p, e) => {
                lead = p.clone();
                (&*lead, *e)
            }
        };
        let a = self.action(piece);
        let jump_t = solve_level(engine, piece, a, self.t_in, self.level);
        let exit_t = match end {
            CellEnd::Sink { .. } => None,
            _ => Some(piece.duration()),
        };
        let (event_t, is_jump) = match (jump_t, exit_t) {
            (Some(t), Some(e)) if t < e => (t, true),
            (Some(t), None) => (t, true),
            (_, Some(e)) => (e, false),
            (None, None) => {
                return Err(SimError::NoJump {
                    state: piece.state_at(self.t_in),
                })
            }
        };
        let dt = event_t - self.t_in;
        if self.time + dt > limit {
            let t_stop = self.t_in + (limit - self.time);
            self.running += table_integral(&m.running_cost, piece, a, self.t_in, t_stop);
            self.level -= piece_cum_rate(m, piece, a, t_stop) - piece_cum_rate(m, piece, a, self.t_in);
            self.t_in = t_stop;
            self.time = limit;
            return Ok(false);
        }
        self.running += table_integral(&m.running_cost, piece, a, self.t_in, event_t);
        self.time += dt;
        if is_jump {
            let u = stream.next_jump();
            let w = piece.weight_at(event_t.min(piece.duration()));
            let src = if u[1] < w { piece.lo } else { piece.hi };
            let target = sample_row(m.kernel.row(src, a), u[2]);
            self.jumps += 1;
            self.jump_to(target, u[0]);
            if let Some(ev) = events {
                ev.push(Event {
                    t: self.time,
                    event_type: EventKind::Jump,
                    state: m.grid.points[target],
                    cost_so_far: self.running + self.boundary,
                });
            }
            return Ok(true);
        }
        self.level -= piece_cum_rate(m, piece, a, event_t) - piece_cum_rate(m, piece, a, self.t_in);
        match end {
            CellEnd::Next { state, .. } => {
                self.cursor = Cursor::Cell(state);
                self.t_in = 0.0;
                Ok(false)
            }
            CellEnd::Boundary { boundary, .. } => {
                let ab = self.policy.boundary[boundary];
                self.boundary += m.boundary_cost.get(boundary, ab);
                self.hits += 1;
                self.jumps += 1;
                let u = stream.next_jump();
                let target = sample_row(m.kernel.row(n + boundary, ab), u[2]);
                self.jump_to(target, u[0]);
                if let Some(ev) = events {
                    ev.push(Event {
                        t: self.time,
                        event_type: EventKind::Boundary,
                        state: m.grid.points[target],
                        cost_so_far: self.running + self.boundary,
                    });
                }
                Ok(true)
            }
            CellEnd::Sink { .. } => unreachable!("sinks end only by jumping"),
        }
    }
}

fn start_cursor(engine: &Engine, x0: f64) -> Result<Cursor, SimError> {
    let m = engine.model;
    if let Some(j) = m.grid.interior_index(x0, 0.0) {
        return Ok(Cursor::Cell(j));
    }
    let mesh = engine.flow.build_mesh(x0, &engine.mesh)?;
    let end = if mesh.pieces.len() > 1 {
        let tau = mesh.pieces[0].duration();
        CellEnd::Next {
            state: mesh.pieces[1].owner,
            tau,
        }
    } else {
        match mesh.end {
            PathEnd::Boundary { boundary, hit_time } => CellEnd::Boundary {
                boundary,
                tau: hit_time,
            },
            PathEnd::Never => CellEnd::Sink {
                lo: mesh.pieces[0].lo,
                hi: mesh.pieces[0].hi,
            },
        }
    };
    let lead = mesh.pieces.into_iter().next().expect("non-empty mesh");
    Ok(Cursor::Lead(Box::new(lead), end))
}

/// One sojourn from `x`: `(time, hit_boundary)`.
pub fn sample_sojourn(
    engine: &Engine,
    policy: &FeedbackPolicy,
    x: f64,
    stream: &mut JumpStream,
) -> Result<(f64, bool), SimError> {
    policy.check(engine.model)?;
    let u = stream.next_jump();
    let mut w = Walker {
        engine,
        policy,
        cursor: start_cursor(engine, x)?,
        t_in: 0.0,
        level: -(1.0 - u[0]).ln(),
        time: 0.0,
        running: 0.0,
        boundary: 0.0,
        hits: 0,
        jumps: 0,
    };
    while !w.step(f64::INFINITY, stream, None)? {}
    Ok((w.time, w.hits == 1))
}

/// Simulate over `[0, horizon]` from `x0` on replication stream `replication`.
pub fn simulate_replication(
    engine: &Engine,
    policy: &FeedbackPolicy,
    x0: f64,
    horizon: f64,
    seed: u64,
    replication: u64,
    opts: &SimOptions,
) -> Result<(TrajectoryRecord, SimulationSummary), SimError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::Horizon(horizon));
    }
    policy.check(engine.model)?;
    let mut stream = JumpStream::new(seed, replication);
    let u = stream.next_jump();
    let mut w = Walker {
        engine,
        policy,
        cursor: start_cursor(engine, x0)?,
        t_in: 0.0,
        level: -(1.0 - u[0]).ln(),
        time: 0.0,
        running: 0.0,
        boundary: 0.0,
        hits: 0,
        jumps: 0,
    };
    let mut events = opts.record.then(Vec::new);
    let batches = opts.batches.max(1);
    let width = horizon / batches as f64;
    let mut batch_means = Vec::with_capacity(batches);
    let mut last_total = 0.0;
    for b in 0..batches {
        let limit = if b + 1 == batches {
            horizon
        } else {
            width * (b + 1) as f64
        };
        while w.time < limit {
            w.step(limit, &mut stream, events.as_mut())?;
            if w.jumps > opts.max_jumps {
                return Err(SimError::Explosion {
                    jumps: w.jumps,
                    time: w.time,
                    rate: w.jumps as f64 / w.time.max(f64::MIN_POSITIVE),
                });
            }
        }
        let total = w.running + w.boundary;
        batch_means.push((total - last_total) / width);
        last_total = total;
    }
    if let Some(ev) = events.as_mut() {
        ev.push(Event {
            t: w.time,
            event_type: EventKind::End,
            state: w.state(),
            cost_so_far: w.running + w.boundary,
        });
    }
    let mean = (w.running + w.boundary) / horizon;
    let se = batch_se(&batch_means);
    Ok((
        TrajectoryRecord {
            events: events.unwrap_or_default(),
            running_cost: w.running,
            boundary_cost: w.boundary,
            boundary_hits: w.hits,
            jumps: w.jumps,
            final_time: w.time,
        },
        SimulationSummary {
            mean,
            se,
            batch_means,
            jumps: w.jumps,
            boundary_hits: w.hits,
            seed,
            replication,
            horizon,
        },
    ))
}

pub fn simulate(
    engine: &Engine,
    policy: &FeedbackPolicy,
    x0: f64,
    horizon: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<(TrajectoryRecord, SimulationSummary), SimError> {
    simulate_replication(engine, policy, x0, horizon, seed, 0, opts)
}

/// Standard error of the grand mean from batch means.
pub fn batch_se(means: &[f64]) -> f64 {
    let k = means.len();
    if k < 2 {
        return 0.0;
    }
    let mean = means.iter().sum::<f64>() / k as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McVerdict {
    pub pass: bool,
    pub rho: f64,
    pub mean: f64,
    pub se: f64,
    /// `|mean - ρ| / se` (infinite when `se = 0` and they differ).
    pub z: f64,
    pub replications: Vec<SimulationSummary>,
}

/// Rounding allowance added to `3 SE`, which can vanish on deterministic models.
pub fn rounding_floor(rho: f64) -> f64 {
    1e-9 * rho.abs().max(1.0)
}

/// Run `replications` independent simulations and compare the pooled mean with `rho`.
#[allow(clippy::too_many_arguments)]
pub fn mc_validate(
    engine: &Engine,
    policy: &FeedbackPolicy,
    rho: f64,
    x0: f64,
    horizon: f64,
    replications: u64,
    seed: u64,
    opts: &SimOptions,
) -> Result<McVerdict, SimError> {
    let opts = SimOptions {
        record: false,
        ..*opts
    };
    let reps = (0..replications)
        .into_par_iter()
        .map(|r| simulate_replication(engine, policy, x0, horizon, seed, r, &opts).map(|(_, s)| s))
        .collect::<Result<Vec<_>, _>>()?;
    let batch: Vec<f64> = reps.iter().flat_map(|s| s.batch_means.iter().copied()).collect();
    let mean = reps.iter().map(|s| s.mean).sum::<f64>() / reps.len().max(1) as f64;
    let se = batch_se(&batch);
    let diff = (mean - rho).abs();
    let z = if se > 0.0 {
        diff / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(McVerdict {
        pass: diff <= 3.0 * se + rounding_floor(rho),
        rho,
        mean,
        se,
        z,
        replications: reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::*;

    #[test]
    fn deterministic_hit_without_rate() {
        let m = boundary_cycle(2.0, 4);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        for seed in 0..5 {
            let mut s = JumpStream::new(seed, 0);
            let (t, hit) = sample_sojourn(&e, &p, 0.25, &mut s).unwrap();
            assert!(hit);
            assert!((t - 0.75).abs() < 1e-14);
        }
        let mut s = JumpStream::new(1, 0);
        let (t, hit) = sample_sojourn(&e, &p, 0.3, &mut s).unwrap();
        assert!(hit && (t - 0.7).abs() < 1e-12);
    }

    #[test]
    fn renewal_cycle_average() {
        let m = boundary_cycle(2.0, 4);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let (traj, sum) = simulate(&e, &p, 0.0, 100.0, 3, &SimOptions { record: true, ..SimOptions::default() }).unwrap();
        assert_eq!(traj.boundary_hits, 100);
        assert!((sum.mean - 2.0).abs() < 1e-12);
        assert_eq!(traj.events.last().unwrap().event_type, EventKind::End);
        let jumps: Vec<f64> = traj
            .events
            .iter()
            .filter(|e| e.event_type != EventKind::End)
            .map(|e| e.t)
            .collect();
        assert!(jumps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_cost_mean_is_exact() {
        let m = trivial_constant(1.3, 2.5, 3);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let (_, s) = simulate(&e, &p, m.grid.points[0], 50.0, 9, &SimOptions::default()).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        let v = mc_validate(&e, &p, 2.5, m.grid.points[0], 50.0, 4, 9, &SimOptions::default()).unwrap();
        assert!(v.pass);
    }

    #[test]
    fn reproducible_trajectories() {
        let m = drift_model(8);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::constant(&m, 1);
        let opts = SimOptions {
            record: true,
            ..SimOptions::default()
        };
        let a = simulate(&e, &p, 0.0, 200.0, 42, &opts).unwrap();
        let b = simulate(&e, &p, 0.0, 200.0, 42, &opts).unwrap();
        assert_eq!(a, b);
        let c = simulate(&e, &p, 0.0, 200.0, 43, &opts).unwrap();
        assert_ne!(a.0.events, c.0.events);
    }

    #[test]
    fn horizon_must_be_positive() {
        let m = boundary_cycle(1.0, 4);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        assert!(matches!(
            simulate(&e, &p, 0.0, 0.0, 1, &SimOptions::default()),
            Err(SimError::Horizon(_))
        ));
    }

    #[test]
    fn explosion_guard_trips() {
        let m = trivial_constant(5.0, 1.0, 2);
        let e = Engine::new(&m).unwrap();
        let p = FeedbackPolicy::lowest_index(&m);
        let opts = SimOptions {
            max_jumps: 10,
            ..SimOptions::default()
        };
        assert!(matches!(
            simulate(&e, &p, m.grid.points[0], 100.0, 1, &opts),
            Err(SimError::Explosion { .. })
        ));
    }
}
