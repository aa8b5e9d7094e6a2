//! Small reference models with known closed-form behaviour. The bundled
//! model files under `models/` are generated from these builders.

use rand::Rng;

use crate::flow::FlowSpec;
use crate::model::{ActionGrid, Constants, Kernel, PdmpModel, StateActionTable, StateGrid};

struct Builder {
    points: Vec<f64>,
    boundary: Vec<f64>,
    n_actions: usize,
}

impl Builder {
    fn ns(&self) -> usize {
        self.points.len() + self.boundary.len()
    }

    fn coord(&self, s: usize) -> f64 {
        if s < self.points.len() {
            self.points[s]
        } else {
            self.boundary[s - self.points.len()]
        }
    }

    fn nearest(&self, y: f64) -> usize {
        (0..self.points.len())
            .min_by(|&a, &b| (self.points[a] - y).abs().total_cmp(&(self.points[b] - y).abs()))
            .expect("points")
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        &self,
        flow: FlowSpec,
        feasible: Vec<Vec<usize>>,
        rate: impl Fn(usize, usize) -> f64,
        kernel: impl Fn(usize, usize) -> Vec<f64>,
        running: impl Fn(usize, usize) -> f64,
        boundary_cost: impl Fn(usize, usize) -> f64,
        g: impl Fn(usize) -> f64,
        rbar: Vec<f64>,
        mut constants: Constants,
    ) -> PdmpModel {
        let ns = self.ns();
        let na = self.n_actions;
        let mut lam = StateActionTable::filled(ns, na, 0.0);
        let mut f = StateActionTable::filled(ns, na, 0.0);
        let mut q = Kernel::new(ns, na, self.points.len());
        for s in 0..ns {
            for a in 0..na {
                lam.set(s, a, rate(s, a));
                f.set(s, a, running(s, a));
                q.row_mut(s, a).copy_from_slice(&kernel(s, a));
            }
        }
        let mut r = StateActionTable::filled(self.boundary.len(), na, 0.0);
        for b in 0..self.boundary.len() {
            for a in 0..na {
                r.set(b, a, boundary_cost(b, a));
            }
        }
        if constants.lambda_lower.is_empty() {
            constants.lambda_lower = (0..ns)
                .map(|s| {
                    feasible[s]
                        .iter()
                        .map(|&a| lam.get(s, a))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
        }
        PdmpModel {
            grid: StateGrid {
                points: self.points.clone(),
                boundary_points: self.boundary.clone(),
            },
            actions: ActionGrid {
                values: (0..na).map(|a| a as f64).collect(),
                feasible,
            },
            flow,
            jump_rate: lam,
            kernel: q,
            running_cost: f,
            boundary_cost: r,
            lyapunov_g: (0..ns).map(g).collect(),
            lyapunov_rbar: rbar,
            constants,
        }
    }
}

fn point_mass(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Two-state pure-jump model with two actions, swap kernel, state-dependent
/// rates `rates[x]` (same for both actions) and running costs `costs[x][a]`.
pub fn two_state_ctmdp(rates: [f64; 2], costs: [[f64; 2]; 2]) -> PdmpModel {
    let b = Builder {
        points: vec![0.0, 1.0],
        boundary: vec![],
        n_actions: 2,
    };
    let lam_min = rates[0].min(rates[1]);
    let c = 0.5 * lam_min;
    let big_m = costs.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    b.build(
        FlowSpec::trivial(),
        vec![vec![0, 1]; 2],
        |s, _| rates[s],
        |s, _| point_mass(2, 1 - s),
        |s, a| costs[s][a],
        |_, _| 0.0,
        |_| 1.0,
        vec![],
        Constants {
            b: c,
            c,
            delta: 1.0,
            big_m,
            lambda_lower: vec![],
            k_lambda: 1.0 / (lam_min - c),
            k_g: 0.5,
            big_k_g: 0.5,
        },
    )
}

/// Pure-jump model with a single action, `λ ≡ rate`, `f ≡ cost`, and a lazy
/// cyclic kernel on `n` states.
pub fn trivial_constant(rate: f64, cost: f64, n: usize) -> PdmpModel {
    let b = Builder {
        points: (0..n).map(|i| i as f64).collect(),
        boundary: vec![],
        n_actions: 1,
    };
    let c = 0.5 * rate;
    b.build(
        FlowSpec::trivial(),
        vec![vec![0]; n],
        |_, _| rate,
        |s, _| {
            let mut v = vec![0.0; n];
            v[s] += 0.5;
            v[(s + 1) % n] += 0.5;
            v
        },
        |_, _| cost,
        |_, _| 0.0,
        |_| 1.0,
        vec![],
        Constants {
            b: c,
            c,
            delta: 1.0,
            big_m: cost,
            lambda_lower: vec![],
            k_lambda: 1.0 / (rate - c),
            k_g: 0.5,
            big_k_g: 0.5,
        },
    )
}

/// Deterministic renewal cycle: unit drift on `(0, 1)`, no spontaneous jumps,
/// boundary cost `r0` at `1` with reset to `0`. Long-run average is `r0`.
pub fn boundary_cycle(r0: f64, n: usize) -> PdmpModel {
    let b = Builder {
        points: (0..n).map(|i| i as f64 / n as f64).collect(),
        boundary: vec![1.0],
        n_actions: 1,
    };
    let c = 0.5;
    let ns = n + 1;
    b.build(
        FlowSpec::affine(1.0, 0.0),
        vec![vec![0]; ns],
        |_, _| 0.0,
        |_, _| point_mass(n, 0),
        |_, _| 0.0,
        |_, _| r0,
        |s| 1.0 + r0 * if s < n { s as f64 / n as f64 } else { 1.0 },
        vec![r0],
        Constants {
            b: r0 + c * (1.0 + r0),
            c,
            delta: 0.5,
            big_m: 1.0,
            lambda_lower: vec![0.0; ns],
            k_lambda: 1.3,
            k_g: 0.5,
            big_k_g: 1.0 + r0,
        },
    )
}

/// Wear process with preventive service: `ẏ = 0.5 + 0.5 y` on `[0, 1)`,
/// forced replacement at the boundary `1`.
///
/// Action 0 runs the unit (failure hazard `0.2 + y`; a failure resets to 0
/// with probability 0.6, otherwise to about `y/2`); action 1 adds a service
/// stream of rate 2 that resets to 0, at extra cost rate 1.5.
pub fn drift_model(n: usize) -> PdmpModel {
    let b = Builder {
        points: (0..n).map(|i| i as f64 / n as f64).collect(),
        boundary: vec![1.0],
        n_actions: 2,
    };
    let ns = n + 1;
    let fail = |y: f64| 0.2 + y;
    let service = 2.0;
    let k = 4.0;
    let c = 0.5;
    let failure_row = |y: f64| {
        let mut v = point_mass(n, 0);
        v[0] = 0.6;
        v[b.nearest(0.5 * y)] += 0.4;
        v
    };
    b.build(
        FlowSpec::affine(0.5, 0.5),
        vec![vec![0, 1]; ns],
        |s, a| fail(b.coord(s)) + if a == 1 { service } else { 0.0 },
        |s, a| {
            let y = b.coord(s);
            if s >= n {
                return point_mass(n, 0);
            }
            let base = failure_row(y);
            if a == 0 {
                base
            } else {
                let l0 = fail(y);
                let l1 = l0 + service;
                let mut v: Vec<f64> = base.iter().map(|p| p * l0 / l1).collect();
                v[0] += service / l1;
                v
            }
        },
        |s, a| 1.0 + 3.0 * b.coord(s) + if a == 1 { 1.5 } else { 0.0 },
        |_, _| 5.0,
        |s| 1.0 + k * b.coord(s),
        vec![k],
        Constants {
            b: k + c * (1.0 + k),
            c,
            delta: 0.5,
            big_m: 2.5,
            lambda_lower: (0..ns).map(|s| fail(b.coord(s))).collect(),
            k_lambda: 2.0,
            k_g: 0.5,
            big_k_g: 2.5,
        },
    )
}

/// Reservoir level decaying as `ẏ = -0.5 y` on `[0, 1]` with no boundary:
/// the flow never hits. Action `a` requests refills at rate `1 + 0.5 a` that
/// raise the level by about `0.25 (1 + a)`; running cost penalises distance
/// from 0.6 plus `0.3 a`.
pub fn contracting_model(n: usize) -> PdmpModel {
    let b = Builder {
        points: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
        boundary: vec![],
        n_actions: 3,
    };
    let c = 0.5;
    b.build(
        FlowSpec::affine(0.0, -0.5),
        vec![vec![0, 1, 2]; n],
        |_, a| 1.0 + 0.5 * a as f64,
        |s, a| {
            let y = b.coord(s);
            let target = b.nearest((y + 0.25 * (1.0 + a as f64)).min(1.0));
            let mut v = vec![0.0; n];
            v[target] += 0.5;
            v[target.saturating_sub(1)] += 0.25;
            v[(target + 1).min(n - 1)] += 0.25;
            v
        },
        |s, a| 2.0 * (b.coord(s) - 0.6).powi(2) + 0.3 * a as f64,
        |_, _| 0.0,
        |_| 1.0,
        vec![],
        Constants {
            b: c,
            c,
            delta: 0.5,
            big_m: 1.5,
            lambda_lower: vec![1.0; n],
            k_lambda: 2.0,
            k_g: 0.5,
            big_k_g: 0.5,
        },
    )
}

/// Three-state pure-jump model where action 1 has the same rates and kernel
/// as action 0 but running cost lower by `gap` everywhere.
pub fn dominated_ctmdp(gap: f64) -> PdmpModel {
    let n = 3;
    let b = Builder {
        points: vec![0.0, 1.0, 2.0],
        boundary: vec![],
        n_actions: 2,
    };
    let rates = [1.0, 2.0, 1.5];
    let base = [2.0, 4.0, 1.0];
    let rows = [
        vec![0.2, 0.5, 0.3],
        vec![0.4, 0.1, 0.5],
        vec![0.6, 0.3, 0.1],
    ];
    let c = 0.5;
    b.build(
        FlowSpec::trivial(),
        vec![vec![0, 1]; n],
        |s, _| rates[s],
        |s, _| rows[s].clone(),
        |s, a| base[s] + if a == 0 { gap } else { 0.0 },
        |_, _| 0.0,
        |_| 1.0,
        vec![],
        Constants {
            b: c,
            c,
            delta: 1.0,
            big_m: 4.0 + gap,
            lambda_lower: vec![],
            k_lambda: 2.0,
            k_g: 0.5,
            big_k_g: 0.5,
        },
    )
}

/// Random pure-jump model with strictly positive kernels (irreducible and aperiodic).
pub fn random_ctmdp<R: Rng>(rng: &mut R, n: usize, n_actions: usize) -> PdmpModel {
    let b = Builder {
        points: (0..n).map(|i| i as f64).collect(),
        boundary: vec![],
        n_actions,
    };
    let mut rates = vec![vec![0.0; n_actions]; n];
    let mut costs = vec![vec![0.0; n_actions]; n];
    let mut rows = vec![vec![vec![0.0; n]; n_actions]; n];
    for s in 0..n {
        for a in 0..n_actions {
            rates[s][a] = rng.gen_range(0.5..3.0);
            costs[s][a] = rng.gen_range(0.0..5.0);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let tot: f64 = w.iter().sum();
            rows[s][a] = w.iter().map(|v| v / tot).collect();
        }
    }
    let lam_min = rates.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
    let big_m = costs.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let c = 0.5 * lam_min;
    b.build(
        FlowSpec::trivial(),
        vec![(0..n_actions).collect(); n],
        |s, a| rates[s][a],
        |s, a| rows[s][a].clone(),
        |s, a| costs[s][a],
        |_, _| 0.0,
        |_| 1.0,
        vec![],
        Constants {
            b: c,
            c,
            delta: 1.0,
            big_m,
            lambda_lower: vec![],
            k_lambda: 1.0 / (lam_min - c),
            k_g: 0.5,
            big_k_g: 0.5,
        },
    )
}
