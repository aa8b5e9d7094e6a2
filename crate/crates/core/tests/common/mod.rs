//! Shared test helpers: bundled model loading and an independent CTMDP oracle.
#![allow(dead_code)]

use std::path::PathBuf;

use pdmp_core::flow::FlowKind;
use pdmp_core::model::{load_model, PdmpModel};

pub const BUNDLED: [&str; 5] = [
    "ctmdp_toy",
    "drift_boundary",
    "boundary_cycle",
    "contracting",
    "constant_cost",
];

pub fn models_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

pub fn bundled() -> Vec<(&'static str, PdmpModel)> {
    BUNDLED
        .iter()
        .map(|name| {
            let path = models_dir().join(format!("{name}.json"));
            (*name, load_model(&path).unwrap_or_else(|e| panic!("{name}: {e}")))
        })
        .collect()
}

/// Average-cost optimum of a pure-jump model by uniformization and relative
/// value iteration: `(ρ*, optimal action per state, decision margins)`.
///
/// The margin at a state is the gap between the best and second-best action
/// values at convergence (infinite with a single feasible action).
pub fn uniformized_rvi(model: &PdmpModel) -> (f64, Vec<usize>, Vec<f64>) {
    assert!(matches!(model.flow.kind, FlowKind::Trivial));
    let n = model.n_interior();
    let lam_max = (0..n)
        .flat_map(|s| model.actions.feasible[s].iter().map(move |&a| (s, a)))
        .map(|(s, a)| model.jump_rate.get(s, a))
        .fold(0.0f64, f64::max);
    let big = 1.1 * lam_max;
    let step = |v: &[f64], s: usize, a: usize| -> f64 {
        let lam = model.jump_rate.get(s, a);
        let p = lam / big;
        let qv: f64 = model.kernel.row(s, a).iter().zip(v).map(|(q, x)| q * x).sum();
        model.running_cost.get(s, a) / big + p * qv + (1.0 - p) * v[s]
    };
    let mut v = vec![0.0; n];
    let mut gain = 0.0;
    for _ in 0..2_000_000 {
        let t: Vec<f64> = (0..n)
            .map(|s| {
                model.actions.feasible[s]
                    .iter()
                    .map(|&a| step(&v, s, a))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next_gain = t[0] - v[0];
        let next: Vec<f64> = t.iter().map(|x| x - t[0]).collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        gain = next_gain;
        if diff < 1e-14 {
            break;
        }
    }
    let mut policy = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    for s in 0..n {
        let mut vals: Vec<(f64, usize)> = model.actions.feasible[s]
            .iter()
            .map(|&a| (step(&v, s, a), a))
            .collect();
        vals.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        policy.push(vals[0].1);
        margins.push(if vals.len() > 1 {
            (vals[1].0 - vals[0].0) * big
        } else {
            f64::INFINITY
        });
    }
    (gain * big, policy, margins)
}
