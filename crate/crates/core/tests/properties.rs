mod common;

use pdmp_core::evaluation::{evaluate_with, EvalOptions};
use pdmp_core::fixtures;
use pdmp_core::flow::{Flow, FlowKind, FlowSpec};
use pdmp_core::operators::{op_g, Engine};
use pdmp_core::policy::FeedbackPolicy;
use pdmp_core::simulate::{simulate, SimOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tabulated_flow(seed: u64) -> Flow {
    let model = fixtures::drift_model(16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let velocity = (0..model.n_states())
        .map(|_| rand::Rng::gen_range(&mut rng, 0.2..2.0))
        .collect();
    let spec = FlowSpec {
        kind: FlowKind::Tabulated { velocity },
        t_max: None,
        domain: None,
    };
    Flow::new(&spec, &model.grid).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_flow_is_a_semigroup(x in 0.0f64..0.99, s in 0.0f64..1.0, t in 0.0f64..1.0) {
        let model = fixtures::drift_model(32);
        let flow = Flow::new(&model.flow, &model.grid).unwrap();
        let hit = flow.hit_time(x);
        prop_assume!(s + t < hit);
        let two_step = flow.advance(flow.advance(x, s).unwrap(), t).unwrap();
        let one_step = flow.advance(x, s + t).unwrap();
        prop_assert!((two_step - one_step).abs() < 1e-12);
        // Hitting times decrease at unit speed along the line.
        let rest = flow.hit_time(flow.advance(x, s).unwrap());
        prop_assert!((rest - (hit - s)).abs() < 1e-10);
    }

    #[test]
    fn tabulated_flow_is_a_semigroup(seed in any::<u64>(), x in 0.0f64..0.99, s in 0.0f64..0.5, t in 0.0f64..0.5) {
        let flow = tabulated_flow(seed);
        prop_assume!(s + t < flow.hit_time(x));
        let two_step = flow.advance(flow.advance(x, s).unwrap(), t).unwrap();
        let one_step = flow.advance(x, s + t).unwrap();
        prop_assert!((two_step - one_step).abs() < 1e-12);
    }

    #[test]
    fn decaying_flow_never_leaves(x in 0.0f64..=1.0, t in 0.0f64..100.0) {
        let model = fixtures::contracting_model(9);
        let flow = Flow::new(&model.flow, &model.grid).unwrap();
        prop_assert!(flow.hit_time(x).is_infinite());
        let y = flow.advance(x, t).unwrap();
        prop_assert!((0.0..=x + 1e-15).contains(&y));
    }

    #[test]
    fn kernel_rows_are_distributions(seed in any::<u64>(), n in 2usize..6, na in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = fixtures::random_ctmdp(&mut rng, n, na);
        let policy = FeedbackPolicy::random(&model, &mut rng);
        let engine = Engine::new(&model).unwrap();
        let k = engine.kernel_matrix(&policy, 0.0).unwrap();
        for s in k.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert!(k.0.iter().all(|&p| p >= -1e-15));
    }

    #[test]
    fn op_g_is_linear_and_monotone(
        seed in any::<u64>(),
        x in 0.0f64..0.99,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let model = fixtures::drift_model(24);
        let engine = Engine::new(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = FeedbackPolicy::random(&model, &mut rng);
        let path = engine.path(&policy, x).unwrap();
        let n = model.n_interior();
        let h1: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let h2: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let mix: Vec<f64> = h1.iter().zip(&h2).map(|(p, q)| a * p + b * q).collect();
        let lhs = op_g(&model, 0.0, &mix, &path);
        let rhs = a * op_g(&model, 0.0, &h1, &path) + b * op_g(&model, 0.0, &h2, &path);
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));

        let bigger: Vec<f64> = h1.iter().map(|v| v + rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
        prop_assert!(op_g(&model, 0.0, &bigger, &path) >= op_g(&model, 0.0, &h1, &path) - 1e-14);
        let ones = vec![1.0; n];
        prop_assert!((op_g(&model, 0.0, &ones, &path) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_shift_moves_rho_only(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = fixtures::drift_model(16);
        let shifted = model.with_shifted_running_cost(shift);
        let policy = FeedbackPolicy::random(&model, &mut rng);
        let opts = EvalOptions::default();
        let base = evaluate_with(&Engine::new(&model).unwrap(), &policy, &opts).unwrap();
        let moved = evaluate_with(&Engine::new(&shifted).unwrap(), &policy, &opts).unwrap();
        prop_assert!((moved.rho - base.rho - shift).abs() < 1e-10);
        for (p, q) in base.h.iter().zip(&moved.h) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_reproducible(seed in any::<u64>()) {
        let model = fixtures::drift_model(16);
        let engine = Engine::new(&model).unwrap();
        let policy = FeedbackPolicy::lowest_index(&model);
        let opts = SimOptions { record: true, ..SimOptions::default() };
        let (ta, sa) = simulate(&engine, &policy, 0.0, 50.0, seed, &opts).unwrap();
        let (tb, sb) = simulate(&engine, &policy, 0.0, 50.0, seed, &opts).unwrap();
        prop_assert_eq!(sa.mean.to_bits(), sb.mean.to_bits());
        prop_assert_eq!(ta.events.len(), tb.events.len());
        prop_assert_eq!(ta.jumps, tb.jumps);
    }
}
