use proptest::prelude::*;

use vandisc_core::bsde::{g_expectation, BsdeConfig};
use vandisc_core::conditions::{feedback_selector, nonexpansivity_g, GirsanovWeight};
use vandisc_core::hjb::{scheme_update, solve_discounted, Grid, SolverConfig};
use vandisc_core::limit::{lambda_sweep, monotonicity_check, recession_driver, default_recession_lambdas};
use vandisc_core::model::{builtin_problem, CATALOG};
use vandisc_core::representation::{constant_family, representation_value, t_grid};
use vandisc_core::rng::path_rng;
use vandisc_core::sde::{uniform_grid, PathCloud, SwitchingPolicy};
use vandisc_core::ControlProblem;

fn split_decay() -> ControlProblem {
    let text = builtin_problem("decay_quadratic").unwrap().to_config_text().replace("running = (x1 ^ 2.0)", "psi1 = (x1 ^ 2.0)\ng = 0");
    vandisc_core::parse_problem(&text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scheme_update_is_monotone(seed in 0u64..1000, bump in 0.0f64..1.0, node in 1usize..40) {
        let p = builtin_problem("split_homogeneous").unwrap();
        let g = Grid::new(&p.domain, 41).unwrap();
        let mut rng = path_rng(seed, 0);
        let v: Vec<f64> = (0..g.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let w: Vec<f64> = v.iter().map(|a| a + bump).collect();
        let a = scheme_update(&p, &g, 0.5, &v, &v, node).unwrap();
        let b = scheme_update(&p, &g, 0.5, &w, &v, node).unwrap();
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn discounted_values_respect_bound_and_lipschitz(lambda in 0.05f64..2.0, idx in 0usize..4) {
        let name = ["decay_quadratic", "split_homogeneous", "soft_abs_cost", "steerable"][idx];
        let p = builtin_problem(name).unwrap();
        let g = Grid::new(&p.domain, 81).unwrap();
        let f = solve_discounted(&p, lambda, &g, &SolverConfig::default()).unwrap();
        prop_assert!(f.sup_abs() <= p.constants.bound_m + 1e-6);
        prop_assert!(f.lipschitz_quotient() <= p.constants.nonexp_c0 + 10.0 * g.h[0]);
    }

    #[test]
    fn cost_shift_moves_lambda_v_exactly(delta in -0.5f64..0.5) {
        let p = builtin_problem("decay_quadratic").unwrap();
        let q = p.with_cost_shift(delta);
        let g = Grid::new(&p.domain, 41).unwrap();
        let f1 = solve_discounted(&p, 0.5, &g, &SolverConfig::default()).unwrap();
        let f2 = solve_discounted(&q, 0.5, &g, &SolverConfig::default()).unwrap();
        for i in g.active_nodes() {
            prop_assert!((f2.values[i] - f1.values[i] - delta).abs() < 1e-7);
        }
    }

    #[test]
    fn g_expectation_monotone_and_concave(shift in 0.0f64..1.0, a in -1.0f64..1.0, b in -1.0f64..1.0, seed in 0u64..50) {
        let p = builtin_problem("ergodic_diffusion").unwrap();
        let cfg = BsdeConfig { dt: 0.02, path_count: 400, seed, ..BsdeConfig::default() };
        let g = |z: &[f64]| -z[0].abs();
        let pol = vandisc_core::ConstantPolicy(0);
        let e1 = |x: &[f64], _: &[f64]| a * x[0];
        let e2 = |x: &[f64], _: &[f64]| a * x[0] + shift;
        let e3 = |x: &[f64], _: &[f64]| b * x[0] * x[0];
        let mid = |x: &[f64], _: &[f64]| 0.5 * (a * x[0] + b * x[0] * x[0]);
        let r1 = g_expectation(&g, &e1, &p, &[0.1], &pol, 0.5, &cfg).unwrap();
        let r2 = g_expectation(&g, &e2, &p, &[0.1], &pol, 0.5, &cfg).unwrap();
        let r3 = g_expectation(&g, &e3, &p, &[0.1], &pol, 0.5, &cfg).unwrap();
        let rm = g_expectation(&g, &mid, &p, &[0.1], &pol, 0.5, &cfg).unwrap();
        let tol = 3.0 * (r1.std_error + r2.std_error + r3.std_error + rm.std_error);
        prop_assert!(r2.value >= r1.value - tol);
        prop_assert!(rm.value >= 0.5 * (r1.value + r3.value) - tol);
    }

    #[test]
    fn g_expectation_of_constant_is_exact(c in -5.0f64..5.0, horizon in 0.0f64..1.0) {
        let p = builtin_problem("example_2_3").unwrap();
        let cfg = BsdeConfig { dt: 0.05, path_count: 64, ..BsdeConfig::default() };
        let g = |z: &[f64]| -z[0].abs();
        let r = g_expectation(&g, &|_: &[f64], _: &[f64]| c, &p, &[0.3], &vandisc_core::ConstantPolicy(0), horizon, &cfg).unwrap();
        prop_assert_eq!(r.value, c);
    }

    #[test]
    fn selector_values_lie_in_the_admissible_set(x in -1.0f64..1.0, xp in -1.0f64..1.0, u in 0usize..3) {
        let p = builtin_problem("split_homogeneous").unwrap();
        let sel = feedback_selector(&p, 21, 1e-12).unwrap();
        // Lattice points are exact; snap the sample to the lattice.
        let snap = |v: f64| ((v + 1.0) * 10.0).round() / 10.0 - 1.0;
        let (x, xp) = (snap(x), snap(xp));
        let v = sel.select(&[x], &[xp], u);
        prop_assert!(nonexpansivity_g(&p, &[x], &[xp], u, v) <= 1e-9);
    }

    #[test]
    fn girsanov_gamma_is_bounded(seed in 0u64..1000, radius in 0.0f64..3.0, d in 1usize..4) {
        let w = GirsanovWeight::sample(&mut path_rng(seed, 1), radius, d, 3.0, 0.1);
        for piece in &w.pieces {
            prop_assert!(piece.iter().map(|a| a * a).sum::<f64>().sqrt() <= radius + 1e-12);
        }
    }
}

#[test]
fn path_cloud_independent_of_thread_count() {
    let p = builtin_problem("example_2_3").unwrap();
    let grid = uniform_grid(0.5, 0.01).unwrap();
    let pol = SwitchingPolicy { interval: 0.1, count: 2, seed: 5 };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let c = PathCloud::generate(&p, &[0.4], &pol, &grid, 300, 11).unwrap();
            (0..=c.steps()).flat_map(|k| c.states_at(k).to_vec()).collect::<Vec<f64>>()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn sweeps_pass_monotonicity_on_radially_monotone_problems() {
    for name in ["decay_quadratic", "split_homogeneous", "constant_cost", "steerable"] {
        let p = builtin_problem(name).unwrap();
        let g = Grid::new(&p.domain, 61).unwrap();
        let s = lambda_sweep(&p, &g, &[1.0, 0.3, 0.1, 0.03], &SolverConfig::default()).unwrap();
        assert!(monotonicity_check(&s).passed(), "{name}");
        assert_eq!(s.sup_gaps.len(), 3);
    }
}

#[test]
fn recession_spread_shrinks_per_decade() {
    let p = builtin_problem("soft_abs_cost").unwrap();
    let r = recession_driver(&p, &[0.9], 1, &default_recession_lambdas()).unwrap();
    for w in r.spread.windows(2) {
        assert!(w[1] <= 0.5 * w[0] + 1e-15, "{:?}", r.spread);
    }
}

#[test]
fn representation_nonincreasing_in_family() {
    let p = split_decay();
    let cfg = BsdeConfig { dt: 0.02, path_count: 8, ..BsdeConfig::default() };
    let fam = constant_family(&p);
    let mut prev = f64::INFINITY;
    for count in [1, 3, 5, 9] {
        let r = representation_value(&p, &[0.6], &t_grid(4.0, count), &fam, &cfg).unwrap();
        assert!(r.value <= prev);
        prev = r.value;
    }
    let small = representation_value(&p, &[0.6], &t_grid(4.0, 5), &fam[..1], &cfg).unwrap();
    let full = representation_value(&p, &[0.6], &t_grid(4.0, 5), &fam, &cfg).unwrap();
    assert!(full.value <= small.value);
}

#[test]
fn every_catalog_problem_builds_and_sweeps() {
    for name in CATALOG {
        let p = builtin_problem(name).unwrap();
        let g = Grid::new(&p.domain, 21).unwrap();
        let r = lambda_sweep(&p, &g, &[1.0, 0.5, 0.25], &SolverConfig::default());
        assert!(r.is_ok(), "{name}: {:?}", r.err());
    }
}
