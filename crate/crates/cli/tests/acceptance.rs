//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use vandisc_core::bsde::{g_expectation, solve_finite_horizon, solve_infinite_horizon, y_bound_check, Features};
use vandisc_core::conditions::{nonexpansivity_check, nonexpansivity_samples};
use vandisc_core::hjb::{comparison_gap, default_l_grid, solve_discounted};
use vandisc_core::limit::{lambda_sweep, monotonicity_check, radial_monotonicity_check, subsolution_residual};
use vandisc_core::model::CATALOG;
use vandisc_core::representation::{dpp_residual, representation_crosscheck, DppConfig};
use vandisc_core::{builtin_problem, parse_problem, BsdeConfig, ConstantPolicy, ControlProblem, Grid, RepresentationConfig, SolverConfig};

const SOLVER_TOL: f64 = 1e-8;
const SWEEP: [f64; 6] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn problem(name: &str) -> ControlProblem {
    builtin_problem(name).expect("catalog problem")
}

fn split_decay() -> ControlProblem {
    let text = problem("decay_quadratic").to_config_text().replace("running = (x1 ^ 2.0)", "psi1 = (x1 ^ 2.0)\ng = 0");
    parse_problem(&text).expect("split decay parses")
}

fn example_closed_form() -> Outcome {
    let p = problem("example_2_3");
    let samples = nonexpansivity_samples(&p, 1000, 16, 0);
    let dev = samples.iter().map(|s| (s.g + 1.5 * (s.x[0] - s.x_prime[0]).powi(2)).abs()).fold(0.0, f64::max);
    let report = nonexpansivity_check(&p, 1000, 16, 0);
    outcome(dev < 1e-12 && report.passed(), format!("{} samples, max |g + 1.5|x - x'|^2| = {dev:.2e} (< 1e-12)", samples.len()))
}

fn bsde_bounds() -> Outcome {
    let mut ok = true;
    let mut worst_ratio = f64::INFINITY;
    let mut failures = Vec::new();
    for name in ["constant_cost", "split_homogeneous"] {
        let p = problem(name);
        let x = [0.5];
        for lambda in [1.0, 0.5, 0.1] {
            let cfg = BsdeConfig { dt: 0.05, path_count: 10_000, ..BsdeConfig::default() };
            let path = solve_infinite_horizon(&p, &x, &ConstantPolicy(0), lambda, 1.0, 1e-3, &cfg).expect("bsde solves");
            let r = y_bound_check(&path, &p, 0.05);
            if !r.passed() {
                ok = false;
                failures.push(format!("{name} lambda={lambda}: bounds"));
            }
            // Truncation gaps at T + D and T + 2D against a far reference.
            let t = 1.0;
            let d = (1e3f64.ln() / lambda).min(8.0);
            let y = |m: f64| solve_finite_horizon(&p, &x, &ConstantPolicy(0), lambda, m, &cfg).expect("bsde solves").y_values[0];
            let y_ref = y(t + 4.0 * d);
            let (g1, g2) = ((y(t + d) - y_ref).abs(), (y(t + 2.0 * d) - y_ref).abs());
            let ratio = g1 / g2;
            let need = (lambda * d).exp() / 2.0;
            worst_ratio = worst_ratio.min(ratio / need);
            if !(ratio >= need) {
                ok = false;
                failures.push(format!("{name} lambda={lambda}: gap ratio {ratio:.3e} < {need:.3e}"));
            }
        }
    }
    outcome(ok, format!("6 runs at 1e4 paths; worst gap ratio / (e^(lambda D)/2) = {worst_ratio:.3}{}", fmt_failures(&failures)))
}

fn fmt_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", f.join(", "))
    }
}

fn decay_oracle(limit: Duration) -> Outcome {
    let p = problem("decay_quadratic");
    let g = Grid::new(&p.domain, 401).expect("grid");
    let h = g.h[0];
    let mut ok = true;
    let mut parts = Vec::new();
    for lambda in [1.0, 0.25, 0.0625] {
        let start = Instant::now();
        let f = solve_discounted(&p, lambda, &g, &SolverConfig::default()).expect("solves");
        let took = start.elapsed();
        let err = g.active_nodes().map(|i| (f.values[i] - lambda * g.coords(i)[0].powi(2) / (lambda + 2.0)).abs()).fold(0.0, f64::max);
        ok &= err <= 5.0 * h && took < limit;
        parts.push(format!("lambda={lambda}: err {err:.2e} in {:.2}s", took.as_secs_f64()));
    }
    outcome(ok, format!("{} (bound 5h = {:.1e})", parts.join(", "), 5.0 * h))
}

fn field_bounds() -> Outcome {
    let mut ok = true;
    let mut checked = Vec::new();
    let mut failures = Vec::new();
    for name in CATALOG {
        let p = problem(name);
        if !nonexpansivity_check(&p, 1000, 16, 0).passed() {
            continue;
        }
        let g = Grid::new(&p.domain, 201).expect("grid");
        let h = g.h.iter().fold(0.0f64, |a, b| a.max(*b));
        for lambda in [1.0, 0.25, 0.0625] {
            let f = solve_discounted(&p, lambda, &g, &SolverConfig::default()).expect("solves");
            let (sup, lip) = (f.sup_abs(), f.lipschitz_quotient());
            let c = p.constants;
            if !(sup <= c.bound_m + 1e-6 && lip <= c.nonexp_c0 + 10.0 * h) {
                ok = false;
                failures.push(format!("{name} lambda={lambda}: sup {sup:.3e}, Lipschitz {lip:.3e}"));
            }
        }
        checked.push(*name);
    }
    outcome(ok, format!("{} problems x 3 lambdas: {}{}", checked.len(), checked.join(" "), fmt_failures(&failures)))
}

fn sweep_monotonicity() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in CATALOG {
        let p = problem(name);
        if !radial_monotonicity_check(&p, 1000, &default_l_grid(), 0).passed() {
            continue;
        }
        let g = Grid::new(&p.domain, 201).expect("grid");
        let s = lambda_sweep(&p, &g, &SWEEP, &SolverConfig { tol: SOLVER_TOL, ..SolverConfig::default() }).expect("sweeps");
        ok &= s.monotone_violation <= 2.0 * SOLVER_TOL && monotonicity_check(&s).passed();
        parts.push(format!("{name} {:.1e}", s.monotone_violation));
    }
    outcome(ok && !parts.is_empty(), format!("violation per problem: {} (bound 2e-8)", parts.join(", ")))
}

fn limit_residual() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["decay_quadratic", "constant_cost"] {
        let p = problem(name);
        let g = Grid::new(&p.domain, 201).expect("grid");
        let s = lambda_sweep(&p, &g, &SWEEP, &SolverConfig::default()).expect("sweeps");
        let h = g.h[0];
        let r = subsolution_residual(&s, &p, &default_l_grid(), 10.0 * h).expect("residual");
        ok &= r.passed();
        parts.push(format!("{name} {:.2e}", r.metrics["max_residual"]));
    }
    outcome(ok, format!("max residual: {} (bound 10h = 1.0e-1)", parts.join(", ")))
}

fn g_expectation_properties() -> Outcome {
    let mut failures = Vec::new();
    let g = |z: &[f64]| -z[0].abs();

    let p = problem("example_2_3");
    let cfg = BsdeConfig { dt: 0.05, path_count: 500, ..BsdeConfig::default() };
    for c in [-2.5, 0.0, 0.75, 3.0] {
        let r = g_expectation(&g, &|_: &[f64], _: &[f64]| c, &p, &[0.3], &ConstantPolicy(0), 1.0, &cfg).expect("solves");
        if r.value != c {
            failures.push(format!("constant {c} -> {}", r.value));
        }
    }

    let p = problem("ergodic_diffusion");
    let pol = ConstantPolicy(0);
    let e1 = |x: &[f64], _: &[f64]| x[0];
    let e2 = |x: &[f64], _: &[f64]| x[0] + x[0] * x[0];
    let mid = |x: &[f64], _: &[f64]| x[0] + 0.5 * x[0] * x[0];
    for seed in 0..20 {
        let cfg = BsdeConfig { dt: 0.02, path_count: 2000, seed, ..BsdeConfig::default() };
        let r1 = g_expectation(&g, &e1, &p, &[0.2], &pol, 0.5, &cfg).expect("solves");
        let r2 = g_expectation(&g, &e2, &p, &[0.2], &pol, 0.5, &cfg).expect("solves");
        let rm = g_expectation(&g, &mid, &p, &[0.2], &pol, 0.5, &cfg).expect("solves");
        let tol = 3.0 * (r1.std_error + r2.std_error + rm.std_error);
        if r2.value < r1.value - tol {
            failures.push(format!("monotonicity at seed {seed}"));
        }
        if rm.value < 0.5 * (r1.value + r2.value) - tol {
            failures.push(format!("concavity at seed {seed}"));
        }
    }

    let p = problem("constant_cost");
    let k = 1.0;
    let horizon = 1.0;
    let cfg = BsdeConfig { dt: 0.05, path_count: 100_000, features: Features::StateAndNoise, degree: 1, ..BsdeConfig::default() };
    let r = g_expectation(&|z: &[f64]| -k * z[0].abs(), &|_: &[f64], w: &[f64]| w[0], &p, &[0.0], &pol, horizon, &cfg).expect("solves");
    let dev = (r.value + k * horizon).abs();
    if dev > 3.0 * r.std_error {
        failures.push(format!("eps^g[W_T] = {:.5} vs {:.5} (3 se = {:.1e})", r.value, -k * horizon, 3.0 * r.std_error));
    }
    outcome(failures.is_empty(), format!("constants exact, 20 seeds at 3 se, eps^g[W_1] = {:.5} (se {:.1e}){}", r.value, r.std_error, fmt_failures(&failures)))
}

fn representation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, p) in [("decay_quadratic + g = 0", split_decay()), ("split_homogeneous", problem("split_homogeneous"))] {
        let g = Grid::new(&p.domain, 101).expect("grid");
        let s = lambda_sweep(&p, &g, &SWEEP, &SolverConfig::default()).expect("sweeps");
        let cfg = RepresentationConfig { bsde: BsdeConfig { dt: 0.02, path_count: 200, ..BsdeConfig::default() }, t_max: None, t_count: 13 };
        let r = representation_crosscheck(&s, &p, 9, &cfg).expect("crosscheck");
        ok &= r.passed();
        let c = &r.checks[0];
        parts.push(format!("{name}: excess over tolerance {:.2e}", c.observed));
    }
    outcome(ok, parts.join(", "))
}

fn cost_shift() -> Outcome {
    let p1 = problem("decay_quadratic");
    let p2 = p1.with_cost_shift(0.3);
    let g = Grid::new(&p1.domain, 201).expect("grid");
    let cfg = SolverConfig { tol: SOLVER_TOL, ..SolverConfig::default() };
    let f1 = solve_discounted(&p1, 0.5, &g, &cfg).expect("solves");
    let f2 = solve_discounted(&p2, 0.5, &g, &cfg).expect("solves");
    let r = comparison_gap(&f1, &f2, &p1, &p2, 16, 0).expect("gap");
    let up = r.metrics["gap_21"];
    let down = -r.metrics["gap_12"];
    let within = |v: f64| (v - 0.3).abs() <= 4.0 * SOLVER_TOL;
    outcome(within(up) && within(down) && r.passed(), format!("max lambda(V2 - V1) = {up:.10}, min = {down:.10} (band 0.3 +- 4e-8)"))
}

fn dpp() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let p = problem("constant_cost");
    let g = Grid::new(&p.domain, 41).expect("grid");
    let f = solve_discounted(&p, 0.5, &g, &SolverConfig::default()).expect("solves");
    for t in [0.25, 0.5] {
        let r = dpp_residual(&p, &f, &DppConfig { t, ..DppConfig::default() }).expect("dpp");
        let res = r.metrics["max_residual"];
        ok &= res <= 1e-12;
        parts.push(format!("constant_cost t={t}: {res:.1e}"));
    }
    let p = problem("decay_quadratic");
    let g = Grid::new(&p.domain, 101).expect("grid");
    let f = solve_discounted(&p, 0.5, &g, &SolverConfig::default()).expect("solves");
    for t in [0.25, 0.5] {
        let cfg = DppConfig { t, bsde: BsdeConfig { dt: 0.01, path_count: 200, ..BsdeConfig::default() }, node_stride: 2 };
        let r = dpp_residual(&p, &f, &cfg).expect("dpp");
        ok &= r.passed();
        parts.push(format!("decay t={t}: {:.2e} ({})", r.metrics["max_residual"], if r.passed() { "within" } else { "outside" }));
    }
    outcome(ok, parts.join(", "))
}

fn negative_controls() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, key) in [("expanding", "nonexpansivity"), ("elliptic_counterexample", "radial_monotonicity")] {
        let dir = std::env::temp_dir().join(format!("vandisc-acceptance-{name}-{}", std::process::id()));
        let status = Command::new(env!("CARGO_BIN_EXE_vandisc"))
            .args(["check-conditions", "--problem", &format!("builtin:{name}"), "--skip-probe", "--out"])
            .arg(&dir)
            .status()
            .expect("binary runs");
        let witness = read_witness(&dir.join("conditions.json"), key);
        let good = status.code() == Some(2) && witness;
        ok &= good;
        parts.push(format!("{name}: exit {:?}, {key} witness {}", status.code(), if witness { "present" } else { "missing" }));
        let _ = std::fs::remove_dir_all(&dir);
    }
    outcome(ok, parts.join(", "))
}

fn read_witness(path: &Path, key: &str) -> bool {
    let Ok(text) = std::fs::read_to_string(path) else { return false };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else { return false };
    v[key]["status"] == "fail" && v[key]["witness"]["point"].is_array()
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("closed-form g on example_2_3", Duration::from_secs(5), Box::new(example_closed_form)),
        ("BSDE bounds and truncation rate", Duration::from_secs(120), Box::new(bsde_bounds)),
        ("decay_quadratic HJB oracle", Duration::from_secs(90), Box::new(|| decay_oracle(Duration::from_secs(30)))),
        ("field bound and Lipschitz bound", Duration::from_secs(600), Box::new(field_bounds)),
        ("sweep monotonicity", Duration::from_secs(600), Box::new(sweep_monotonicity)),
        ("limit subsolution residual", Duration::from_secs(600), Box::new(limit_residual)),
        ("g-expectation properties", Duration::from_secs(60), Box::new(g_expectation_properties)),
        ("representation crosscheck", Duration::from_secs(300), Box::new(representation)),
        ("cost shift comparison gap", Duration::from_secs(600), Box::new(cost_shift)),
        ("DPP residual", Duration::from_secs(600), Box::new(dpp)),
        ("negative controls exit 2", Duration::from_secs(600), Box::new(negative_controls)),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let pass = o.passed && took <= *limit;
        if !pass {
            failed += 1;
        }
        println!("{} {:>2} {name}: {} [{:.1}s, limit {}s]", if pass { "PASS" } else { "FAIL" }, i + 1, o.detail, took.as_secs_f64(), limit.as_secs());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
