use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use serde::Serialize;
use thiserror::Error;

use vandisc_core::bsde::{solve_infinite_horizon, y_bound_check};
use vandisc_core::conditions::{feedback_selector, nonexpansivity_check, stochastic_nonexpansivity_probe};
use vandisc_core::hjb::{default_l_grid, solve_discounted};
use vandisc_core::limit::{constancy_check, lambda_sweep, monotonicity_check, pointwise_cost_bound, radial_monotonicity_check, subsolution_residual};
use vandisc_core::representation::{constant_family, dpp_residual, policy_family, representation_crosscheck, representation_value, sample_nodes, t_grid, DppConfig};
use vandisc_core::sde::invariance_check;
use vandisc_core::{
    lipschitz_audit, resolve_problem, BsdeConfig, ConditionReport, ConstantPolicy, ControlProblem, Grid, ProbeConfig, RepresentationConfig, SolverConfig, Status, ValueField,
};

use crate::manifest::{problem_hash, ExperimentManifest, Outputs};
use crate::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vandisc_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("{name} must be positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(usage(format!("{name} must be at least {min}, got {v}")))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SolveHjbArgs {
    #[arg(long)]
    pub lambda: f64,
    /// Nodes per axis.
    #[arg(long, default_value_t = 201)]
    pub grid_n: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// Strictly decreasing, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,0.5,0.25,0.125,0.0625,0.03125")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 201)]
    pub grid_n: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Jets sampled for the radial and constancy diagnostics.
    #[arg(long, default_value_t = 512)]
    pub jets: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BsdeArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Start point, comma separated; defaults to the domain centre.
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub control: usize,
    /// Output horizon T.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Truncation tolerance on the discounted tail.
    #[arg(long, default_value_t = 1e-3)]
    pub tail_tol: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 4)]
    pub degree: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ConditionsArgs {
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 16)]
    pub z_samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub jets: usize,
    /// Selector lattice nodes per axis.
    #[arg(long, default_value_t = 41)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Skip the stochastic probe.
    #[arg(long)]
    pub skip_probe: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RepresentArgs {
    /// A point (comma separated) or `grid` for evenly spread grid nodes.
    #[arg(long, default_value = "grid")]
    pub x: String,
    #[arg(long)]
    pub tmax: Option<f64>,
    #[arg(long, default_value_t = 13)]
    pub tgrid_n: usize,
    #[arg(long, default_value_t = 0.02)]
    pub dt: f64,
    #[arg(long, default_value_t = 500)]
    pub paths: usize,
    /// Points used with `--x grid`.
    #[arg(long, default_value_t = 9)]
    pub nodes: usize,
    /// Run a sweep over these lambdas and compare its limit with the formula.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 101)]
    pub grid_n: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct DppArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 101)]
    pub grid_n: usize,
    #[arg(long, default_value_t = 500)]
    pub paths: usize,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 1)]
    pub node_stride: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub paths: usize,
    #[arg(long, default_value_t = 2.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
}

fn validate(cli: &Cli) -> Result<()> {
    use crate::Command::*;
    match &cli.command {
        SolveHjb(a) => {
            positive("lambda", a.lambda)?;
            positive("tol", a.tol)?;
            at_least("grid-n", a.grid_n, 3)?;
            at_least("max-iter", a.max_iter, 1)
        }
        SweepLambda(a) => {
            at_least("number of lambdas", a.lambdas.len(), 3)?;
            for l in &a.lambdas {
                positive("lambda", *l)?;
            }
            if a.lambdas.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(usage("lambdas must be strictly decreasing"));
            }
            positive("tol", a.tol)?;
            at_least("grid-n", a.grid_n, 3)
        }
        Bsde(a) => {
            positive("lambda", a.lambda)?;
            positive("horizon", a.horizon)?;
            positive("tail-tol", a.tail_tol)?;
            positive("dt", a.dt)?;
            at_least("paths", a.paths, 2)
        }
        CheckConditions(a) => {
            at_least("pairs", a.pairs, 1)?;
            at_least("jets", a.jets, 1)?;
            at_least("resolution", a.resolution, 2)?;
            positive("lambda", a.lambda)?;
            positive("epsilon", a.epsilon)?;
            positive("dt", a.dt)?;
            at_least("paths", a.paths, 2)
        }
        Represent(a) => {
            if let Some(t) = a.tmax {
                positive("tmax", t)?;
            }
            at_least("tgrid-n", a.tgrid_n, 1)?;
            positive("dt", a.dt)?;
            at_least("paths", a.paths, 2)?;
            at_least("nodes", a.nodes, 1)?;
            at_least("grid-n", a.grid_n, 3)?;
            if let Some(ls) = &a.lambdas {
                at_least("number of lambdas", ls.len(), 3)?;
                for l in ls {
                    positive("lambda", *l)?;
                }
            }
            Ok(())
        }
        DppCheck(a) => {
            positive("lambda", a.lambda)?;
            if !(a.t >= 0.0) {
                return Err(usage(format!("t must be nonnegative, got {}", a.t)));
            }
            positive("dt", a.dt)?;
            at_least("grid-n", a.grid_n, 3)?;
            at_least("paths", a.paths, 2)?;
            at_least("node-stride", a.node_stride, 1)
        }
        Audit(a) => {
            at_least("samples", a.samples, 1)?;
            at_least("paths", a.paths, 1)?;
            positive("horizon", a.horizon)?;
            positive("dt", a.dt)
        }
    }
}

/// Runs one subcommand. `Ok(true)` when every gating report passed.
pub fn run(cli: &Cli) -> Result<bool> {
    validate(cli)?;
    if let Some(t) = cli.common.threads {
        if t == 0 {
            return Err(usage("threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| usage(e.to_string()))?;
    }
    let spec = cli.common.problem.as_deref().ok_or_else(|| usage("--problem is required"))?;
    let problem = resolve_problem(spec)?;
    let start = Instant::now();
    let mut out = Outputs::new(&cli.common.out)?;
    let seed = cli.common.seed;

    use crate::Command::*;
    let passed = match &cli.command {
        SolveHjb(a) => solve_hjb(&problem, a, &mut out)?,
        SweepLambda(a) => sweep(&problem, a, seed, &mut out)?,
        Bsde(a) => bsde(&problem, a, seed, &mut out)?,
        CheckConditions(a) => conditions(&problem, a, seed, &mut out)?,
        Represent(a) => represent(&problem, a, seed, &mut out)?,
        DppCheck(a) => dpp(&problem, a, seed, &mut out)?,
        Audit(a) => audit(&problem, a, seed, &mut out)?,
    };

    let (dir, outputs) = out.finish();
    let manifest = ExperimentManifest {
        subcommand: cli.command.name(),
        flags: cli,
        problem: spec,
        problem_hash: problem_hash(&problem),
        seed,
        threads: rayon::current_num_threads(),
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(PathBuf::from(&dir).join("manifest.json"), text + "\n")?;
    Ok(passed)
}

fn max_h(grid: &Grid) -> f64 {
    grid.h.iter().fold(0.0f64, |a, b| a.max(*b))
}

fn field_report(problem: &ControlProblem, field: &ValueField) -> ConditionReport {
    let c = problem.constants;
    let h = max_h(&field.grid);
    let mut r = ConditionReport::new("field_bounds");
    r.check("|lambda V| <= M", field.sup_abs(), c.bound_m + 1e-6);
    r.check("Lipschitz quotient <= c0 + 10h", field.lipschitz_quotient(), c.nonexp_c0 + 10.0 * h);
    r.metric("residual_norm", field.residual_norm);
    r.metric("iterations", field.iterations as f64);
    r
}

#[derive(Serialize)]
struct SolveReport<'a> {
    lambda: f64,
    nodes: usize,
    h: f64,
    residual_norm: f64,
    iterations: usize,
    bounds: &'a ConditionReport,
}

fn solve_hjb(problem: &ControlProblem, a: &SolveHjbArgs, out: &mut Outputs) -> Result<bool> {
    let grid = Grid::new(&problem.domain, a.grid_n)?;
    let field = solve_discounted(problem, a.lambda, &grid, &SolverConfig { tol: a.tol, max_iter: a.max_iter })?;
    field.write_csv(out.create("field.csv")?)?;
    let bounds = field_report(problem, &field);
    out.json(
        "solve_report.json",
        &SolveReport { lambda: a.lambda, nodes: grid.len(), h: max_h(&grid), residual_norm: field.residual_norm, iterations: field.iterations, bounds: &bounds },
    )?;
    Ok(bounds.passed())
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    lambdas: &'a [f64],
    field_files: Vec<String>,
    sup_gaps: &'a [f64],
    monotone_violation: f64,
    notes: &'a [String],
    gating: Vec<&'static str>,
    monotonicity: ConditionReport,
    residual: ConditionReport,
    pointwise: ConditionReport,
    constancy: ConditionReport,
    radial: ConditionReport,
}

fn sweep(problem: &ControlProblem, a: &SweepArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    let grid = Grid::new(&problem.domain, a.grid_n)?;
    let s = lambda_sweep(problem, &grid, &a.lambdas, &SolverConfig { tol: a.tol, ..SolverConfig::default() })?;
    let mut files = Vec::new();
    for (i, f) in s.fields.iter().enumerate() {
        let name = format!("field_{i:02}.csv");
        f.write_csv(out.create(&name)?)?;
        files.push(name);
    }
    let h = max_h(&grid);
    let radial = radial_monotonicity_check(problem, a.jets, &default_l_grid(), seed);
    let monotonicity = monotonicity_check(&s);
    let residual = subsolution_residual(&s, problem, &default_l_grid(), 10.0 * h)?;
    let pointwise = pointwise_cost_bound(&s, problem, 10.0 * h);
    let constancy = constancy_check(&s, problem, a.jets, seed)?;
    let mut gating = vec!["residual", "pointwise"];
    let mut passed = residual.passed() && pointwise.passed();
    if radial.passed() {
        gating.insert(0, "monotonicity");
        passed &= monotonicity.passed();
    }
    out.json(
        "sweep_summary.json",
        &SweepSummary {
            lambdas: &s.lambdas,
            field_files: files,
            sup_gaps: &s.sup_gaps,
            monotone_violation: s.monotone_violation,
            notes: &s.notes,
            gating,
            monotonicity,
            residual,
            pointwise,
            constancy,
            radial,
        },
    )?;
    Ok(passed)
}

fn centre(problem: &ControlProblem) -> Vec<f64> {
    let (lo, hi) = problem.domain.bounds();
    let mut x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    problem.domain.project(&mut x);
    x
}

fn check_point(problem: &ControlProblem, x: &[f64]) -> Result<()> {
    if x.len() != problem.dim() {
        return Err(usage(format!("point has {} coordinates, problem has dimension {}", x.len(), problem.dim())));
    }
    if !problem.domain.contains(x) {
        return Err(usage(format!("point {x:?} lies outside the domain")));
    }
    Ok(())
}

#[derive(Serialize)]
struct BsdeReport<'a> {
    x: &'a [f64],
    control: usize,
    lambda: f64,
    y0: f64,
    std_error: f64,
    truncation_horizon: f64,
    tail_error_bound: f64,
    z_energy: f64,
    y_sup: f64,
    degree_reductions: usize,
    bounds: &'a ConditionReport,
}

fn bsde(problem: &ControlProblem, a: &BsdeArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    let x = a.x.clone().unwrap_or_else(|| centre(problem));
    check_point(problem, &x)?;
    if a.control >= problem.control_count() {
        return Err(usage(format!("control {} out of range (problem has {})", a.control, problem.control_count())));
    }
    let cfg = BsdeConfig { dt: a.dt, path_count: a.paths, seed, degree: a.degree, ..BsdeConfig::default() };
    let path = solve_infinite_horizon(problem, &x, &ConstantPolicy(a.control), a.lambda, a.horizon, a.tail_tol, &cfg)?;
    let mut w = out.create("bsde_path.csv")?;
    let d = problem.noise_dim();
    let mut head = vec!["t".to_string(), "y".to_string()];
    head.extend((1..=d).map(|i| format!("z{i}")));
    writeln!(w, "{}", head.join(","))?;
    for (k, (t, y)) in path.time_grid.iter().zip(&path.y_values).enumerate() {
        write!(w, "{t:.16e},{y:.16e}")?;
        match path.z_values.get(k) {
            Some(z) => z.iter().try_for_each(|v| write!(w, ",{v:.16e}"))?,
            None => (0..d).try_for_each(|_| write!(w, ","))?,
        }
        writeln!(w)?;
    }
    w.flush()?;
    let bounds = y_bound_check(&path, problem, 0.05);
    out.json(
        "bsde_report.json",
        &BsdeReport {
            x: &x,
            control: a.control,
            lambda: a.lambda,
            y0: path.y_values[0],
            std_error: path.std_error,
            truncation_horizon: path.truncation_horizon,
            tail_error_bound: path.tail_error_bound,
            z_energy: path.z_energy,
            y_sup: path.y_sup,
            degree_reductions: path.degree_reductions,
            bounds: &bounds,
        },
    )?;
    Ok(bounds.passed())
}

#[derive(Serialize)]
struct SelectorStats {
    lattice_len: usize,
    worst_g: f64,
    worst_psi_gap: f64,
    fallback_count: usize,
}

#[derive(Serialize)]
struct ConditionsSummary {
    nonexpansivity: ConditionReport,
    radial_monotonicity: ConditionReport,
    selector: Option<SelectorStats>,
    stochastic_nonexpansivity: Vec<ConditionReport>,
    passed: bool,
}

/// Start pairs for the probe: a spread pair, a coincident pair and a near-boundary pair.
fn probe_pairs(problem: &ControlProblem) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = problem.domain.bounds();
    let at = |s: f64| {
        let mut x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + s * (b - a)).collect();
        problem.domain.project(&mut x);
        x
    };
    vec![(at(0.25), at(0.75)), (at(0.5), at(0.5)), (at(0.1), at(0.9))]
}

fn conditions(problem: &ControlProblem, a: &ConditionsArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    let nonexpansivity = nonexpansivity_check(problem, a.pairs, a.z_samples, seed);
    let radial_monotonicity = radial_monotonicity_check(problem, a.jets, &default_l_grid(), seed);
    let mut selector = None;
    let mut probes = Vec::new();
    if a.skip_probe {
        probes.push(ConditionReport::new("stochastic_nonexpansivity").not_applicable("probe skipped"));
    } else {
        match feedback_selector(problem, a.resolution, 1e-9) {
            Ok(sel) => {
                for (i, (x, xp)) in probe_pairs(problem).into_iter().enumerate() {
                    for u in 0..problem.control_count() {
                        let cfg = ProbeConfig {
                            control: u,
                            lambda: a.lambda,
                            epsilon: a.epsilon,
                            path_count: a.paths,
                            dt: a.dt,
                            seed: seed.wrapping_add((i * problem.control_count() + u) as u64),
                            ..ProbeConfig::new(x.clone(), xp.clone())
                        };
                        probes.push(stochastic_nonexpansivity_probe(problem, &sel, &cfg)?);
                    }
                }
                selector = Some(SelectorStats { lattice_len: sel.lattice_len(), worst_g: sel.worst_g, worst_psi_gap: sel.worst_psi_gap, fallback_count: sel.fallback_count });
            }
            Err(e) => probes.push(ConditionReport::new("stochastic_nonexpansivity").not_applicable(format!("no feedback selector: {e}"))),
        }
    }
    let passed = !nonexpansivity.failed() && !radial_monotonicity.failed() && probes.iter().all(|r| !r.failed());
    out.json("conditions.json", &ConditionsSummary { nonexpansivity, radial_monotonicity, selector, stochastic_nonexpansivity: probes, passed })?;
    Ok(passed)
}

#[derive(Serialize)]
struct RepresentOutput<'a> {
    t_grid: &'a [f64],
    family: Vec<String>,
    points: Vec<vandisc_core::RepresentationResult>,
    crosscheck: Option<ConditionReport>,
}

fn represent(problem: &ControlProblem, a: &RepresentArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    if problem.split_form().is_none() {
        return Err(vandisc_core::Error::MissingSplitForm(problem.name.clone()).into());
    }
    let grid = Grid::new(&problem.domain, a.grid_n)?;
    let sweep = match &a.lambdas {
        Some(ls) => Some(lambda_sweep(problem, &grid, ls, &SolverConfig::default())?),
        None => None,
    };
    let t_max = a.tmax.unwrap_or_else(|| vandisc_core::representation::default_t_max(problem, seed));
    let ts = t_grid(t_max, a.tgrid_n);
    let bsde = BsdeConfig { dt: a.dt, path_count: a.paths, seed, ..BsdeConfig::default() };

    let points: Vec<Vec<f64>> = if a.x == "grid" {
        let proxy;
        let field = match &sweep {
            Some(s) => s.fields.last().expect("nonempty sweep"),
            None => {
                proxy = ValueField { grid: grid.clone(), lambda: 1.0, values: vec![0.0; grid.len()], policy: None, residual_norm: 0.0, iterations: 0, tol: 0.0 };
                &proxy
            }
        };
        sample_nodes(field, a.nodes).into_iter().map(|i| grid.coords(i)).collect()
    } else {
        let x = a.x.split(',').map(|s| s.trim().parse::<f64>().map_err(|e| usage(format!("bad --x '{}': {e}", a.x)))).collect::<Result<Vec<f64>>>()?;
        check_point(problem, &x)?;
        vec![x]
    };

    let family = match &sweep {
        Some(s) => policy_family(problem, s.fields.last().expect("nonempty sweep")),
        None => constant_family(problem),
    };
    let mut results = Vec::with_capacity(points.len());
    let mut w = out.create("representation.csv")?;
    let n = problem.dim();
    let mut head: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    head.extend(["value", "std_error", "argmin_t", "argmin_policy"].map(String::from));
    writeln!(w, "{}", head.join(","))?;
    for x in &points {
        let r = representation_value(problem, x, &ts, &family, &bsde)?;
        for v in x {
            write!(w, "{v:.16e},")?;
        }
        writeln!(w, "{:.16e},{:.16e},{:.16e},{}", r.value, r.std_error, r.argmin_t, r.argmin_policy_name)?;
        results.push(r);
    }
    w.flush()?;

    let crosscheck = match &sweep {
        Some(s) => Some(representation_crosscheck(s, problem, a.nodes, &RepresentationConfig { bsde, t_max: Some(t_max), t_count: a.tgrid_n })?),
        None => None,
    };
    let passed = crosscheck.as_ref().map_or(true, |r| !r.failed());
    out.json("representation.json", &RepresentOutput { t_grid: &ts, family: family.iter().map(|p| p.name.clone()).collect(), points: results, crosscheck })?;
    Ok(passed)
}

fn dpp(problem: &ControlProblem, a: &DppArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    let grid = Grid::new(&problem.domain, a.grid_n)?;
    let field = solve_discounted(problem, a.lambda, &grid, &SolverConfig::default())?;
    field.write_csv(out.create("field.csv")?)?;
    let cfg = DppConfig { t: a.t, bsde: BsdeConfig { dt: a.dt, path_count: a.paths, seed, ..BsdeConfig::default() }, node_stride: a.node_stride };
    let r = dpp_residual(problem, &field, &cfg)?;
    out.json("dpp_report.json", &r)?;
    Ok(!r.failed())
}

#[derive(Serialize)]
struct AuditOutput {
    lipschitz: ConditionReport,
    invariance: vandisc_core::sde::InvarianceReport,
    gating: &'static str,
}

fn audit(problem: &ControlProblem, a: &AuditArgs, seed: u64, out: &mut Outputs) -> Result<bool> {
    let lipschitz = lipschitz_audit(problem, a.samples, seed);
    let invariance = invariance_check(problem, a.paths, a.horizon, a.dt, seed)?;
    let passed = lipschitz.status != Status::Fail;
    out.json("audit.json", &AuditOutput { lipschitz, invariance, gating: "lipschitz" })?;
    Ok(passed)
}
