//! Dynamic programming residuals and the g-expectation representation of `w0`.

use serde::Serialize;

use crate::bsde::{g_expectation, semigroup, BsdeConfig, CostDriver, Driver};
use crate::error::{Error, Result};
use crate::hjb::{FeedbackPolicy, ValueField};
use crate::limit::LambdaSweep;
use crate::model::{dist, ControlProblem};
use crate::report::ConditionReport;
use crate::rng::derive_seed;
use crate::sde::{uniform_grid, ConstantPolicy, PathCloud, Policy};

/// A policy with a label for reports.
pub struct NamedPolicy<'a> {
    pub name: String,
    pub policy: Box<dyn Policy + 'a>,
}

/// Every constant control.
pub fn constant_family(problem: &ControlProblem) -> Vec<NamedPolicy<'static>> {
    (0..problem.control_count())
        .map(|u| NamedPolicy { name: format!("constant u{u}"), policy: Box::new(ConstantPolicy(u)) })
        .collect()
}

/// Constant controls plus the feedback policy of `field`, when it has one.
pub fn policy_family<'a>(problem: &ControlProblem, field: &'a ValueField) -> Vec<NamedPolicy<'a>> {
    let mut family: Vec<NamedPolicy<'a>> = constant_family(problem);
    if let Some(fb) = FeedbackPolicy::from_field(field) {
        family.push(NamedPolicy { name: format!("feedback(lambda={})", field.lambda), policy: Box::new(fb) });
    }
    family
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DppConfig {
    pub t: f64,
    pub bsde: BsdeConfig,
    /// Every `node_stride`-th active node is tested.
    pub node_stride: usize,
}

impl Default for DppConfig {
    fn default() -> Self {
        DppConfig { t: 0.5, bsde: BsdeConfig { dt: 0.01, path_count: 500, ..BsdeConfig::default() }, node_stride: 1 }
    }
}

/// `lambda |V(x) - min_u G_{0,t}[V(X_t)]|` per node, in `lambda V` units.
///
/// The minimum runs over constant controls and the field's feedback policy.
/// A node passes when its residual is within `3 lambda std_error + c0 h + 10 dt`.
pub fn dpp_residual(problem: &ControlProblem, field: &ValueField, cfg: &DppConfig) -> Result<ConditionReport> {
    let lambda = field.lambda;
    if field.grid.dim() != problem.dim() {
        return Err(Error::GridMismatch(format!("field has dimension {}, problem {}", field.grid.dim(), problem.dim())));
    }
    if !(lambda > 0.0) || !(cfg.t >= 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive and t nonnegative".into()));
    }
    let family = policy_family(problem, field);
    let terminal = |x: &[f64], _: &[f64]| field.interpolate(x) / lambda;
    let h = field.grid.h.iter().fold(0.0f64, |a, b| a.max(*b));
    let allowance = problem.constants.nonexp_c0 * h + 10.0 * cfg.bsde.dt;
    let mut r = ConditionReport::new("dpp_residual");
    let (mut worst, mut worst_raw, mut at) = (f64::NEG_INFINITY, 0.0, None);
    let mut tested = 0;
    for node in field.grid.active_nodes().step_by(cfg.node_stride.max(1)) {
        let x = field.grid.coords(node);
        let mut best = (f64::INFINITY, 0.0);
        for np in &family {
            let g = semigroup(&CostDriver(problem), lambda, &terminal, problem, &x, np.policy.as_ref(), cfg.t, &cfg.bsde)?;
            if g.value < best.0 {
                best = (g.value, g.std_error);
            }
        }
        let raw = (field.values[node] - lambda * best.0).abs();
        let excess = raw - 3.0 * lambda * best.1;
        tested += 1;
        if excess > worst {
            (worst, worst_raw, at) = (excess, raw, Some(x));
        }
    }
    if !r.check("lambda |V - min G| minus 3 std errors", worst, allowance) {
        if let Some(x) = at {
            r.witness(format!("residual {worst_raw:.4e}"), x);
        }
    }
    r.metric("max_residual", worst_raw);
    r.metric("t", cfg.t);
    r.metric("nodes", tested as f64);
    r.note("the infimum over controls is restricted to constant controls and the grid feedback policy");
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub std_error: f64,
    pub argmin_t: f64,
    pub argmin_policy: usize,
    pub argmin_policy_name: String,
    pub t_grid: Vec<f64>,
    /// Best value per time, over the family.
    pub values_by_t: Vec<f64>,
    /// Plain expectation `E[min_v psi1(X_t, v)]` at the argmin.
    pub plain_mean: f64,
    pub tail_note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepresentationConfig {
    pub bsde: BsdeConfig,
    /// Truncation of the infimum over `t`; defaults to [`default_t_max`].
    pub t_max: Option<f64>,
    pub t_count: usize,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        RepresentationConfig { bsde: BsdeConfig { dt: 0.02, path_count: 500, ..BsdeConfig::default() }, t_max: None, t_count: 13 }
    }
}

const FALLBACK_T_MAX: f64 = 10.0;

/// Slowest positive rate at which a constant control contracts the distance
/// of coupled paths.
pub fn contraction_rate(problem: &ControlProblem, seed: u64) -> Option<f64> {
    let (lo, hi) = problem.domain.bounds();
    let mut x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + 0.6 * (b - a)).collect();
    let mut xp: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| a + 0.4 * (b - a)).collect();
    problem.domain.project(&mut x);
    problem.domain.project(&mut xp);
    let (horizon, dt) = (1.0, 0.01);
    let grid = uniform_grid(horizon, dt).ok()?;
    let d0 = dist(&x, &xp);
    if d0 == 0.0 {
        return None;
    }
    let mut rate: Option<f64> = None;
    for u in 0..problem.control_count() {
        let seed = derive_seed(seed, u as u64);
        let a = PathCloud::generate(problem, &x, &ConstantPolicy(u), &grid, 64, seed).ok()?;
        let b = PathCloud::generate(problem, &xp, &ConstantPolicy(u), &grid, 64, seed).ok()?;
        let k = grid.len() - 1;
        let mean_sq = (0..a.paths).map(|p| dist(a.state(k, p), b.state(k, p)).powi(2)).sum::<f64>() / a.paths as f64;
        let r = -(mean_sq.sqrt() / d0).ln() / horizon;
        if r > 1e-6 {
            rate = Some(rate.map_or(r, |m: f64| m.min(r)));
        }
    }
    rate
}

/// `6 / rate` from [`contraction_rate`], or 10 when no control contracts.
pub fn default_t_max(problem: &ControlProblem, seed: u64) -> f64 {
    contraction_rate(problem, seed).map_or(FALLBACK_T_MAX, |r| 6.0 / r)
}

/// `count` equally spaced times from 0 to `t_max`.
pub fn t_grid(t_max: f64, count: usize) -> Vec<f64> {
    let count = count.max(1);
    if count == 1 {
        return vec![0.0];
    }
    (0..count).map(|i| t_max * i as f64 / (count - 1) as f64).collect()
}

/// `inf_{t, u} eps^g[min_v psi1(X_t^{x,u}, v)]` over `t_grid` and `family`.
pub fn representation_value(problem: &ControlProblem, x: &[f64], t_grid: &[f64], family: &[NamedPolicy<'_>], bsde: &BsdeConfig) -> Result<RepresentationResult> {
    if problem.split_form().is_none() {
        return Err(Error::MissingSplitForm(problem.name.clone()));
    }
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("t_grid must start at 0 and increase".into()));
    }
    if family.is_empty() {
        return Err(Error::InvalidArgument("empty policy family".into()));
    }
    let g = |z: &[f64]| problem.split_g(z).expect("split form checked");
    let eta = |y: &[f64], _: &[f64]| (0..problem.control_count()).map(|v| problem.split_psi1(y, v).expect("split form checked")).fold(f64::INFINITY, f64::min);
    let mut best: Option<(f64, f64, f64, usize, f64)> = None;
    let mut values_by_t = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut best_t = f64::INFINITY;
        let members: &[NamedPolicy<'_>] = if t == 0.0 { &family[..1] } else { family };
        for (i, np) in members.iter().enumerate() {
            let e = g_expectation(&g, &eta, problem, x, np.policy.as_ref(), t, bsde)?;
            best_t = best_t.min(e.value);
            if best.map_or(true, |b| e.value < b.0) {
                best = Some((e.value, e.std_error, t, i, e.sample_mean));
            }
        }
        values_by_t.push(best_t);
    }
    let (value, std_error, argmin_t, argmin_policy, plain_mean) = best.expect("nonempty family and grid");
    let t_max = *t_grid.last().expect("nonempty");
    Ok(RepresentationResult {
        x: x.to_vec(),
        value,
        std_error,
        argmin_t,
        argmin_policy,
        argmin_policy_name: family[argmin_policy].name.clone(),
        t_grid: t_grid.to_vec(),
        values_by_t,
        plain_mean,
        tail_note: format!("infimum over t truncated at t = {t_max:.4}; controls restricted to {} policies", family.len()),
    })
}

/// How much the running infimum still drops over the last quarter of the time grid.
pub fn tail_allowance(values_by_t: &[f64]) -> f64 {
    let k = (values_by_t.len() * 3).div_ceil(4).max(1);
    let head = values_by_t[..k].iter().fold(f64::INFINITY, |a, b| a.min(*b));
    let all = values_by_t.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    (head - all).max(0.0)
}

/// Evenly spread active nodes, `count` of them.
pub fn sample_nodes(field: &ValueField, count: usize) -> Vec<usize> {
    let active: Vec<usize> = field.grid.active_nodes().collect();
    if count >= active.len() {
        return active;
    }
    if count == 1 {
        return vec![active[active.len() / 2]];
    }
    (0..count).map(|i| active[i * (active.len() - 1) / (count - 1)]).collect()
}

/// Compares `w0` with the representation formula at `node_count` nodes.
pub fn representation_crosscheck(sweep: &LambdaSweep, problem: &ControlProblem, node_count: usize, cfg: &RepresentationConfig) -> Result<ConditionReport> {
    if problem.split_form().is_none() {
        return Err(Error::MissingSplitForm(problem.name.clone()));
    }
    let field = sweep.fields.last().expect("nonempty sweep");
    let family = policy_family(problem, field);
    let t_max = cfg.t_max.unwrap_or_else(|| default_t_max(problem, cfg.bsde.seed));
    let ts = t_grid(t_max, cfg.t_count);
    let h = field.grid.h.iter().fold(0.0f64, |a, b| a.max(*b));
    let base = sweep.last_gap() + problem.constants.nonexp_c0 * h;
    let has_g = problem.without_g().map(|p| p.cost_expr() != problem.cost_expr()).unwrap_or(false);
    let plain = if has_g { Some(problem.without_g()?) } else { None };

    let mut r = ConditionReport::new("representation_crosscheck");
    let (mut worst, mut at) = (f64::NEG_INFINITY, None);
    let mut comparison_excess = f64::NEG_INFINITY;
    for node in sample_nodes(field, node_count) {
        let x = field.grid.coords(node);
        let rep = representation_value(problem, &x, &ts, &family, &cfg.bsde)?;
        let bound = 3.0 * rep.std_error + base + tail_allowance(&rep.values_by_t);
        let excess = (sweep.w0[node] - rep.value).abs() - bound;
        if excess > worst {
            worst = excess;
            at = Some((x.clone(), sweep.w0[node], rep.value));
        }
        if let Some(p0) = &plain {
            let rep0 = representation_value(p0, &x, &ts, &family, &cfg.bsde)?;
            comparison_excess = comparison_excess.max(rep.value - rep0.value - 3.0 * rep.std_error.max(rep0.std_error));
        }
    }
    if !r.check("|w0 - representation| minus tolerance", worst, 0.0) {
        if let Some((x, w, v)) = at {
            r.witness(format!("w0 = {w:.6e}, representation = {v:.6e}"), x);
        }
    }
    if plain.is_some() {
        r.check("eps^g <= plain expectation (g <= 0)", comparison_excess, 0.0);
    }
    r.metric("t_max", t_max);
    r.metric("last_sup_gap", sweep.last_gap());
    r.note(format!("infimum over t truncated at {t_max:.4}; controls restricted to constant and grid-feedback policies"));
    Ok(r)
}

/// `lim lambda psi(x, z / lambda, u)` at the actual state, extrapolated from
/// the two smallest lambdas.
pub struct RecessionDriver<'a> {
    pub problem: &'a ControlProblem,
    pub lambdas: [f64; 2],
}

impl<'a> RecessionDriver<'a> {
    pub fn new(problem: &'a ControlProblem, lambda_seq: &[f64]) -> Result<Self> {
        let k = lambda_seq.len();
        if k < 2 || !(lambda_seq[k - 1] > 0.0 && lambda_seq[k - 1] < lambda_seq[k - 2]) {
            return Err(Error::InvalidArgument("need two positive, decreasing lambdas".into()));
        }
        Ok(RecessionDriver { problem, lambdas: [lambda_seq[k - 2], lambda_seq[k - 1]] })
    }
}

impl Driver for RecessionDriver<'_> {
    fn eval(&self, x: &[f64], z: &[f64], u: usize) -> f64 {
        let at = |l: f64| {
            let zl: Vec<f64> = z.iter().map(|v| v / l).collect();
            l * self.problem.cost(x, &zl, u)
        };
        let [l1, l2] = self.lambdas;
        (l1 * at(l2) - l2 * at(l1)) / (l1 - l2)
    }
}

/// Checks `w0(x) <= inf_{t,u} G^{recession}_{0,t}[min_v psi(X_t, 0, v)]` at sampled nodes.
pub fn generalized_upper_bound(
    sweep: &LambdaSweep,
    problem: &ControlProblem,
    recession: &dyn Driver,
    node_count: usize,
    t_grid: &[f64],
    bsde: &BsdeConfig,
) -> Result<ConditionReport> {
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("t_grid must start at 0 and increase".into()));
    }
    let field = sweep.fields.last().expect("nonempty sweep");
    let family = policy_family(problem, field);
    let eta = |y: &[f64], _: &[f64]| problem.min_cost_at_zero(y);
    let h = field.grid.h.iter().fold(0.0f64, |a, b| a.max(*b));
    let slack = sweep.last_gap() + problem.constants.nonexp_c0 * h;
    let mut r = ConditionReport::new("generalized_upper_bound");
    let (mut worst, mut at) = (f64::NEG_INFINITY, None);
    for node in sample_nodes(field, node_count) {
        let x = field.grid.coords(node);
        let mut best = (f64::INFINITY, 0.0);
        for &t in t_grid {
            let members: &[NamedPolicy<'_>] = if t == 0.0 { &family[..1] } else { &family };
            for np in members {
                let g = semigroup(recession, 0.0, &eta, problem, &x, np.policy.as_ref(), t, bsde)?;
                if g.value < best.0 {
                    best = (g.value, g.std_error);
                }
            }
        }
        let excess = sweep.w0[node] - best.0 - 3.0 * best.1;
        if excess > worst {
            worst = excess;
            at = Some((x, sweep.w0[node], best.0));
        }
    }
    if !r.check("w0 - bound minus 3 std errors", worst, slack) {
        if let Some((x, w, b)) = at {
            r.witness(format!("w0 = {w:.6e} above bound {b:.6e}"), x);
        }
    }
    r.metric("slack", slack);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{solve_discounted, Grid, SolverConfig};
    use crate::limit::{default_recession_lambdas, lambda_sweep};
    use crate::model::builtin_problem;

    fn field(name: &str, n: usize, lambda: f64) -> (ControlProblem, ValueField) {
        let p = builtin_problem(name).unwrap();
        let g = Grid::new(&p.domain, n).unwrap();
        let f = solve_discounted(&p, lambda, &g, &SolverConfig::default()).unwrap();
        (p, f)
    }

    #[test]
    fn dpp_constant_cost_is_exact() {
        let (p, f) = field("constant_cost", 11, 0.5);
        for t in [0.0, 0.25, 0.5] {
            let cfg = DppConfig { t, bsde: BsdeConfig { path_count: 50, ..BsdeConfig::default() }, node_stride: 1 };
            let r = dpp_residual(&p, &f, &cfg).unwrap();
            assert!(r.metrics["max_residual"] < 1e-12, "t={t}: {r:#?}");
        }
    }

    #[test]
    fn dpp_at_zero_time_is_identity() {
        let (p, f) = field("decay_quadratic", 41, 0.5);
        let cfg = DppConfig { t: 0.0, node_stride: 4, ..DppConfig::default() };
        assert!(dpp_residual(&p, &f, &cfg).unwrap().metrics["max_residual"] < 1e-15);
    }

    #[test]
    fn dpp_decay_within_tolerance() {
        let (p, f) = field("decay_quadratic", 101, 0.5);
        let cfg = DppConfig { t: 0.5, bsde: BsdeConfig { path_count: 20, ..BsdeConfig::default() }, node_stride: 5 };
        let r = dpp_residual(&p, &f, &cfg).unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn representation_decay_flow() {
        let p = builtin_problem("decay_quadratic").unwrap().with_cost_shift(0.0);
        assert!(representation_value(&p, &[0.8], &[0.0], &constant_family(&p), &BsdeConfig::default()).is_err());
        let split = parse_split_decay();
        let cfg = BsdeConfig { dt: 0.01, path_count: 8, ..BsdeConfig::default() };
        let only0 = representation_value(&split, &[0.8], &[0.0], &constant_family(&split), &cfg).unwrap();
        assert_eq!(only0.value, 0.8f64 * 0.8);
        let ts = t_grid(6.0, 7);
        let r = representation_value(&split, &[0.8], &ts, &constant_family(&split), &cfg).unwrap();
        // Euler flow (1 - dt)^k instead of e^{-t}.
        let oracle = 0.64 * (1.0f64 - 0.01).powi(1200);
        assert!((r.value - oracle).abs() < 1e-12, "{r:?}");
        assert_eq!(r.argmin_t, 6.0);
        assert!(r.value <= only0.value);
    }

    fn parse_split_decay() -> ControlProblem {
        let text = builtin_problem("decay_quadratic").unwrap().to_config_text().replace("running = (x1 ^ 2.0)", "psi1 = (x1 ^ 2.0)\ng = 0");
        crate::model::parse_problem(&text).unwrap()
    }

    #[test]
    fn contraction_and_t_max() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let r = contraction_rate(&p, 0).unwrap();
        assert!((r - 0.5).abs() < 0.01, "{r}");
        assert!((default_t_max(&p, 0) - 12.0).abs() < 0.3);
        assert_eq!(default_t_max(&builtin_problem("constant_cost").unwrap(), 0), FALLBACK_T_MAX);
    }

    #[test]
    fn crosscheck_split_homogeneous() {
        let p = builtin_problem("split_homogeneous").unwrap();
        let g = Grid::new(&p.domain, 81).unwrap();
        let s = lambda_sweep(&p, &g, &[1.0, 0.25, 0.0625], &SolverConfig::default()).unwrap();
        let cfg = RepresentationConfig { bsde: BsdeConfig { dt: 0.02, path_count: 16, ..BsdeConfig::default() }, t_max: None, t_count: 9 };
        let r = representation_crosscheck(&s, &p, 5, &cfg).unwrap();
        assert!(r.passed(), "{r:#?}");
        let rec = RecessionDriver::new(&p, &default_recession_lambdas()).unwrap();
        assert!((rec.eval(&[0.3], &[0.4], 0) + 0.4).abs() < 1e-9);
        let b = generalized_upper_bound(&s, &p, &rec, 5, &t_grid(4.0, 5), &cfg.bsde).unwrap();
        assert!(b.passed(), "{b:#?}");
    }

    #[test]
    fn tail_allowance_measures_late_drop() {
        assert_eq!(tail_allowance(&[3.0, 2.0, 1.0, 1.0]), 0.0);
        assert_eq!(tail_allowance(&[3.0, 2.0, 1.0, 0.5]), 0.5);
    }
}
