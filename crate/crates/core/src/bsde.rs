//! Backward SDE solvers by regression Monte Carlo.
//!
//! The scheme on a grid `t_0 < .. < t_K` with per-path values is
//!
//! ```text
//! E_k = Ê[Y_{k+1} | X_k]
//! Z_k = Ê[(Y_{k+1} - E_k) dW_k | X_k] / dt_k
//! Y_k = (E_k + dt_k f(X_k, Z_k, u_k)) / (1 + lambda dt_k)
//! ```
//!
//! where `Ê` is least squares on monomials of the standardized state (and
//! optionally the running Brownian motion) up to a configurable degree.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ControlProblem;
use crate::report::ConditionReport;
use crate::sde::{uniform_grid, PathCloud, Policy};

const CHUNK: usize = 1024;

/// Generator `f(x, z, u)` of a BSDE, excluding the `-lambda y` term.
pub trait Driver: Sync {
    fn eval(&self, x: &[f64], z: &[f64], u: usize) -> f64;
}

impl<F: Fn(&[f64], &[f64], usize) -> f64 + Sync> Driver for F {
    fn eval(&self, x: &[f64], z: &[f64], u: usize) -> f64 {
        self(x, z, u)
    }
}

/// The running cost `psi` of a problem as a driver.
pub struct CostDriver<'a>(pub &'a ControlProblem);

impl Driver for CostDriver<'_> {
    fn eval(&self, x: &[f64], z: &[f64], u: usize) -> f64 {
        self.0.cost(x, z, u)
    }
}

/// Regression features for the conditional expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Features {
    State,
    /// State plus the Brownian motion `W_t`, for terminals that read `W`.
    StateAndNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BsdeConfig {
    pub dt: f64,
    pub path_count: usize,
    pub seed: u64,
    pub degree: usize,
    pub features: Features,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        BsdeConfig { dt: 0.01, path_count: 1000, seed: 0, degree: 4, features: Features::State }
    }
}

/// Least-squares projection onto polynomials of standardized features.
struct Design {
    mean: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    exps: Vec<Vec<u8>>,
    degree: usize,
    factor: Option<DMatrix<f64>>,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; vars]];
    let mut frontier = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // Only raise variables at or after the last raised one, so each monomial appears once.
            let start = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for j in start..vars {
                let mut n = m.clone();
                n[j] += 1;
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl Design {
    fn basis(&self, feat: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let mut pw = [[1.0f64; 8]; 32];
        for (a, &j) in self.active.iter().enumerate() {
            let s = (feat[j] - self.mean[j]) / self.scale[j];
            for e in 1..=self.degree {
                pw[a][e] = pw[a][e - 1] * s;
            }
        }
        for m in &self.exps {
            let mut v = 1.0;
            for (a, &e) in m.iter().enumerate() {
                v *= pw[a][e as usize];
            }
            out.push(v);
        }
    }

    /// Fits the design on `paths` rows of `f` features, lowering the degree
    /// until the Gram matrix is numerically positive definite.
    fn build(feats: &[f64], f: usize, paths: usize, max_degree: usize) -> (Design, usize) {
        let mut mean = vec![0.0; f];
        let mut scale = vec![1.0; f];
        let mut active = Vec::new();
        for j in 0..f {
            let m = (0..paths).map(|p| feats[p * f + j]).sum::<f64>() / paths as f64;
            let v = (0..paths).map(|p| (feats[p * f + j] - m).powi(2)).sum::<f64>() / paths as f64;
            mean[j] = m;
            if v.sqrt() > 1e-12 * (1.0 + m.abs()) {
                scale[j] = v.sqrt();
                active.push(j);
            }
        }
        let mut degree = if active.is_empty() { 0 } else { max_degree.min(7) };
        while degree > 0 && monomials(active.len(), degree).len() * 2 > paths {
            degree -= 1;
        }
        let mut reductions = 0;
        loop {
            let mut d = Design { mean: mean.clone(), scale: scale.clone(), active: active.clone(), exps: monomials(active.len(), degree), degree, factor: None };
            if degree == 0 {
                d.exps = vec![vec![0; active.len()]];
                d.factor = Some(DMatrix::from_element(1, 1, 1.0));
                return (d, reductions);
            }
            let nb = d.exps.len();
            let gram = d.accumulate(feats, f, paths, |_, b, acc: &mut Vec<f64>| {
                for r in 0..nb {
                    for c in r..nb {
                        acc[r * nb + c] += b[r] * b[c];
                    }
                }
            }, nb * nb);
            let mut g = DMatrix::zeros(nb, nb);
            for r in 0..nb {
                for c in r..nb {
                    g[(r, c)] = gram[r * nb + c] / paths as f64;
                    g[(c, r)] = g[(r, c)];
                }
            }
            let diag: Vec<f64> = (0..nb).map(|i| g[(i, i)]).collect();
            if let Some(ch) = g.cholesky() {
                let l = ch.l();
                if (0..nb).all(|i| l[(i, i)] * l[(i, i)] >= 1e-11 * diag[i]) {
                    d.factor = Some(l);
                    return (d, reductions);
                }
            }
            degree -= 1;
            reductions += 1;
        }
    }

    /// Sums `body(path, basis, acc)` over fixed-size path chunks, in chunk order.
    fn accumulate<F>(&self, feats: &[f64], f: usize, paths: usize, body: F, len: usize) -> Vec<f64>
    where
        F: Fn(usize, &[f64], &mut Vec<f64>) + Sync,
    {
        let chunks: Vec<Vec<f64>> = (0..paths.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![0.0; len];
                let mut b = Vec::with_capacity(self.exps.len());
                for p in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                    self.basis(&feats[p * f..(p + 1) * f], &mut b);
                    body(p, &b, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; len];
        for c in chunks {
            for (t, v) in total.iter_mut().zip(c) {
                *t += v;
            }
        }
        total
    }

    /// Regression coefficients of `response`; exact for constant responses.
    fn project(&self, feats: &[f64], f: usize, response: &[f64]) -> Vec<f64> {
        let nb = self.exps.len();
        let mut coef = vec![0.0; nb];
        if response.iter().all(|v| *v == response[0]) {
            coef[0] = response[0];
            return coef;
        }
        let paths = response.len();
        if nb == 1 {
            coef[0] = response.iter().sum::<f64>() / paths as f64;
            return coef;
        }
        let rhs = self.accumulate(feats, f, paths, |p, b, acc: &mut Vec<f64>| {
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v * response[p];
            }
        }, nb);
        let l = self.factor.as_ref().expect("design factor");
        let mut y: Vec<f64> = rhs.iter().map(|v| v / paths as f64).collect();
        for i in 0..nb {
            let mut s = y[i];
            for j in 0..i {
                s -= l[(i, j)] * y[j];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..nb).rev() {
            let mut s = y[i];
            for j in i + 1..nb {
                s -= l[(j, i)] * coef[j];
            }
            coef[i] = s / l[(i, i)];
        }
        coef
    }

    fn predict(&self, feats: &[f64], f: usize, coef: &[f64], out: &mut [f64]) {
        if coef[1..].iter().all(|c| *c == 0.0) {
            out.iter_mut().for_each(|o| *o = coef[0]);
            return;
        }
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let mut b = Vec::with_capacity(self.exps.len());
            for (i, o) in chunk.iter_mut().enumerate() {
                let p = c * CHUNK + i;
                self.basis(&feats[p * f..(p + 1) * f], &mut b);
                *o = b.iter().zip(coef).map(|(x, y)| x * y).sum();
            }
        });
    }
}

/// Output of one backward pass over a path cloud.
#[derive(Debug, Clone, Serialize)]
pub struct BackwardSolution {
    pub y0: f64,
    pub z0: Vec<f64>,
    /// `Y_k` along path 0.
    pub y_path: Vec<f64>,
    /// `Z_k` along path 0.
    pub z_path: Vec<Vec<f64>>,
    /// `max_p |Y_k|` per step.
    pub y_sup: Vec<f64>,
    /// Path mean of `|Z_k|^2` per step.
    pub z_sq_mean: Vec<f64>,
    /// Standard error of the pathwise discounted-sum estimator of `Y_0`.
    pub std_error: f64,
    pub degree_reductions: usize,
    pub degree_used: usize,
}

/// Backward pass with terminal values `terminal[p]` on an existing cloud.
pub fn solve_backward(cloud: &PathCloud, driver: &dyn Driver, lambda: f64, terminal: &[f64], degree: usize, features: Features) -> BackwardSolution {
    backward_pass(cloud, driver, lambda, terminal, degree, features, None)
}

/// Like [`solve_backward`], also returning `Z` on every path, time-major
/// (`steps x paths x noise_dim`).
pub fn solve_backward_full(cloud: &PathCloud, driver: &dyn Driver, lambda: f64, terminal: &[f64], degree: usize, features: Features) -> (BackwardSolution, Vec<f64>) {
    let mut all = vec![0.0; cloud.steps() * cloud.paths * cloud.noise_dim];
    let sol = backward_pass(cloud, driver, lambda, terminal, degree, features, Some(&mut all));
    (sol, all)
}

fn backward_pass(
    cloud: &PathCloud,
    driver: &dyn Driver,
    lambda: f64,
    terminal: &[f64],
    degree: usize,
    features: Features,
    mut z_all: Option<&mut Vec<f64>>,
) -> BackwardSolution {
    let (p, n, d, steps) = (cloud.paths, cloud.dim, cloud.noise_dim, cloud.steps());
    let f = match features {
        Features::State => n,
        Features::StateAndNoise => n + d,
    };
    let mut w = vec![0.0; p * d];
    if features == Features::StateAndNoise {
        for k in 0..steps {
            for (wi, dw) in w.iter_mut().zip(cloud.increments_at(k)) {
                *wi += dw;
            }
        }
    }
    let mut y_next = terminal.to_vec();
    let mut pathwise = terminal.to_vec();
    let mut y_path = vec![0.0; steps + 1];
    let mut z_path = vec![vec![0.0; d]; steps];
    let mut y_sup = vec![0.0; steps + 1];
    let mut z_sq_mean = vec![0.0; steps];
    y_path[steps] = y_next[0];
    y_sup[steps] = y_next.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let mut feats = vec![0.0; p * f];
    let mut e = vec![0.0; p];
    let mut z = vec![0.0; p * d];
    let mut resp = vec![0.0; p];
    let mut zcol = vec![0.0; p];
    let (mut reductions, mut degree_used) = (0, degree);
    for k in (0..steps).rev() {
        let dt = cloud.time_grid[k + 1] - cloud.time_grid[k];
        let inc = cloud.increments_at(k);
        if features == Features::StateAndNoise {
            for (wi, dw) in w.iter_mut().zip(inc) {
                *wi -= dw;
            }
        }
        let xs = cloud.states_at(k);
        for q in 0..p {
            feats[q * f..q * f + n].copy_from_slice(&xs[q * n..(q + 1) * n]);
            if f > n {
                feats[q * f + n..(q + 1) * f].copy_from_slice(&w[q * d..(q + 1) * d]);
            }
        }
        let (design, red) = Design::build(&feats, f, p, degree);
        reductions += red;
        degree_used = degree_used.min(design.degree);
        let coef = design.project(&feats, f, &y_next);
        design.predict(&feats, f, &coef, &mut e);
        for j in 0..d {
            for q in 0..p {
                resp[q] = (y_next[q] - e[q]) * inc[q * d + j] / dt;
            }
            let c = design.project(&feats, f, &resp);
            design.predict(&feats, f, &c, &mut zcol);
            for q in 0..p {
                z[q * d + j] = zcol[q];
            }
        }
        let disc = 1.0 + lambda * dt;
        y_next
            .par_iter_mut()
            .zip(pathwise.par_iter_mut())
            .enumerate()
            .for_each(|(q, (y, s))| {
                let x = &xs[q * n..(q + 1) * n];
                let zq = &z[q * d..(q + 1) * d];
                let fv = driver.eval(x, zq, cloud.control(k, q));
                *y = (e[q] + dt * fv) / disc;
                *s = (*s + dt * fv) / disc;
            });
        y_path[k] = y_next[0];
        z_path[k].copy_from_slice(&z[..d]);
        if let Some(all) = z_all.as_deref_mut() {
            all[k * p * d..(k + 1) * p * d].copy_from_slice(&z);
        }
        y_sup[k] = y_next.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        z_sq_mean[k] = z.chunks(d).map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / p as f64;
    }
    let mean = pathwise.iter().sum::<f64>() / p as f64;
    let var = if p > 1 { pathwise.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (p - 1) as f64 } else { 0.0 };
    BackwardSolution {
        y0: y_path[0],
        z0: z_path.first().cloned().unwrap_or_default(),
        y_path,
        z_path,
        y_sup,
        z_sq_mean,
        std_error: (var / p as f64).sqrt(),
        degree_reductions: reductions,
        degree_used,
    }
}

/// Discounted cost BSDE along a controlled path, with its diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BsdePath {
    pub time_grid: Vec<f64>,
    pub y_values: Vec<f64>,
    pub z_values: Vec<Vec<f64>>,
    pub lambda: f64,
    pub truncation_horizon: f64,
    pub tail_error_bound: f64,
    pub std_error: f64,
    /// `max_p |Y_k|` over all paths on the output grid.
    pub y_sup: f64,
    /// `sum_k e^{-2 lambda t_k} E|Z_k|^2 dt_k` over the full truncated horizon.
    pub z_energy: f64,
    pub degree_reductions: usize,
    pub path_count: usize,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

fn run_cost_bsde(problem: &ControlProblem, x0: &[f64], policy: &dyn Policy, lambda: f64, horizon: f64, cfg: &BsdeConfig) -> Result<(Vec<f64>, BackwardSolution)> {
    check_lambda(lambda)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let grid = uniform_grid(horizon, cfg.dt)?;
    let cloud = PathCloud::generate(problem, x0, policy, &grid, cfg.path_count, cfg.seed)?;
    let terminal = vec![0.0; cloud.paths];
    let sol = solve_backward(&cloud, &CostDriver(problem), lambda, &terminal, cfg.degree, Features::State);
    Ok((grid, sol))
}

fn z_energy(grid: &[f64], lambda: f64, z_sq_mean: &[f64]) -> f64 {
    z_sq_mean.iter().enumerate().map(|(k, z2)| (-2.0 * lambda * grid[k]).exp() * z2 * (grid[k + 1] - grid[k])).sum()
}

/// Cost BSDE on `[0, horizon]` with zero terminal value.
pub fn solve_finite_horizon(problem: &ControlProblem, x0: &[f64], policy: &dyn Policy, lambda: f64, horizon: f64, cfg: &BsdeConfig) -> Result<BsdePath> {
    let (grid, sol) = run_cost_bsde(problem, x0, policy, lambda, horizon, cfg)?;
    Ok(BsdePath {
        z_energy: z_energy(&grid, lambda, &sol.z_sq_mean),
        y_sup: sol.y_sup.iter().fold(0.0, |a: f64, b| a.max(*b)),
        time_grid: grid,
        y_values: sol.y_path,
        z_values: sol.z_path,
        lambda,
        truncation_horizon: horizon,
        tail_error_bound: 0.0,
        std_error: sol.std_error,
        degree_reductions: sol.degree_reductions,
        path_count: cfg.path_count,
    })
}

/// Horizon `m` at which the tail bound `(M/lambda) e^{-lambda (m - T)}` equals `tol`.
pub fn truncation_horizon(bound_m: f64, lambda: f64, output_horizon: f64, tol: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let ratio = bound_m / (lambda * tol);
    let m = if ratio <= 1.0 { output_horizon } else { output_horizon + ratio.ln() / lambda };
    if !m.is_finite() || lambda * m > 700.0 {
        return Err(Error::ToleranceTooSmall { tol, horizon: m });
    }
    Ok(m)
}

/// Discounted cost BSDE on `[0, infinity)`, truncated so the tail error is at most `tol`.
/// Output is restricted to grid times `t <= output_horizon`.
pub fn solve_infinite_horizon(
    problem: &ControlProblem,
    x0: &[f64],
    policy: &dyn Policy,
    lambda: f64,
    output_horizon: f64,
    tol: f64,
    cfg: &BsdeConfig,
) -> Result<BsdePath> {
    let bound_m = problem.constants.bound_m;
    let m = truncation_horizon(bound_m, lambda, output_horizon, tol)?.max(cfg.dt);
    let (grid, sol) = run_cost_bsde(problem, x0, policy, lambda, m, cfg)?;
    let keep = grid.iter().take_while(|t| **t <= output_horizon + 1e-12).count().max(1);
    Ok(BsdePath {
        z_energy: z_energy(&grid, lambda, &sol.z_sq_mean),
        y_sup: sol.y_sup[..keep].iter().fold(0.0, |a: f64, b| a.max(*b)),
        time_grid: grid[..keep].to_vec(),
        y_values: sol.y_path[..keep].to_vec(),
        z_values: sol.z_path[..keep.min(sol.z_path.len())].to_vec(),
        lambda,
        truncation_horizon: m,
        tail_error_bound: (bound_m / lambda) * (-lambda * (m - output_horizon)).exp(),
        std_error: sol.std_error,
        degree_reductions: sol.degree_reductions,
        path_count: cfg.path_count,
    })
}

/// Checks `|Y| <= M/lambda + tail` and the discounted `Z` energy bound.
///
/// `energy_slack` is the relative numerical allowance on the energy bound.
pub fn y_bound_check(path: &BsdePath, problem: &ControlProblem, energy_slack: f64) -> ConditionReport {
    let mut r = ConditionReport::new("bsde_bounds");
    let c = problem.constants;
    if !(path.lambda > 0.0) {
        return r.not_applicable("bounds need lambda > 0");
    }
    let ml = c.bound_m / path.lambda;
    let observed = path.y_values.iter().fold(path.y_sup, |a, v| a.max(v.abs()));
    r.check("|Y| <= M/lambda + tail", observed, ml + path.tail_error_bound);
    let energy_bound = 2.0 * ml * ml * (2.0 + c.lip_kz * c.lip_kz / path.lambda);
    r.check("Z energy", path.z_energy, energy_bound * (1.0 + energy_slack));
    r.metric("y0", path.y_values[0]);
    r.metric("tail_error_bound", path.tail_error_bound);
    r
}

/// Value of a g-expectation `eps^g[eta] = Y_0` and its Monte Carlo error.
#[derive(Debug, Clone, Serialize)]
pub struct GExpectationResult {
    pub value: f64,
    pub std_error: f64,
    pub horizon: f64,
    pub z0: Vec<f64>,
    /// Plain sample mean of `eta`.
    pub sample_mean: f64,
    pub path_count: usize,
    pub dt: f64,
    pub degree_used: usize,
    pub degree_reductions: usize,
}

/// Terminal variable `eta` as a function of `(X_t, W_t)`.
pub trait Terminal: Sync {
    fn eval(&self, x: &[f64], w: &[f64]) -> f64;
}

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> Terminal for F {
    fn eval(&self, x: &[f64], w: &[f64]) -> f64 {
        self(x, w)
    }
}

/// Solves `Y_s = eta + int_s^t g(Z) dr - int_s^t Z dW` along the controlled state.
///
/// `horizon = 0` returns `eta(x0, 0)` with zero error.
pub fn g_expectation(
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    terminal: &dyn Terminal,
    problem: &ControlProblem,
    x0: &[f64],
    policy: &dyn Policy,
    horizon: f64,
    cfg: &BsdeConfig,
) -> Result<GExpectationResult> {
    let driver = |_: &[f64], z: &[f64], _: usize| g(z);
    semigroup(&driver, 0.0, terminal, problem, x0, policy, horizon, cfg)
}

/// Backward semigroup `G_{0,t}[eta]` for a general driver and discount.
#[allow(clippy::too_many_arguments)]
pub fn semigroup(
    driver: &dyn Driver,
    lambda: f64,
    terminal: &dyn Terminal,
    problem: &ControlProblem,
    x0: &[f64],
    policy: &dyn Policy,
    horizon: f64,
    cfg: &BsdeConfig,
) -> Result<GExpectationResult> {
    check_lambda(lambda)?;
    if horizon == 0.0 {
        let zero = vec![0.0; problem.noise_dim()];
        let v = terminal.eval(x0, &zero);
        return Ok(GExpectationResult {
            value: v,
            std_error: 0.0,
            horizon,
            z0: zero,
            sample_mean: v,
            path_count: cfg.path_count,
            dt: cfg.dt,
            degree_used: 0,
            degree_reductions: 0,
        });
    }
    let grid = uniform_grid(horizon, cfg.dt)?;
    let cloud = PathCloud::generate(problem, x0, policy, &grid, cfg.path_count, cfg.seed)?;
    let (p, d, steps) = (cloud.paths, cloud.noise_dim, cloud.steps());
    let mut w = vec![0.0; p * d];
    for k in 0..steps {
        for (wi, dw) in w.iter_mut().zip(cloud.increments_at(k)) {
            *wi += dw;
        }
    }
    let eta: Vec<f64> = (0..p).map(|q| terminal.eval(cloud.state(steps, q), &w[q * d..(q + 1) * d])).collect();
    let sol = solve_backward(&cloud, driver, lambda, &eta, cfg.degree, cfg.features);
    Ok(GExpectationResult {
        value: sol.y0,
        std_error: sol.std_error,
        horizon,
        z0: sol.z0,
        sample_mean: eta.iter().sum::<f64>() / p as f64,
        path_count: p,
        dt: grid[1] - grid[0],
        degree_used: sol.degree_used,
        degree_reductions: sol.degree_reductions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_problem;
    use crate::sde::ConstantPolicy;

    fn cfg(paths: usize, dt: f64) -> BsdeConfig {
        BsdeConfig { dt, path_count: paths, seed: 1, ..Default::default() }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 4).len(), 5);
        assert_eq!(monomials(2, 4).len(), 15);
        assert_eq!(monomials(3, 2).len(), 10);
    }

    #[test]
    fn regression_recovers_polynomial() {
        let p = 500;
        let feats: Vec<f64> = (0..p).map(|i| -1.0 + 2.0 * i as f64 / (p - 1) as f64).collect();
        let resp: Vec<f64> = feats.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x.powi(3)).collect();
        let (d, red) = Design::build(&feats, 1, p, 4);
        assert_eq!(red, 0);
        let coef = d.project(&feats, 1, &resp);
        let mut out = vec![0.0; p];
        d.predict(&feats, 1, &coef, &mut out);
        for (o, r) in out.iter().zip(&resp) {
            assert!((o - r).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_deficiency_lowers_degree() {
        // Two distinct feature values support only an affine fit.
        let feats: Vec<f64> = (0..400).map(|i| (i % 2) as f64).collect();
        let (d, red) = Design::build(&feats, 1, 400, 4);
        assert!(red > 0);
        assert!(d.degree <= 1);
    }

    #[test]
    fn constant_cost_finite_horizon_closed_form() {
        let p = builtin_problem("constant_cost").unwrap();
        let dt = 1e-3;
        let path = solve_finite_horizon(&p, &[0.0], &ConstantPolicy(0), 0.5, 40.0, &cfg(1, dt)).unwrap();
        let exact = (1.0 - (-20.0f64).exp()) / 0.5;
        assert!((path.y_values[0] - exact).abs() < 2.0 * dt, "{}", path.y_values[0]);
        assert!(path.z_values.iter().all(|z| z[0] == 0.0));
    }

    #[test]
    fn zero_cost_gives_zero_solution() {
        let p = builtin_problem("example_2_3").unwrap();
        let path = solve_finite_horizon(&p, &[0.5], &ConstantPolicy(1), 1.0, 2.0, &cfg(200, 0.01)).unwrap();
        assert!(path.y_values.iter().all(|y| *y == 0.0));
        assert!(path.z_values.iter().all(|z| z[0] == 0.0));
    }

    #[test]
    fn truncation_horizon_formula() {
        let m = truncation_horizon(1.0, 0.5, 1.0, 1e-6).unwrap();
        assert!((m - (1.0 + 2.0 * (2e6f64).ln())).abs() < 1e-12);
        assert!((m - 30.0).abs() < 0.05);
        assert!(matches!(truncation_horizon(1.0, 1.0, 1.0, 1e-310), Err(Error::ToleranceTooSmall { .. })));
        assert_eq!(truncation_horizon(0.0, 0.5, 1.0, 1e-6).unwrap(), 1.0);
    }

    #[test]
    fn infinite_horizon_constant_cost() {
        let p = builtin_problem("constant_cost").unwrap();
        let path = solve_infinite_horizon(&p, &[0.0], &ConstantPolicy(0), 0.5, 1.0, 1e-6, &cfg(1, 1e-3)).unwrap();
        assert!((path.tail_error_bound - 1e-6).abs() < 1e-12);
        assert!((path.y_values[0] - 2.0).abs() < 2e-3);
        assert!(path.time_grid.last().unwrap() <= &1.0);
        assert!(y_bound_check(&path, &p, 0.05).passed());
    }

    #[test]
    fn corrupted_path_fails_bound() {
        let p = builtin_problem("constant_cost").unwrap();
        let mut path = solve_infinite_horizon(&p, &[0.0], &ConstantPolicy(0), 0.5, 1.0, 1e-6, &cfg(1, 1e-2)).unwrap();
        path.y_values[0] = 3.0;
        path.tail_error_bound = 0.0;
        let r = y_bound_check(&path, &p, 0.05);
        assert!(r.failed());
        let c = r.check_named("|Y| <= M/lambda + tail").unwrap();
        assert!((c.margin() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn g_expectation_of_constant_is_exact() {
        let p = builtin_problem("example_2_3").unwrap();
        let g = |z: &[f64]| -z[0].abs();
        let r = g_expectation(&g, &|_: &[f64], _: &[f64]| 0.7, &p, &[0.5], &ConstantPolicy(0), 1.0, &cfg(300, 0.05)).unwrap();
        assert_eq!(r.value, 0.7);
        assert_eq!(r.z0, vec![0.0]);
    }

    #[test]
    fn zero_g_is_sample_mean() {
        let p = builtin_problem("example_2_3").unwrap();
        let g = |_: &[f64]| 0.0;
        let eta = |x: &[f64], _: &[f64]| x[0] * x[0];
        let r = g_expectation(&g, &eta, &p, &[0.5], &ConstantPolicy(0), 1.0, &cfg(2000, 0.02)).unwrap();
        assert!((r.value - r.sample_mean).abs() <= 1e-12 * r.sample_mean.abs().max(1.0), "{} vs {}", r.value, r.sample_mean);
    }

    #[test]
    fn brownian_terminal_under_negative_abs_driver() {
        let p = builtin_problem("example_2_3").unwrap();
        let k = 1.0;
        let g = move |z: &[f64]| -k * z[0].abs();
        let c = BsdeConfig { features: Features::StateAndNoise, ..cfg(20_000, 0.02) };
        let r = g_expectation(&g, &|_: &[f64], w: &[f64]| w[0], &p, &[0.0], &ConstantPolicy(0), 1.0, &c).unwrap();
        assert!((r.value + k).abs() <= 3.0 * r.std_error + 1e-3, "{} ± {}", r.value, r.std_error);
        assert!((r.z0[0] - 1.0).abs() < 0.05);
    }
}
