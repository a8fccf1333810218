//! Euler-Maruyama simulation of the controlled diffusion.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ControlProblem;
use crate::rng::{derive_seed, fill_normal, mix64, path_rng};

/// Step-function control: picks a control index from `(t, x)`.
pub trait Policy: Sync {
    fn control(&self, t: f64, x: &[f64]) -> usize;
}

/// Always the same control index.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub usize);

impl Policy for ConstantPolicy {
    fn control(&self, _t: f64, _x: &[f64]) -> usize {
        self.0
    }
}

impl<F: Fn(f64, &[f64]) -> usize + Sync> Policy for F {
    fn control(&self, t: f64, x: &[f64]) -> usize {
        self(t, x)
    }
}

/// Control index redrawn at random every `interval` time units.
#[derive(Debug, Clone, Copy)]
pub struct SwitchingPolicy {
    pub interval: f64,
    pub count: usize,
    pub seed: u64,
}

impl Policy for SwitchingPolicy {
    fn control(&self, t: f64, _x: &[f64]) -> usize {
        let slot = (t / self.interval + 1e-9).floor() as u64;
        (mix64(self.seed ^ mix64(slot)) % self.count as u64) as usize
    }
}

/// Uniform grid on `[0, horizon]` whose step does not exceed `dt`.
pub fn uniform_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon {horizon} and dt {dt} must be positive")));
    }
    let n = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..=n).map(|k| horizon * k as f64 / n as f64).collect())
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must start at 0 and increase strictly".into()));
    }
    Ok(())
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatePath {
    pub time_grid: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub control_trace: Vec<usize>,
    pub seed: u64,
    pub path_index: u64,
}

impl StatePath {
    /// CSV with columns `t, x1..xN, u_index`; the last row has no control.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("u_index".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, (t, x)) in self.time_grid.iter().zip(&self.states).enumerate() {
            write!(out, "{t:.16e}")?;
            for v in x {
                write!(out, ",{v:.16e}")?;
            }
            match self.control_trace.get(k) {
                Some(u) => writeln!(out, ",{u}")?,
                None => writeln!(out, ",")?,
            }
        }
        Ok(())
    }
}

/// Scratch buffers for repeated Euler steps.
pub struct Stepper<'a> {
    problem: &'a ControlProblem,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a ControlProblem) -> Self {
        Stepper { problem, b: vec![0.0; problem.dim()], s: vec![0.0; problem.dim() * problem.noise_dim()] }
    }

    /// `x <- x + b(x,u) dt + sigma(x,u) dw`, optionally projected onto the domain.
    pub fn step(&mut self, x: &mut [f64], u: usize, dt: f64, dw: &[f64], project: bool) {
        let d = self.problem.noise_dim();
        self.problem.drift(x, u, &mut self.b);
        self.problem.diffusion(x, u, &mut self.s);
        for i in 0..x.len() {
            let mut v = x[i] + self.b[i] * dt;
            for j in 0..d {
                v += self.s[i * d + j] * dw[j];
            }
            x[i] = v;
        }
        if project {
            self.problem.domain.project(x);
        }
    }
}

/// Simulates path 0 of stream `seed`, projecting onto the domain after each step.
pub fn simulate(problem: &ControlProblem, x0: &[f64], policy: &dyn Policy, time_grid: &[f64], seed: u64) -> Result<StatePath> {
    simulate_path(problem, x0, policy, time_grid, seed, 0, true)
}

/// Simulates one path of the stream `(seed, path_index)`.
pub fn simulate_path(
    problem: &ControlProblem,
    x0: &[f64],
    policy: &dyn Policy,
    time_grid: &[f64],
    seed: u64,
    path_index: u64,
    project: bool,
) -> Result<StatePath> {
    check_start(problem, x0)?;
    validate_grid(time_grid)?;
    let mut rng = path_rng(seed, path_index);
    let mut stepper = Stepper::new(problem);
    let mut x = x0.to_vec();
    let mut dw = vec![0.0; problem.noise_dim()];
    let mut states = Vec::with_capacity(time_grid.len());
    let mut control_trace = Vec::with_capacity(time_grid.len() - 1);
    states.push(x.clone());
    for w in time_grid.windows(2) {
        let dt = w[1] - w[0];
        let u = policy.control(w[0], &x);
        fill_normal(&mut rng, dt, &mut dw);
        stepper.step(&mut x, u, dt, &dw, project);
        control_trace.push(u);
        states.push(x.clone());
    }
    Ok(StatePath { time_grid: time_grid.to_vec(), states, control_trace, seed, path_index })
}

fn check_start(problem: &ControlProblem, x0: &[f64]) -> Result<()> {
    if x0.len() != problem.dim() {
        return Err(Error::InvalidArgument(format!("start point has {} coordinates, problem has {}", x0.len(), problem.dim())));
    }
    if !problem.domain.contains(x0) {
        return Err(Error::InvalidArgument(format!("start point {x0:?} lies outside the domain")));
    }
    Ok(())
}

/// Many paths stored time-major, so step `k` of all paths is contiguous.
#[derive(Debug, Clone)]
pub struct PathCloud {
    pub time_grid: Vec<f64>,
    pub paths: usize,
    pub dim: usize,
    pub noise_dim: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    controls: Vec<u32>,
}

impl PathCloud {
    /// Simulates `path_count` projected paths; path `p` uses stream `(seed, p)`.
    ///
    /// Output does not depend on the number of worker threads.
    pub fn generate(
        problem: &ControlProblem,
        x0: &[f64],
        policy: &dyn Policy,
        time_grid: &[f64],
        path_count: usize,
        seed: u64,
    ) -> Result<PathCloud> {
        check_start(problem, x0)?;
        validate_grid(time_grid)?;
        if path_count == 0 {
            return Err(Error::InvalidArgument("path_count must be at least 1".into()));
        }
        let (n, d, p) = (problem.dim(), problem.noise_dim(), path_count);
        let steps = time_grid.len() - 1;
        let mut states = vec![0.0; (steps + 1) * p * n];
        let mut increments = vec![0.0; steps * p * d];
        let mut controls = vec![0u32; steps * p];
        for chunk in states[..p * n].chunks_mut(n) {
            chunk.copy_from_slice(x0);
        }
        let mut rngs: Vec<ChaCha8Rng> = (0..p as u64).map(|i| path_rng(seed, i)).collect();
        for k in 0..steps {
            let (t, dt) = (time_grid[k], time_grid[k + 1] - time_grid[k]);
            let (done, rest) = states.split_at_mut((k + 1) * p * n);
            let prev = &done[k * p * n..];
            let next = &mut rest[..p * n];
            let inc = &mut increments[k * p * d..(k + 1) * p * d];
            let ctl = &mut controls[k * p..(k + 1) * p];
            next.par_chunks_mut(n)
                .zip(inc.par_chunks_mut(d))
                .zip(ctl.par_iter_mut())
                .zip(rngs.par_iter_mut())
                .enumerate()
                .for_each_init(
                    || Stepper::new(problem),
                    |stepper, (i, (((x, dw), u), rng))| {
                        x.copy_from_slice(&prev[i * n..(i + 1) * n]);
                        let c = policy.control(t, x);
                        fill_normal(rng, dt, dw);
                        stepper.step(x, c, dt, dw, true);
                        *u = c as u32;
                    },
                );
        }
        Ok(PathCloud { time_grid: time_grid.to_vec(), paths: p, dim: n, noise_dim: d, states, increments, controls })
    }

    pub fn steps(&self) -> usize {
        self.time_grid.len() - 1
    }

    pub fn state(&self, k: usize, path: usize) -> &[f64] {
        let o = (k * self.paths + path) * self.dim;
        &self.states[o..o + self.dim]
    }

    /// All states at step `k`, path-major within the step.
    pub fn states_at(&self, k: usize) -> &[f64] {
        &self.states[k * self.paths * self.dim..(k + 1) * self.paths * self.dim]
    }

    pub fn increment(&self, k: usize, path: usize) -> &[f64] {
        let o = (k * self.paths + path) * self.noise_dim;
        &self.increments[o..o + self.noise_dim]
    }

    pub fn increments_at(&self, k: usize) -> &[f64] {
        &self.increments[k * self.paths * self.noise_dim..(k + 1) * self.paths * self.noise_dim]
    }

    pub fn control(&self, k: usize, path: usize) -> usize {
        self.controls[k * self.paths + path] as usize
    }

    /// Extracts path `p` as a [`StatePath`].
    pub fn path(&self, p: usize, seed: u64) -> StatePath {
        StatePath {
            time_grid: self.time_grid.clone(),
            states: (0..=self.steps()).map(|k| self.state(k, p).to_vec()).collect(),
            control_trace: (0..self.steps()).map(|k| self.control(k, p)).collect(),
            seed,
            path_index: p as u64,
        }
    }
}

/// Worst distance from the domain along unprojected paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceReport {
    pub sample_count: usize,
    pub max_excursion: f64,
    /// Sub-seed and path index of the worst path, when it left the domain.
    pub violating_seed: Option<(u64, u64)>,
}

/// Runs unprojected paths from the centre and from every face midpoint under
/// each constant control and a random switching policy.
pub fn invariance_check(problem: &ControlProblem, path_count: usize, horizon: f64, dt: f64, seed: u64) -> Result<InvarianceReport> {
    if path_count == 0 {
        return Err(Error::InvalidArgument("path_count must be at least 1".into()));
    }
    let grid = uniform_grid(horizon, dt)?;
    let (lo, hi) = problem.domain.bounds();
    let n = problem.dim();
    let mut center: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
    problem.domain.project(&mut center);
    let mut starts = vec![center.clone()];
    for i in 0..n {
        for edge in [lo[i], hi[i]] {
            let mut s = center.clone();
            s[i] = edge;
            problem.domain.project(&mut s);
            starts.push(s);
        }
    }
    let mut policies: Vec<Box<dyn Policy>> = (0..problem.control_count()).map(|u| Box::new(ConstantPolicy(u)) as Box<dyn Policy>).collect();
    policies.push(Box::new(SwitchingPolicy { interval: 10.0 * dt, count: problem.control_count(), seed }));

    let mut jobs = Vec::new();
    for (si, s) in starts.iter().enumerate() {
        for (pi, pol) in policies.iter().enumerate() {
            let sub = derive_seed(seed, (si * policies.len() + pi) as u64);
            for path in 0..path_count as u64 {
                jobs.push((s, pol, sub, path));
            }
        }
    }
    let results: Vec<Result<(f64, u64, u64)>> = jobs
        .par_iter()
        .map(|&(s, pol, sub, path)| {
            let sp = simulate_path(problem, s, pol.as_ref(), &grid, sub, path, false)?;
            let worst = sp.states.iter().map(|x| problem.domain.excursion(x)).fold(0.0, f64::max);
            Ok((worst, sub, path))
        })
        .collect();
    let mut report = InvarianceReport { sample_count: jobs.len(), max_excursion: 0.0, violating_seed: None };
    for r in results {
        let (e, sub, path) = r?;
        if e > report.max_excursion {
            report.max_excursion = e;
            report.violating_seed = Some((sub, path));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_problem;

    #[test]
    fn decay_follows_exponential_flow() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let dt = 1e-3;
        let grid = uniform_grid(2.0, dt).unwrap();
        let path = simulate(&p, &[0.8], &ConstantPolicy(1), &grid, 1).unwrap();
        for (t, x) in grid.iter().zip(&path.states) {
            assert!((x[0] - 0.8 * (-t).exp()).abs() <= dt * 0.8, "t={t}");
        }
    }

    #[test]
    fn fixed_point_stays_put() {
        let p = builtin_problem("example_2_3").unwrap();
        let grid = uniform_grid(1.0, 0.01).unwrap();
        let path = simulate(&p, &[0.0], &ConstantPolicy(0), &grid, 5).unwrap();
        assert!(path.states.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let grid = uniform_grid(1.0, 0.1).unwrap();
        assert!(simulate(&p, &[1.5], &ConstantPolicy(0), &grid, 0).is_err());
        assert!(simulate(&p, &[0.5], &ConstantPolicy(0), &[0.0, 0.5, 0.4], 0).is_err());
        assert!(invariance_check(&p, 0, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn cloud_matches_single_paths() {
        let p = builtin_problem("example_2_3").unwrap();
        let grid = uniform_grid(0.5, 0.05).unwrap();
        let cloud = PathCloud::generate(&p, &[0.5], &ConstantPolicy(1), &grid, 16, 9).unwrap();
        for i in [0usize, 7, 15] {
            let single = simulate_path(&p, &[0.5], &ConstantPolicy(1), &grid, 9, i as u64, true).unwrap();
            assert_eq!(cloud.path(i, 9), single);
        }
    }

    #[test]
    fn inward_drift_has_no_excursion() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let r = invariance_check(&p, 4, 2.0, 0.01, 3).unwrap();
        assert_eq!(r.max_excursion, 0.0);
        assert!(r.violating_seed.is_none());
    }

    #[test]
    fn boundary_noise_is_reported() {
        let p = builtin_problem("example_2_3").unwrap();
        let r = invariance_check(&p, 20, 0.5, 0.01, 3).unwrap();
        assert!(r.max_excursion > 0.0);
        assert!(r.violating_seed.is_some());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let grid = uniform_grid(0.2, 0.1).unwrap();
        let path = simulate(&p, &[0.5], &ConstantPolicy(0), &grid, 0).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1,u_index");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
    }
}
