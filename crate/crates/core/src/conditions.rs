//! Nonexpansivity of the coefficients, a measurable selector of shadowing
//! controls, and a Monte Carlo probe of the stochastic nonexpansivity condition.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{solve_backward_full, CostDriver, Features};
use crate::error::{Error, Result};
use crate::model::{ball_point, dist, ControlProblem};
use crate::report::ConditionReport;
use crate::rng::{derive_seed, fill_normal, path_rng, Halton};
use crate::sde::{uniform_grid, ConstantPolicy, PathCloud, Stepper};

/// Absolute slack on the pointwise inequalities, for rounding only.
const ROUNDING: f64 = 1e-12;

/// `<x - x', b(x,u) - b(x',v)> + |s - s'|^2 / 2 + K_z |s - s'| |x - x'|`
/// with `s = sigma(x,u)`, `s' = sigma(x',v)` and the Frobenius norm.
pub fn nonexpansivity_g(problem: &ControlProblem, x: &[f64], x_prime: &[f64], u: usize, v: usize) -> f64 {
    let (n, d) = (problem.dim(), problem.noise_dim());
    let (mut b, mut bp) = (vec![0.0; n], vec![0.0; n]);
    let (mut s, mut sp) = (vec![0.0; n * d], vec![0.0; n * d]);
    problem.drift(x, u, &mut b);
    problem.drift(x_prime, v, &mut bp);
    problem.diffusion(x, u, &mut s);
    problem.diffusion(x_prime, v, &mut sp);
    let inner: f64 = (0..n).map(|i| (x[i] - x_prime[i]) * (b[i] - bp[i])).sum();
    let ds = dist(&s, &sp);
    inner + 0.5 * ds * ds + problem.constants.lip_kz * ds * dist(x, x_prime)
}

/// `sup_z |psi(x,z,u) - psi(x',z,v)| - c0 |x - x'|` over `z_set`.
///
/// For split costs the `g(z)` terms cancel and `z_set` is ignored.
pub fn psi_gap(problem: &ControlProblem, x: &[f64], x_prime: &[f64], u: usize, v: usize, z_set: &[Vec<f64>]) -> f64 {
    let c0 = problem.constants.nonexp_c0 * dist(x, x_prime);
    if let (Some(a), Some(b)) = (problem.split_psi1(x, u), problem.split_psi1(x_prime, v)) {
        return (a - b).abs() - c0;
    }
    z_set
        .iter()
        .map(|z| (problem.cost(x, z, u) - problem.cost(x_prime, z, v)).abs())
        .fold(f64::NEG_INFINITY, f64::max)
        - c0
}

/// `z = 0` followed by `count` quasi-random points in the ball of radius
/// `10 K_z`, or radius 1 when `K_z = 0`.
pub fn z_probe_set(problem: &ControlProblem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = problem.noise_dim();
    let kz = problem.constants.lip_kz;
    let radius = if kz > 0.0 { 10.0 * kz } else { 1.0 };
    let h = Halton::new(d, derive_seed(seed, 0x2B));
    let mut unit = vec![0.0; d];
    let mut set = vec![vec![0.0; d]];
    for k in 0..count {
        h.point(k as u64, &mut unit);
        let mut z = vec![0.0; d];
        ball_point(&unit, radius, &mut z);
        set.push(z);
    }
    set
}

/// One sampled triple `(x, x', u)` and the control `v` chosen for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSample {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub u: usize,
    /// Selected control (`u` first), or the least-violating one when none is admissible.
    pub v: usize,
    pub g: f64,
    pub psi_gap: f64,
    pub admissible: bool,
}

/// Picks `v = u` if admissible, else the lowest-index `v` with `g <= slack` and `psi_gap <= slack`.
/// Returns `Err(best)` with the least-violating control when none qualifies.
fn select(problem: &ControlProblem, x: &[f64], xp: &[f64], u: usize, z_set: &[Vec<f64>], slack: f64) -> std::result::Result<(usize, f64, f64), (usize, f64, f64)> {
    let mut best = (0, f64::INFINITY, f64::INFINITY);
    // Synchronous coupling first.
    let order = std::iter::once(u).chain((0..problem.control_count()).filter(|v| *v != u));
    for v in order {
        let g = nonexpansivity_g(problem, x, xp, u, v);
        let p = psi_gap(problem, x, xp, u, v, z_set);
        if g <= slack && p <= slack {
            return Ok((v, g, p));
        }
        if g.max(p) < best.1.max(best.2) {
            best = (v, g, p);
        }
    }
    Err(best)
}

/// Samples `pair_count` pairs in the domain (plus every control `u`) and
/// searches the control list for a shadowing `v`.
pub fn nonexpansivity_samples(problem: &ControlProblem, pair_count: usize, z_samples: usize, seed: u64) -> Vec<PairSample> {
    let n = problem.dim();
    let z_set = z_probe_set(problem, z_samples, seed);
    let h = Halton::new(2 * n, seed);
    let mut unit = vec![0.0; 2 * n];
    let mut out = Vec::with_capacity(pair_count * problem.control_count());
    for k in 0..pair_count.max(1) {
        h.point(k as u64, &mut unit);
        let (mut x, mut xp) = (vec![0.0; n], vec![0.0; n]);
        problem.domain.from_unit(&unit[..n], &mut x);
        problem.domain.from_unit(&unit[n..], &mut xp);
        for u in 0..problem.control_count() {
            let (admissible, (v, g, p)) = match select(problem, &x, &xp, u, &z_set, ROUNDING) {
                Ok(s) => (true, s),
                Err(s) => (false, s),
            };
            out.push(PairSample { x: x.clone(), x_prime: xp.clone(), u, v, g, psi_gap: p, admissible });
        }
    }
    out
}

/// Passes iff every sampled `(x, x', u)` admits some `v` satisfying both parts.
pub fn nonexpansivity_check(problem: &ControlProblem, pair_count: usize, z_samples: usize, seed: u64) -> ConditionReport {
    report_from_samples(problem, &nonexpansivity_samples(problem, pair_count, z_samples, seed))
}

pub fn report_from_samples(problem: &ControlProblem, samples: &[PairSample]) -> ConditionReport {
    let mut r = ConditionReport::new("nonexpansivity");
    let failures: Vec<&PairSample> = samples.iter().filter(|s| !s.admissible).collect();
    r.check("triples without an admissible control", failures.len() as f64, 0.0);
    let worst = samples.iter().map(|s| s.g.max(s.psi_gap)).fold(f64::NEG_INFINITY, f64::max);
    r.metric("worst_selected_violation", worst);
    r.metric("max_g_selected", samples.iter().map(|s| s.g).fold(f64::NEG_INFINITY, f64::max));
    r.metric("max_psi_gap_selected", samples.iter().map(|s| s.psi_gap).fold(f64::NEG_INFINITY, f64::max));
    r.metric("triples", samples.len() as f64);
    if let Some(w) = failures.iter().max_by(|a, b| a.g.max(a.psi_gap).total_cmp(&b.g.max(b.psi_gap))) {
        r.witness(
            format!("x={:?}, x'={:?}, u={}: best v={} has g={:.4e}, psi gap={:.4e}", w.x, w.x_prime, w.u, w.v, w.g, w.psi_gap),
            [w.x.clone(), w.x_prime.clone(), vec![w.u as f64]].concat(),
        );
    }
    if problem.split_form().is_none() && problem.cost_depends_on_z() {
        r.note("the cost difference is checked on a finite z sample, not for every z");
    }
    r
}

/// Lookup table `(x, x', u) -> v` on a uniform lattice over the bounding box of the domain, squared.
#[derive(Debug, Clone, Serialize)]
pub struct FeedbackSelector {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub resolution: usize,
    pub slack: f64,
    pub control_count: usize,
    choice: Vec<u32>,
    /// Largest `g` and cost gap over the stored selections.
    pub worst_g: f64,
    pub worst_psi_gap: f64,
    /// Lattice points outside the domain with no admissible control; they keep the least-violating one.
    pub fallback_count: usize,
}

const MAX_SELECTOR_ENTRIES: usize = 50_000_000;

impl FeedbackSelector {
    pub fn lattice_len(&self) -> usize {
        self.choice.len() / self.control_count
    }

    fn coordinate(&self, axis: usize, i: usize) -> f64 {
        let n = self.lower.len();
        let a = axis % n;
        self.lower[a] + (self.upper[a] - self.lower[a]) * i as f64 / (self.resolution - 1) as f64
    }

    /// `(x, x')` at lattice index `idx`.
    pub fn lattice_point(&self, mut idx: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.lower.len();
        let mut pt = vec![0.0; 2 * n];
        for (axis, c) in pt.iter_mut().enumerate() {
            *c = self.coordinate(axis, idx % self.resolution);
            idx /= self.resolution;
        }
        let xp = pt.split_off(n);
        (pt, xp)
    }

    fn index_of(&self, x: &[f64], x_prime: &[f64]) -> usize {
        let n = self.lower.len();
        let r = self.resolution;
        let mut idx = 0;
        for axis in (0..2 * n).rev() {
            let a = axis % n;
            let v = if axis < n { x[a] } else { x_prime[a] };
            let s = (v - self.lower[a]) / (self.upper[a] - self.lower[a]) * (r - 1) as f64;
            let i = s.round().clamp(0.0, (r - 1) as f64) as usize;
            idx = idx * r + i;
        }
        idx
    }

    /// Control stored at the lattice point nearest to `(x, x')`.
    pub fn select(&self, x: &[f64], x_prime: &[f64], u: usize) -> usize {
        self.choice[self.index_of(x, x_prime) * self.control_count + u] as usize
    }
}

/// Stores at every lattice point a control `v` with `g <= slack` and cost
/// gap `<= slack`: `v = u` when admissible, else the lowest admissible index.
pub fn feedback_selector(problem: &ControlProblem, resolution: usize, slack: f64) -> Result<FeedbackSelector> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("selector resolution must be at least 2".into()));
    }
    let n = problem.dim();
    let uc = problem.control_count();
    let len = resolution.checked_pow(2 * n as u32).and_then(|l| l.checked_mul(uc));
    let len = match len {
        Some(l) if l <= MAX_SELECTOR_ENTRIES => l,
        _ => return Err(Error::InvalidArgument(format!("selector lattice {resolution}^{} x {uc} is too large", 2 * n))),
    };
    let (lower, upper) = problem.domain.bounds();
    let mut sel = FeedbackSelector {
        lower,
        upper,
        resolution,
        slack,
        control_count: uc,
        choice: Vec::new(),
        worst_g: f64::NEG_INFINITY,
        worst_psi_gap: f64::NEG_INFINITY,
        fallback_count: 0,
    };
    let z_set = z_probe_set(problem, 32, 0);
    let cells: Vec<std::result::Result<(usize, f64, f64, bool), Error>> = (0..len)
        .into_par_iter()
        .map(|e| {
            let (idx, u) = (e / uc, e % uc);
            let (x, xp) = sel.lattice_point(idx);
            match select(problem, &x, &xp, u, &z_set, slack) {
                Ok((v, g, p)) => Ok((v, g, p, false)),
                Err((v, g, p)) if !(problem.domain.contains(&x) && problem.domain.contains(&xp)) => Ok((v, g, p, true)),
                Err(_) => Err(Error::EmptySelection { x, x_prime: xp, control: u }),
            }
        })
        .collect();
    let mut choice = Vec::with_capacity(len);
    for c in cells {
        let (v, g, p, fallback) = c?;
        choice.push(v as u32);
        if fallback {
            sel.fallback_count += 1;
        } else {
            sel.worst_g = sel.worst_g.max(g);
            sel.worst_psi_gap = sel.worst_psi_gap.max(p);
        }
    }
    sel.choice = choice;
    Ok(sel)
}

/// Piecewise-constant `gamma` with every piece in the ball of radius `K_z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GirsanovWeight {
    pub interval: f64,
    pub pieces: Vec<Vec<f64>>,
}

impl GirsanovWeight {
    /// Pieces uniform in the ball of `radius` in `R^d`, covering `[0, horizon]`.
    pub fn sample<R: Rng>(rng: &mut R, radius: f64, noise_dim: usize, horizon: f64, interval: f64) -> Self {
        let count = (horizon / interval).ceil().max(1.0) as usize + 1;
        let pieces = (0..count)
            .map(|_| {
                let mut g = vec![0.0; noise_dim];
                fill_normal(rng, 1.0, &mut g);
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let r = radius * rng.gen::<f64>().powf(1.0 / noise_dim as f64);
                if norm > 0.0 {
                    g.iter_mut().for_each(|v| *v *= r / norm);
                }
                g
            })
            .collect();
        GirsanovWeight { interval, pieces }
    }

    pub fn gamma(&self, t: f64) -> &[f64] {
        let i = ((t / self.interval + 1e-9).floor() as usize).min(self.pieces.len() - 1);
        &self.pieces[i]
    }

    /// `<gamma_t, dw> - |gamma_t|^2 dt / 2`.
    pub fn log_increment(&self, t: f64, dt: f64, dw: &[f64]) -> f64 {
        let g = self.gamma(t);
        g.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>() - 0.5 * dt * g.iter().map(|a| a * a).sum::<f64>()
    }

    /// `int_0^t |gamma|^2 ds`; `Var L_t = exp(this) - 1`.
    pub fn quadratic_variation(&self, t: f64) -> f64 {
        let mut q = 0.0;
        let mut s = 0.0;
        for g in &self.pieces {
            if s >= t {
                break;
            }
            let len = self.interval.min(t - s);
            q += len * g.iter().map(|a| a * a).sum::<f64>();
            s += self.interval;
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    /// Constant control index driving `X^{x,u}`.
    pub control: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub gamma_count: usize,
    pub path_count: usize,
    pub dt: f64,
    /// Defaults to `10 dt`.
    pub resync_dt: Option<f64>,
    /// Defaults to the time after which the discounted tail is below `epsilon / 4`.
    pub horizon: Option<f64>,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(x: Vec<f64>, x_prime: Vec<f64>) -> Self {
        ProbeConfig {
            x,
            x_prime,
            control: 0,
            lambda: 0.5,
            epsilon: 0.05,
            gamma_count: 8,
            path_count: 1000,
            dt: 0.01,
            resync_dt: None,
            horizon: None,
            seed: 0,
        }
    }
}

/// Per-chunk sums, reduced in chunk order.
#[derive(Clone)]
struct Sums {
    /// Per gamma and probe time: `sum L |dX|^2`, `sum (L |dX|^2)^2`, `sum L`.
    dx: Vec<[f64; 3]>,
    /// Per gamma: `sum I`, `sum I^2`.
    cost: Vec<[f64; 2]>,
}

impl Sums {
    fn zero(gammas: usize, probes: usize) -> Self {
        Sums { dx: vec![[0.0; 3]; gammas * probes], cost: vec![[0.0; 2]; gammas] }
    }

    fn add(mut self, o: &Sums) -> Self {
        for (a, b) in self.dx.iter_mut().zip(&o.dx) {
            (0..3).for_each(|i| a[i] += b[i]);
        }
        for (a, b) in self.cost.iter_mut().zip(&o.cost) {
            (0..2).for_each(|i| a[i] += b[i]);
        }
        self
    }
}

const PROBE_CHUNK: usize = 64;

/// Monte Carlo check of both parts of the stochastic nonexpansivity condition
/// for one starting pair.
///
/// `v` is rebuilt every `resync_dt` by applying the selector to the current
/// pair of states; both processes share the Brownian increments.
pub fn stochastic_nonexpansivity_probe(problem: &ControlProblem, selector: &FeedbackSelector, cfg: &ProbeConfig) -> Result<ConditionReport> {
    let n = problem.dim();
    let d = problem.noise_dim();
    let c = problem.constants;
    if !(cfg.lambda > 0.0 && cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("lambda and epsilon must be positive".into()));
    }
    if cfg.x.len() != n || cfg.x_prime.len() != n {
        return Err(Error::InvalidArgument(format!("start points must have dimension {n}")));
    }
    if cfg.control >= problem.control_count() || cfg.gamma_count == 0 {
        return Err(Error::InvalidArgument("control out of range or no gamma draws".into()));
    }
    let diam = problem.domain.diameter();
    let horizon = cfg.horizon.unwrap_or_else(|| ((4.0 * c.nonexp_c0 * diam / cfg.epsilon).ln() / cfg.lambda).max(1.0));
    let grid = uniform_grid(horizon, cfg.dt)?;
    let steps = grid.len() - 1;
    let resync = ((cfg.resync_dt.unwrap_or(10.0 * cfg.dt) / cfg.dt).round() as usize).max(1);
    let probes: Vec<usize> = (0..=steps).step_by(resync).collect();

    let u = cfg.control;
    let cloud = PathCloud::generate(problem, &cfg.x, &ConstantPolicy(u), &grid, cfg.path_count, cfg.seed)?;
    let z_all = if problem.cost_depends_on_z() {
        let zero = vec![0.0; cloud.paths];
        Some(solve_backward_full(&cloud, &CostDriver(problem), cfg.lambda, &zero, 4, Features::State).1)
    } else {
        None
    };
    let zeros = vec![0.0; d];
    let gammas: Vec<GirsanovWeight> = (0..cfg.gamma_count)
        .map(|g| GirsanovWeight::sample(&mut path_rng(derive_seed(cfg.seed, 0x6A33), g as u64), c.lip_kz, d, horizon, resync as f64 * cfg.dt))
        .collect();
    let gc = gammas.len();
    let np = probes.len();

    let chunks: Vec<Sums> = (0..cloud.paths.div_ceil(PROBE_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut sums = Sums::zero(gc, np);
            let mut stepper = Stepper::new(problem);
            let mut xp = vec![0.0; n];
            let mut log_l = vec![0.0f64; gc];
            let mut integral = vec![0.0f64; gc];
            for p in ci * PROBE_CHUNK..((ci + 1) * PROBE_CHUNK).min(cloud.paths) {
                xp.copy_from_slice(&cfg.x_prime);
                log_l.iter_mut().for_each(|v| *v = 0.0);
                integral.iter_mut().for_each(|v| *v = 0.0);
                let mut v = 0;
                let mut probe = 0;
                for k in 0..=steps {
                    let x = cloud.state(k, p);
                    if k % resync == 0 {
                        let dx2 = dist(x, &xp).powi(2);
                        for (g, ll) in log_l.iter().enumerate() {
                            let l = ll.exp();
                            let s = &mut sums.dx[g * np + probe];
                            s[0] += l * dx2;
                            s[1] += (l * dx2).powi(2);
                            s[2] += l;
                        }
                        probe += 1;
                        if k < steps {
                            v = selector.select(x, &xp, u);
                        }
                    }
                    if k == steps {
                        break;
                    }
                    let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
                    let z = match &z_all {
                        Some(all) => &all[(k * cloud.paths + p) * d..(k * cloud.paths + p + 1) * d],
                        None => &zeros[..],
                    };
                    let gap = (problem.cost(x, z, u) - problem.cost(&xp, z, v)).abs();
                    let w = cfg.lambda * (-cfg.lambda * t).exp() * gap * dt;
                    let dw = cloud.increment(k, p);
                    for (g, gamma) in gammas.iter().enumerate() {
                        integral[g] += log_l[g].exp() * w;
                        log_l[g] += gamma.log_increment(t, dt, dw);
                    }
                    stepper.step(&mut xp, v, dt, dw, true);
                }
                for (g, i) in integral.iter().enumerate() {
                    sums.cost[g][0] += i;
                    sums.cost[g][1] += i * i;
                }
            }
            sums
        })
        .collect();
    let total = chunks.iter().fold(Sums::zero(gc, np), |a, b| a.add(b));

    let pc = cloud.paths as f64;
    let se = |s1: f64, s2: f64| {
        let m = s1 / pc;
        if cloud.paths > 1 { ((s2 / pc - m * m).max(0.0) / (pc - 1.0)).sqrt() } else { 0.0 }
    };
    let dx0 = dist(&cfg.x, &cfg.x_prime);
    let mut r = ConditionReport::new("stochastic_nonexpansivity");
    let (mut worst_i, mut raw_i, mut wi_at) = (f64::NEG_INFINITY, 0.0, (0, 0.0));
    let mut worst_z: f64 = 0.0;
    for g in 0..gc {
        for (j, &k) in probes.iter().enumerate() {
            let s = total.dx[g * np + j];
            let m = s[0] / pc;
            let lowered = (m - 3.0 * se(s[0], s[1])).max(0.0).sqrt();
            if lowered > worst_i {
                (worst_i, raw_i, wi_at) = (lowered, m.sqrt(), (g, grid[k]));
            }
            let sd = ((gammas[g].quadratic_variation(grid[k])).exp_m1() / pc).sqrt();
            if sd > 0.0 {
                worst_z = worst_z.max((s[2] / pc - 1.0).abs() / sd);
            } else {
                worst_z = worst_z.max(((s[2] / pc - 1.0).abs() > 1e-12) as u8 as f64 * f64::INFINITY);
            }
        }
    }
    let (mut worst_ii, mut raw_ii, mut wii) = (f64::NEG_INFINITY, 0.0, 0);
    for (g, s) in total.cost.iter().enumerate() {
        let m = s[0] / pc;
        let lowered = m - 3.0 * se(s[0], s[1]);
        if lowered > worst_ii {
            (worst_ii, raw_ii, wii) = (lowered, m, g);
        }
    }
    // Tail beyond the horizon: c0 times the part (i) level, discounted.
    let tail = c.nonexp_c0 * raw_i * (-cfg.lambda * horizon).exp();
    let ok_i = r.check("(E[L |X - X'|^2])^(1/2) minus 3 std errors", worst_i, dx0 + cfg.epsilon);
    let ok_ii = r.check("discounted cost gap minus 3 std errors, plus tail", worst_ii + tail, c.nonexp_c0 * dx0 + cfg.epsilon);
    r.check("martingale sanity: max |mean L - 1| / sd", worst_z, 4.0);
    if !ok_i {
        r.witness(format!("gamma draw {} at t = {:.3}: estimate {:.4e}", wi_at.0, wi_at.1, raw_i), vec![wi_at.1]);
    } else if !ok_ii {
        r.witness(format!("gamma draw {wii}: discounted gap {raw_ii:.4e}"), vec![wii as f64]);
    }
    r.metric("part_i_estimate", raw_i);
    r.metric("part_ii_estimate", raw_ii);
    r.metric("tail_bound", tail);
    r.metric("horizon", horizon);
    r.metric("resync_dt", resync as f64 * cfg.dt);
    r.note("v is resynchronized on a fixed interval; gamma draws are deterministic in time");
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_problem;

    #[test]
    fn example_2_3_g_closed_form() {
        let p = builtin_problem("example_2_3").unwrap();
        let samples = nonexpansivity_samples(&p, 200, 4, 3);
        for s in &samples {
            let want = -1.5 * (s.x[0] - s.x_prime[0]).powi(2);
            assert!((s.g - want).abs() < 1e-12);
            assert_eq!(s.v, s.u);
        }
        assert!(nonexpansivity_check(&p, 200, 4, 3).passed());
    }

    #[test]
    fn decay_with_v_equal_u() {
        let p = builtin_problem("decay_quadratic").unwrap();
        for (x, xp) in [(0.5, 0.3), (-0.9, 0.7), (1.0, -1.0)] {
            for u in 0..2 {
                let uval = p.control(u)[0];
                let g = nonexpansivity_g(&p, &[x], &[xp], u, u);
                assert!((g + uval * (x - xp) * (x - xp)).abs() < 1e-14);
                assert!(psi_gap(&p, &[x], &[xp], u, u, &[]) <= 1e-14);
            }
        }
        assert!(nonexpansivity_check(&p, 300, 0, 1).passed());
    }

    #[test]
    fn expanding_fails_with_witness() {
        let p = builtin_problem("expanding").unwrap();
        let r = nonexpansivity_check(&p, 100, 0, 0);
        assert!(r.failed());
        let w = r.witness.unwrap();
        let (x, xp) = (w.point[0], w.point[1]);
        assert!((nonexpansivity_g(&p, &[x], &[xp], 0, 0) - (x - xp).powi(2)).abs() < 1e-14);
        assert!(matches!(feedback_selector(&p, 5, 0.0), Err(Error::EmptySelection { .. })));
    }

    #[test]
    fn selector_entries_are_admissible() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let sel = feedback_selector(&p, 21, 1e-12).unwrap();
        assert!(sel.worst_g <= 1e-12 && sel.worst_psi_gap <= 1e-12);
        for idx in 0..sel.lattice_len() {
            let (x, xp) = sel.lattice_point(idx);
            for u in 0..2 {
                let v = sel.select(&x, &xp, u);
                assert!(nonexpansivity_g(&p, &x, &xp, u, v) <= 1e-12);
                if x == xp {
                    assert_eq!(v, u);
                }
            }
        }
        let ex = builtin_problem("example_2_3").unwrap();
        let sel = feedback_selector(&ex, 7, 1e-12).unwrap();
        assert!((0..sel.lattice_len()).all(|i| {
            let (x, xp) = sel.lattice_point(i);
            sel.select(&x, &xp, 1) == 1
        }));
    }

    #[test]
    fn girsanov_pieces_respect_radius() {
        let mut rng = path_rng(1, 2);
        let w = GirsanovWeight::sample(&mut rng, 0.7, 3, 2.0, 0.1);
        assert!(w.pieces.iter().all(|g| g.iter().map(|a| a * a).sum::<f64>().sqrt() <= 0.7 + 1e-15));
        assert_eq!(w.gamma(0.0), &w.pieces[0][..]);
        assert_eq!(w.gamma(0.15), &w.pieces[1][..]);
        let q: f64 = w.pieces[..10].iter().map(|g| 0.1 * g.iter().map(|a| a * a).sum::<f64>()).sum();
        assert!((w.quadratic_variation(1.0) - q).abs() < 1e-12);
    }

    #[test]
    fn probe_decay_deterministic_flow() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let sel = feedback_selector(&p, 41, 1e-12).unwrap();
        let mut cfg = ProbeConfig::new(vec![0.5], vec![0.3]);
        cfg.control = 1;
        cfg.path_count = 16;
        let r = stochastic_nonexpansivity_probe(&p, &sel, &cfg).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert!(r.metrics["part_i_estimate"] <= 0.2 + 1e-12);
    }

    #[test]
    fn probe_expanding_fails() {
        let p = builtin_problem("expanding").unwrap();
        // A single control, so the selector falls back everywhere; build it by hand.
        let sel = FeedbackSelector {
            lower: vec![-1.0],
            upper: vec![1.0],
            resolution: 2,
            slack: 0.0,
            control_count: 1,
            choice: vec![0; 4],
            worst_g: 0.0,
            worst_psi_gap: 0.0,
            fallback_count: 4,
        };
        let mut cfg = ProbeConfig::new(vec![0.2], vec![0.1]);
        cfg.path_count = 8;
        let r = stochastic_nonexpansivity_probe(&p, &sel, &cfg).unwrap();
        assert!(r.failed());
        assert!(r.metrics["part_i_estimate"] > 0.4);
    }

    #[test]
    fn probe_example_2_3_identical_starts() {
        let p = builtin_problem("example_2_3").unwrap();
        let sel = feedback_selector(&p, 11, 1e-12).unwrap();
        let mut cfg = ProbeConfig::new(vec![0.4], vec![0.4]);
        cfg.path_count = 200;
        cfg.horizon = Some(2.0);
        let r = stochastic_nonexpansivity_probe(&p, &sel, &cfg).unwrap();
        assert!(r.passed(), "{r:#?}");
        assert_eq!(r.metrics["part_i_estimate"], 0.0);
    }
}
