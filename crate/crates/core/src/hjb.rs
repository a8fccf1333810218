//! Control Hamiltonian and a monotone grid solver for the discounted HJB equation
//! `lambda V + H(x, DV, D^2 V) = 0` with
//! `H(x, p, A) = max_u { -<p, b(x,u)> - tr(sigma sigma^T A) / 2 - psi(x, p sigma, u) }`.
//!
//! The solver is a Markov chain approximation: upwind drift rates and
//! nonnegative diffusion rates on a uniform lattice, with rates pointing out
//! of the domain dropped. The `z = p sigma` argument of the cost is lagged:
//! `psi(x, z, u) - psi(x, 0, u)` is rewritten as `<gamma, z>` with `gamma`
//! taken from the previous iterate, which turns the coupling into the extra
//! drift `sigma gamma`. Outer iterations are policy iteration with exact
//! policy evaluation by banded LU.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ControlProblem, Domain};
use crate::report::ConditionReport;
use crate::rng::Halton;
use crate::sde::Policy;

/// Anything that maps `(x, p, A)` to a scalar, with `A` row-major `N x N`.
pub trait Hamiltonian: Sync {
    fn value(&self, x: &[f64], p: &[f64], a: &[f64]) -> f64;
}

impl<F: Fn(&[f64], &[f64], &[f64]) -> f64 + Sync> Hamiltonian for F {
    fn value(&self, x: &[f64], p: &[f64], a: &[f64]) -> f64 {
        self(x, p, a)
    }
}

/// The control Hamiltonian of a problem.
pub struct ControlHamiltonian<'a>(pub &'a ControlProblem);

impl Hamiltonian for ControlHamiltonian<'_> {
    fn value(&self, x: &[f64], p: &[f64], a: &[f64]) -> f64 {
        bracket_max(self.0, x, p, a).0
    }
}

/// Evaluation of `H` at one point with its maximizing control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianProbe {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub a: Vec<f64>,
    pub value: f64,
    pub argmax: usize,
}

/// The bracket `-<p,b> - tr(sigma sigma^T A)/2 - psi(x, p sigma, u)` for one control.
pub fn bracket(problem: &ControlProblem, x: &[f64], p: &[f64], a: &[f64], u: usize) -> f64 {
    let (n, d) = (problem.dim(), problem.noise_dim());
    let mut b = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    problem.drift(x, u, &mut b);
    problem.diffusion(x, u, &mut s);
    let mut z = vec![0.0; d];
    for j in 0..d {
        z[j] = (0..n).map(|i| p[i] * s[i * d + j]).sum();
    }
    let mut tr = 0.0;
    for i in 0..n {
        for k in 0..n {
            let sst: f64 = (0..d).map(|j| s[i * d + j] * s[k * d + j]).sum();
            tr += sst * a[k * n + i];
        }
    }
    let pb: f64 = p.iter().zip(&b).map(|(x, y)| x * y).sum();
    -pb - 0.5 * tr - problem.cost(x, &z, u)
}

fn bracket_max(problem: &ControlProblem, x: &[f64], p: &[f64], a: &[f64]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for u in 0..problem.control_count() {
        let v = bracket(problem, x, p, a, u);
        if v > best.0 {
            best = (v, u);
        }
    }
    best
}

fn check_symmetric(n: usize, a: &[f64]) -> Result<()> {
    if a.len() != n * n {
        return Err(Error::InvalidArgument(format!("matrix has {} entries, expected {}", a.len(), n * n)));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidArgument("A must be symmetric".into()));
            }
        }
    }
    Ok(())
}

/// `H(x, p, A)`; ties go to the lowest control index.
pub fn hamiltonian(problem: &ControlProblem, x: &[f64], p: &[f64], a: &[f64]) -> Result<HamiltonianProbe> {
    check_symmetric(problem.dim(), a)?;
    let (value, argmax) = bracket_max(problem, x, p, a);
    Ok(HamiltonianProbe { x: x.to_vec(), p: p.to_vec(), a: a.to_vec(), value, argmax })
}

/// `min(M0, H(x, p, A))`.
pub fn capped_hamiltonian(problem: &ControlProblem, x: &[f64], p: &[f64], a: &[f64]) -> Result<f64> {
    Ok(hamiltonian(problem, x, p, a)?.value.min(problem.constants.cap_m0))
}

/// Geometric grid `2^-10, .., 2^10`.
pub fn default_l_grid() -> Vec<f64> {
    (-10..=10).map(|k| 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    /// `min(M0, max_l H(x, l p, l A))`.
    pub value: f64,
    /// Uncapped maximum over the grid.
    pub sup: f64,
    /// `H` at `l_max` is above the threshold and still increasing.
    pub diverged: bool,
}

/// Envelope `min(M0, sup_l H(x, l p, l A))` over a finite `l` grid.
pub fn envelope(h: &dyn Hamiltonian, cap_m0: f64, x: &[f64], p: &[f64], a: &[f64], l_grid: &[f64], divergence_threshold: f64) -> Result<Envelope> {
    if l_grid.is_empty() {
        return Err(Error::InvalidArgument("l grid is empty".into()));
    }
    let mut lp = p.to_vec();
    let mut la = a.to_vec();
    let mut sup = f64::NEG_INFINITY;
    let mut last = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &l in l_grid {
        lp.iter_mut().zip(p).for_each(|(o, v)| *o = l * v);
        la.iter_mut().zip(a).for_each(|(o, v)| *o = l * v);
        let v = h.value(x, &lp, &la);
        sup = sup.max(v);
        last = (last.1, v);
    }
    let diverged = last.1 > divergence_threshold && last.1 > last.0;
    Ok(Envelope { value: sup.min(cap_m0), sup, diverged })
}

/// Envelope of the control Hamiltonian; the threshold defaults to `1e3 M0`.
pub fn envelope_hamiltonian(problem: &ControlProblem, x: &[f64], p: &[f64], a: &[f64], l_grid: &[f64], divergence_threshold: Option<f64>) -> Result<Envelope> {
    check_symmetric(problem.dim(), a)?;
    let m0 = problem.constants.cap_m0;
    envelope(&ControlHamiltonian(problem), m0, x, p, a, l_grid, divergence_threshold.unwrap_or(1e3 * m0))
}

/// Uniform lattice over the bounding box of the domain; nodes outside the
/// domain (ball corners) are inactive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
    pub h: Vec<f64>,
    active: Vec<bool>,
}

impl Grid {
    pub fn new(domain: &Domain, nodes_per_axis: usize) -> Result<Grid> {
        if nodes_per_axis < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 nodes per axis, got {nodes_per_axis}")));
        }
        let n = domain.dim();
        if n > 3 {
            return Err(Error::InvalidArgument(format!("grid solver supports N <= 3, got {n}")));
        }
        let (lower, upper) = domain.bounds();
        let counts = vec![nodes_per_axis; n];
        let h: Vec<f64> = (0..n).map(|i| (upper[i] - lower[i]) / (nodes_per_axis - 1) as f64).collect();
        let mut g = Grid { lower, upper, counts, h, active: Vec::new() };
        let total = g.len();
        let mut x = vec![0.0; n];
        g.active = (0..total)
            .map(|i| {
                g.coords_into(i, &mut x);
                domain.excursion(&x) <= 1e-12
            })
            .collect();
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.active[node]
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|i| self.active[*i])
    }

    fn stride(&self, axis: usize) -> usize {
        self.counts[..axis].iter().product()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rest = node;
        self.counts
            .iter()
            .map(|c| {
                let i = rest % c;
                rest /= c;
                i
            })
            .collect()
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        let mut rest = node;
        for (i, c) in self.counts.iter().enumerate() {
            out[i] = self.lower[i] + (rest % c) as f64 * self.h[i];
            rest /= c;
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coords_into(node, &mut x);
        x
    }

    /// Node shifted by `offset` lattice steps, if it exists and is active.
    pub fn neighbor(&self, node: usize, offset: &[i64]) -> Option<usize> {
        let mi = self.multi_index(node);
        let mut out = node as i64;
        for (axis, &o) in offset.iter().enumerate() {
            let j = mi[axis] as i64 + o;
            if j < 0 || j >= self.counts[axis] as i64 {
                return None;
            }
            out += o * self.stride(axis) as i64;
        }
        let out = out as usize;
        self.active[out].then_some(out)
    }

    fn axis_offset(&self, axis: usize, step: i64) -> Vec<i64> {
        let mut o = vec![0; self.dim()];
        o[axis] = step;
        o
    }

    /// True when every axis and diagonal neighbour exists.
    pub fn is_interior(&self, node: usize) -> bool {
        let n = self.dim();
        (0..3usize.pow(n as u32)).all(|code| {
            let mut c = code;
            let off: Vec<i64> = (0..n)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect();
            self.neighbor(node, &off).is_some()
        })
    }

    /// Nearest active node to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for i in (0..self.dim()).rev() {
            let j = ((x[i] - self.lower[i]) / self.h[i]).round().clamp(0.0, (self.counts[i] - 1) as f64) as usize;
            node = node * self.counts[i] + j;
        }
        if self.active[node] {
            return node;
        }
        let mut best = (f64::INFINITY, node);
        let mut y = vec![0.0; self.dim()];
        for k in self.active_nodes() {
            self.coords_into(k, &mut y);
            let d = crate::model::dist(x, &y);
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }
}

/// Grid values of `lambda V_lambda` with the minimizing policy.
#[derive(Debug, Clone, Serialize)]
pub struct ValueField {
    pub grid: Grid,
    pub lambda: f64,
    /// `lambda V_lambda` per node; `NaN` at inactive nodes.
    pub values: Vec<f64>,
    pub policy: Option<Vec<usize>>,
    /// Sup-norm residual of the discrete HJB equation, in `lambda V` units.
    pub residual_norm: f64,
    pub iterations: usize,
    pub tol: f64,
}

impl ValueField {
    /// Multilinear interpolation of `lambda V`; falls back to the nearest node
    /// when a cell corner is inactive.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        let n = g.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for i in 0..n {
            let s = ((x[i] - g.lower[i]) / g.h[i]).clamp(0.0, (g.counts[i] - 1) as f64);
            let j = (s.floor() as usize).min(g.counts[i] - 2);
            base[i] = j;
            frac[i] = s - j as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << n) {
            let mut node = 0;
            let mut w = 1.0;
            for i in (0..n).rev() {
                let bit = (corner >> i) & 1;
                node = node * g.counts[i] + base[i] + bit;
                w *= if bit == 1 { frac[i] } else { 1.0 - frac[i] };
            }
            if w == 0.0 {
                continue;
            }
            if !g.active[node] {
                return self.values[g.nearest(x)];
            }
            total += w * self.values[node];
        }
        total
    }

    pub fn sup_abs(&self) -> f64 {
        self.grid.active_nodes().map(|i| self.values[i].abs()).fold(0.0, f64::max)
    }

    /// Largest `|w(y) - w(x)| / h` over adjacent active nodes.
    pub fn lipschitz_quotient(&self) -> f64 {
        let g = &self.grid;
        let mut worst: f64 = 0.0;
        for i in g.active_nodes() {
            for axis in 0..g.dim() {
                if let Some(j) = g.neighbor(i, &g.axis_offset(axis, 1)) {
                    worst = worst.max((self.values[j] - self.values[i]).abs() / g.h[axis]);
                }
            }
        }
        worst
    }

    /// Central first and second differences of `lambda V` at an interior node;
    /// the Hessian is row-major.
    pub fn derivatives(&self, node: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let g = &self.grid;
        if !g.is_interior(node) {
            return None;
        }
        let n = g.dim();
        let v = |off: &[i64]| self.values[g.neighbor(node, off).expect("interior")];
        let mut p = vec![0.0; n];
        let mut a = vec![0.0; n * n];
        let c = self.values[node];
        for i in 0..n {
            let (fp, fm) = (v(&g.axis_offset(i, 1)), v(&g.axis_offset(i, -1)));
            p[i] = (fp - fm) / (2.0 * g.h[i]);
            a[i * n + i] = (fp - 2.0 * c + fm) / (g.h[i] * g.h[i]);
            for j in 0..i {
                let mut o = vec![0i64; n];
                let mut corner = |si: i64, sj: i64| {
                    o.iter_mut().for_each(|x| *x = 0);
                    o[i] = si;
                    o[j] = sj;
                    v(&o)
                };
                let cross = (corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1)) / (4.0 * g.h[i] * g.h[j]);
                a[i * n + j] = cross;
                a[j * n + i] = cross;
            }
        }
        Some((p, a))
    }

    /// CSV with columns `x1..xN, lambda_V, policy_index`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.grid.dim();
        let mut head: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        head.push("lambda_V".into());
        head.push("policy_index".into());
        writeln!(out, "{}", head.join(","))?;
        let mut x = vec![0.0; n];
        for i in self.grid.active_nodes() {
            self.grid.coords_into(i, &mut x);
            for v in &x {
                write!(out, "{v:.16e},")?;
            }
            match &self.policy {
                Some(p) => writeln!(out, "{:.16e},{}", self.values[i], p[i])?,
                None => writeln!(out, "{:.16e},", self.values[i])?,
            }
        }
        Ok(())
    }
}

/// Feedback control read from the nearest node of a solved field.
pub struct FeedbackPolicy<'a> {
    pub grid: &'a Grid,
    pub policy: &'a [usize],
}

impl<'a> FeedbackPolicy<'a> {
    pub fn from_field(field: &'a ValueField) -> Option<Self> {
        field.policy.as_deref().map(|policy| FeedbackPolicy { grid: &field.grid, policy })
    }
}

impl Policy for FeedbackPolicy<'_> {
    fn control(&self, _t: f64, x: &[f64]) -> usize {
        self.policy[self.grid.nearest(x)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-8, max_iter: 10_000 }
    }
}

/// Jump rates of the chain at one node for one control: `(neighbour, rate)`.
struct Rates {
    list: Vec<(usize, f64)>,
    source: f64,
}

struct Assembler<'a> {
    problem: &'a ControlProblem,
    grid: &'a Grid,
}

impl<'a> Assembler<'a> {
    fn new(problem: &'a ControlProblem, grid: &'a Grid) -> Result<Self> {
        if grid.dim() != problem.dim() {
            return Err(Error::GridMismatch(format!("grid has dimension {}, problem {}", grid.dim(), problem.dim())));
        }
        Ok(Assembler { problem, grid })
    }

    /// Rates and source at `node` for control `u`; `grad` is the lagged gradient of `V`.
    fn rates(&self, node: usize, u: usize, grad: &[f64]) -> Result<Rates> {
        let (n, d) = (self.problem.dim(), self.problem.noise_dim());
        let g = self.grid;
        let x = g.coords(node);
        let mut b = vec![0.0; n];
        let mut s = vec![0.0; n * d];
        self.problem.drift(&x, u, &mut b);
        self.problem.diffusion(&x, u, &mut s);
        let psi0 = self.problem.cost_at_zero(&x, u);
        if self.problem.cost_depends_on_z() {
            let z: Vec<f64> = (0..d).map(|j| (0..n).map(|i| grad[i] * s[i * d + j]).sum()).collect();
            let zz: f64 = z.iter().map(|v| v * v).sum();
            if zz > 0.0 {
                let gap = self.problem.cost(&x, &z, u) - psi0;
                for i in 0..n {
                    let sg: f64 = (0..d).map(|j| s[i * d + j] * z[j]).sum();
                    b[i] += gap * sg / zz;
                }
            }
        }
        let a = |i: usize, k: usize| -> f64 { (0..d).map(|j| s[i * d + j] * s[k * d + j]).sum() };
        let mut list = Vec::with_capacity(2 * n + 2 * n * n);
        let push = |off: &[i64], r: f64, list: &mut Vec<(usize, f64)>| {
            if r > 0.0 {
                if let Some(j) = g.neighbor(node, off) {
                    list.push((j, r));
                }
            }
        };
        for i in 0..n {
            let mut diag = a(i, i) / (2.0 * g.h[i] * g.h[i]);
            for k in 0..n {
                if k != i {
                    diag -= a(i, k).abs() / (2.0 * g.h[i] * g.h[k]);
                }
            }
            if diag < -1e-14 {
                let worst = (0..n).filter(|&k| k != i).map(|k| a(i, k).abs() / (g.h[i] * g.h[k])).sum::<f64>();
                return Err(Error::StencilNotMonotone { axis: i, required: (a(i, i) / worst).sqrt() * g.h[i] });
            }
            let diag = diag.max(0.0);
            push(&g.axis_offset(i, 1), diag + b[i].max(0.0) / g.h[i], &mut list);
            push(&g.axis_offset(i, -1), diag + (-b[i]).max(0.0) / g.h[i], &mut list);
            for k in 0..i {
                let aik = a(i, k);
                if aik == 0.0 {
                    continue;
                }
                let r = aik.abs() / (2.0 * g.h[i] * g.h[k]);
                let sgn = if aik > 0.0 { 1 } else { -1 };
                let mut off = vec![0i64; n];
                off[i] = 1;
                off[k] = sgn;
                push(&off, r, &mut list);
                off[i] = -1;
                off[k] = -sgn;
                push(&off, r, &mut list);
            }
        }
        Ok(Rates { list, source: psi0 })
    }
}

/// Lagged gradient of `V` (central where possible, one-sided otherwise).
fn gradient(grid: &Grid, v: &[f64], node: usize) -> Vec<f64> {
    (0..grid.dim())
        .map(|i| {
            let up = grid.neighbor(node, &grid.axis_offset(i, 1));
            let dn = grid.neighbor(node, &grid.axis_offset(i, -1));
            // Rounding-level differences count as zero.
            let diff = |a: usize, b: usize| {
                let d = v[a] - v[b];
                if d.abs() <= 1e-12 * (v[a].abs() + v[b].abs()) { 0.0 } else { d }
            };
            match (up, dn) {
                (Some(a), Some(b)) => diff(a, b) / (2.0 * grid.h[i]),
                (Some(a), None) => diff(a, node) / grid.h[i],
                (None, Some(b)) => diff(node, b) / grid.h[i],
                (None, None) => 0.0,
            }
        })
        .collect()
}

/// `L^u V + psi(x, 0, u)` in rate form.
fn q_value(r: &Rates, v: &[f64], node: usize) -> f64 {
    r.list.iter().map(|(j, rate)| rate * (v[*j] - v[node])).sum::<f64>() + r.source
}

/// Banded matrix with LU factorization without pivoting.
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn new(n: usize, bw: usize) -> Self {
        Banded { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * (2 * self.bw + 1) + (j + self.bw - i)]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (2 * self.bw + 1) + (j + self.bw - i)]
    }

    fn solve(mut self, rhs: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.get(k, k);
            for i in k + 1..(k + bw + 1).min(n) {
                let l = self.get(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                *self.at(i, k) = l;
                for j in k + 1..(k + bw + 1).min(n) {
                    let akj = self.get(k, j);
                    *self.at(i, j) -= l * akj;
                }
                rhs[i] -= l * rhs[k];
            }
        }
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in i + 1..(i + bw + 1).min(n) {
                s -= self.get(i, j) * rhs[j];
            }
            rhs[i] = s / self.get(i, i);
        }
    }
}

/// Solves the discounted HJB equation on `grid`.
pub fn solve_discounted(problem: &ControlProblem, lambda: f64, grid: &Grid, cfg: &SolverConfig) -> Result<ValueField> {
    solve_discounted_from(problem, lambda, grid, cfg, None)
}

/// Same as [`solve_discounted`], starting from the `lambda V` of `warm`.
pub fn solve_discounted_from(problem: &ControlProblem, lambda: f64, grid: &Grid, cfg: &SolverConfig, warm: Option<&ValueField>) -> Result<ValueField> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    let asm = Assembler::new(problem, grid)?;
    let total = grid.len();
    let nu = problem.control_count();
    let mut v: Vec<f64> = match warm {
        Some(w) if w.grid == *grid => w.values.iter().map(|x| if x.is_finite() { x / lambda } else { 0.0 }).collect(),
        Some(_) => return Err(Error::GridMismatch("warm start field lives on another grid".into())),
        None => vec![0.0; total],
    };
    let bw: usize = (0..grid.dim()).map(|i| grid.stride(i)).sum();
    let mut policy: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let mut last_delta = f64::INFINITY;
    // Relaxed updates once the lagged z starts cycling.
    let mut omega = 1.0;
    loop {
        if iterations >= cfg.max_iter {
            return Err(Error::NotConverged { iterations, residual: last_delta });
        }
        iterations += 1;
        let grads: Vec<Vec<f64>> = (0..total).into_par_iter().map(|i| gradient(grid, &v, i)).collect();
        // Improvement: switch only on strict improvement, ties to the lowest index.
        let choices: Vec<Result<(usize, Rates)>> = (0..total)
            .into_par_iter()
            .map(|i| {
                if !grid.active[i] {
                    return Ok((0, Rates { list: Vec::new(), source: 0.0 }));
                }
                let mut best: Option<(f64, usize, Rates)> = None;
                for u in 0..nu {
                    let r = asm.rates(i, u, &grads[i])?;
                    let q = q_value(&r, &v, i);
                    if best.as_ref().map_or(true, |b| q < b.0) {
                        best = Some((q, u, r));
                    }
                }
                let (q, u, r) = best.expect("nonempty control set");
                if let Some(pol) = &policy {
                    let cur = pol[i];
                    if cur != u {
                        let rc = asm.rates(i, cur, &grads[i])?;
                        let qc = q_value(&rc, &v, i);
                        if qc <= q + 1e-14 * (1.0 + q.abs()) {
                            return Ok((cur, rc));
                        }
                    }
                }
                Ok((u, r))
            })
            .collect();
        let mut new_policy = Vec::with_capacity(total);
        let mut m = Banded::new(total, bw);
        let mut rhs = vec![0.0; total];
        for (i, c) in choices.into_iter().enumerate() {
            let (u, r) = c?;
            new_policy.push(u);
            if !grid.active[i] {
                *m.at(i, i) = 1.0;
                continue;
            }
            let out: f64 = r.list.iter().map(|(_, rate)| rate).sum();
            *m.at(i, i) = lambda + out;
            for (j, rate) in &r.list {
                *m.at(i, *j) -= rate;
            }
            rhs[i] = r.source;
        }
        m.solve(&mut rhs);
        let delta = grid.active_nodes().map(|i| lambda * (rhs[i] - v[i]).abs()).fold(0.0, f64::max);
        let stable = policy.as_ref() == Some(&new_policy);
        if iterations > 20 && delta >= last_delta {
            omega = (omega * 0.5f64).max(1.0 / 64.0);
        }
        if omega < 1.0 {
            for (a, b) in v.iter_mut().zip(&rhs) {
                *a += omega * (b - *a);
            }
        } else {
            v = rhs;
        }
        policy = Some(new_policy);
        last_delta = delta;
        if delta < cfg.tol && (stable || iterations > 1 && delta == 0.0) {
            break;
        }
    }
    let residual_norm = hjb_residual(&asm, grid, lambda, &v)?;
    let values = (0..total).map(|i| if grid.active[i] { lambda * v[i] } else { f64::NAN }).collect();
    Ok(ValueField { grid: grid.clone(), lambda, values, policy, residual_norm, iterations, tol: cfg.tol })
}

fn hjb_residual(asm: &Assembler<'_>, grid: &Grid, lambda: f64, v: &[f64]) -> Result<f64> {
    let per: Vec<Result<f64>> = grid
        .active_nodes()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|i| {
            let grad = gradient(grid, v, i);
            let mut best = f64::INFINITY;
            for u in 0..asm.problem.control_count() {
                best = best.min(q_value(&asm.rates(i, u, &grad)?, v, i));
            }
            Ok((lambda * v[i] - best).abs())
        })
        .collect();
    per.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
}

/// One local update `min_u (sum_y r V(y) + psi0) / (lambda + sum_y r)` of the
/// scheme in `V` units, with the `z` lag frozen at `frozen`.
pub fn scheme_update(problem: &ControlProblem, grid: &Grid, lambda: f64, v: &[f64], frozen: &[f64], node: usize) -> Result<f64> {
    let asm = Assembler::new(problem, grid)?;
    let grad = gradient(grid, frozen, node);
    let mut best = f64::INFINITY;
    for u in 0..problem.control_count() {
        let r = asm.rates(node, u, &grad)?;
        let out: f64 = r.list.iter().map(|(_, x)| x).sum();
        let inflow: f64 = r.list.iter().map(|(j, x)| x * v[*j]).sum();
        best = best.min((inflow + r.source) / (lambda + out));
    }
    Ok(best)
}

/// Checks `lambda (V1 - V2) <= sup |psi1 - psi2|` in both directions.
///
/// The right side is sampled on grid nodes, every control and a `z` ball.
pub fn comparison_gap(field1: &ValueField, field2: &ValueField, problem1: &ControlProblem, problem2: &ControlProblem, z_samples: usize, seed: u64) -> Result<ConditionReport> {
    if field1.grid != field2.grid {
        return Err(Error::GridMismatch("fields live on different grids".into()));
    }
    if field1.lambda != field2.lambda {
        return Err(Error::GridMismatch(format!("lambda {} vs {}", field1.lambda, field2.lambda)));
    }
    if problem1.control_count() != problem2.control_count() || problem1.noise_dim() != problem2.noise_dim() {
        return Err(Error::InvalidArgument("problems need matching control sets and noise dimensions".into()));
    }
    let g = &field1.grid;
    let d = problem1.noise_dim();
    let kz = problem1.constants.lip_kz.max(problem2.constants.lip_kz);
    let radius = if kz > 0.0 { 10.0 * kz } else { 1.0 };
    let halton = Halton::new(d, seed);
    let mut zs = vec![vec![0.0; d]];
    let mut unit = vec![0.0; d];
    for k in 0..z_samples {
        halton.point(k as u64, &mut unit);
        let mut z = vec![0.0; d];
        crate::model::ball_point(&unit, radius, &mut z);
        zs.push(z);
    }
    let mut sup_diff: f64 = 0.0;
    let mut x = vec![0.0; g.dim()];
    for i in g.active_nodes() {
        g.coords_into(i, &mut x);
        for u in 0..problem1.control_count() {
            for z in &zs {
                sup_diff = sup_diff.max((problem1.cost(&x, z, u) - problem2.cost(&x, z, u)).abs());
            }
        }
    }
    let gap12 = g.active_nodes().map(|i| field1.values[i] - field2.values[i]).fold(f64::NEG_INFINITY, f64::max);
    let gap21 = g.active_nodes().map(|i| field2.values[i] - field1.values[i]).fold(f64::NEG_INFINITY, f64::max);
    let slack = 2.0 * (field1.tol + field2.tol);
    let mut r = ConditionReport::new("comparison_gap");
    r.check("lambda (V1 - V2) <= sup |psi1 - psi2|", gap12, sup_diff + slack);
    r.check("lambda (V2 - V1) <= sup |psi1 - psi2|", gap21, sup_diff + slack);
    r.metric("gap_12", gap12);
    r.metric("gap_21", gap21);
    r.metric("sup_psi_diff", sup_diff);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_problem;

    fn grid(p: &ControlProblem, n: usize) -> Grid {
        Grid::new(&p.domain, n).unwrap()
    }

    #[test]
    fn decay_hamiltonian_value() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let probe = hamiltonian(&p, &[0.5], &[1.0], &[0.0]).unwrap();
        assert!((probe.value - 0.25).abs() < 1e-15);
        assert_eq!(probe.argmax, 1);
        assert_eq!(capped_hamiltonian(&p, &[0.5], &[1.0], &[0.0]).unwrap(), 0.25);
        assert_eq!(capped_hamiltonian(&p, &[0.5], &[20.0], &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn frozen_dynamics_hamiltonian_ignores_p_and_a() {
        let p = builtin_problem("constant_cost").unwrap();
        for (pp, aa) in [(0.0, 0.0), (3.0, -2.0), (-7.0, 5.0)] {
            assert_eq!(hamiltonian(&p, &[0.1], &[pp], &[aa]).unwrap().value, -1.0);
        }
    }

    #[test]
    fn non_symmetric_matrix_rejected() {
        let text = builtin_problem("decay_quadratic").unwrap().to_config_text();
        let text = text.replace("dimension = 1\n", "dimension = 2\n").replace("drift1 = ((-u1) * x1)", "drift1 = ((-u1) * x1)\ndrift2 = 0");
        let text = text.replace("lower = -1.0", "lower = -1.0, -1.0").replace("upper = 1.0", "upper = 1.0, 1.0");
        let p = parse_or_panic(&text);
        assert!(hamiltonian(&p, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).is_err());
    }

    fn parse_or_panic(t: &str) -> ControlProblem {
        crate::model::parse_problem(t).unwrap_or_else(|e| panic!("{e}\n{t}"))
    }

    #[test]
    fn envelope_cases() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let e = envelope_hamiltonian(&p, &[0.5], &[0.0], &[0.0], &default_l_grid(), None).unwrap();
        assert_eq!(e.value, hamiltonian(&p, &[0.5], &[0.0], &[0.0]).unwrap().value.min(2.0));
        let abs_p = |_: &[f64], p: &[f64], _: &[f64]| p[0].abs();
        let e = envelope(&abs_p, 1.0, &[0.0], &[1.0], &[0.0], &default_l_grid(), 1e3).unwrap();
        assert!(e.diverged);
        assert_eq!(e.value, 1.0);
        assert!(envelope(&abs_p, 2.0, &[0.0], &[1.0], &[0.0], &[], 2e3).is_err());
    }

    #[test]
    fn constant_cost_is_exact() {
        let p = builtin_problem("constant_cost").unwrap();
        for lambda in [1.0, 0.1, 0.01] {
            let f = solve_discounted(&p, lambda, &grid(&p, 21), &SolverConfig::default()).unwrap();
            assert!(f.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn decay_matches_closed_form_at_x_one() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let g = grid(&p, 401);
        let f = solve_discounted(&p, 2.0, &g, &SolverConfig::default()).unwrap();
        let last = g.len() - 1;
        assert!((f.values[last] - 0.5).abs() <= 5.0 * g.h[0], "{}", f.values[last]);
        assert!(f.residual_norm < 1e-8);
        assert_eq!(f.policy.as_ref().unwrap()[last], 1);
    }

    #[test]
    fn example_2_3_value_vanishes() {
        let p = builtin_problem("example_2_3").unwrap();
        let f = solve_discounted(&p, 1.0, &grid(&p, 101), &SolverConfig::default()).unwrap();
        assert!(f.sup_abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_rejected() {
        let p = builtin_problem("constant_cost").unwrap();
        let e = solve_discounted(&p, 0.0, &grid(&p, 11), &SolverConfig::default()).unwrap_err();
        assert!(e.to_string().contains("lambda must be positive"));
    }

    #[test]
    fn banded_solver_matches_dense() {
        let n = 7;
        let mut m = Banded::new(n, 2);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i.saturating_sub(2)..(i + 3).min(n) {
                let v = if i == j { 10.0 } else { -(((i + 2 * j) % 3) as f64) };
                *m.at(i, j) = v;
                dense[i][j] = v;
            }
        }
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let mut rhs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| dense[i][j] * x[j]).sum()).collect();
        m.solve(&mut rhs);
        for (a, b) in rhs.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn comparison_gap_shift_is_tight() {
        let p1 = builtin_problem("decay_quadratic").unwrap();
        let p2 = p1.with_cost_shift(0.3);
        let g = grid(&p1, 101);
        let f1 = solve_discounted(&p1, 0.5, &g, &SolverConfig::default()).unwrap();
        let f2 = solve_discounted(&p2, 0.5, &g, &SolverConfig::default()).unwrap();
        let r = comparison_gap(&f1, &f2, &p1, &p2, 16, 0).unwrap();
        assert!(r.passed());
        assert!((r.metrics["gap_21"] - 0.3).abs() < 4e-8);
        assert!((r.metrics["gap_12"] + 0.3).abs() < 4e-8);
    }

    #[test]
    fn comparison_gap_rejects_mismatch() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let f1 = solve_discounted(&p, 0.5, &grid(&p, 11), &SolverConfig::default()).unwrap();
        let f2 = solve_discounted(&p, 0.5, &grid(&p, 21), &SolverConfig::default()).unwrap();
        assert!(matches!(comparison_gap(&f1, &f2, &p, &p, 4, 0), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn interpolation_reproduces_nodes_and_lines() {
        let p = builtin_problem("decay_quadratic").unwrap();
        let g = grid(&p, 11);
        let values: Vec<f64> = (0..g.len()).map(|i| 3.0 * g.coords(i)[0] - 1.0).collect();
        let f = ValueField { grid: g, lambda: 1.0, values, policy: None, residual_norm: 0.0, iterations: 0, tol: 0.0 };
        for x in [-1.0, -0.33, 0.0, 0.57, 1.0] {
            assert!((f.interpolate(&[x]) - (3.0 * x - 1.0)).abs() < 1e-12);
        }
    }
}
