//! Control problems: coefficients, state domain, declared constants.
//!
//! A problem is the data `(b, sigma, psi, U, domain)` of a controlled
//! diffusion `dX = b(X,u) dt + sigma(X,u) dW` whose running cost
//! `psi(x, z, u)` may depend on the martingale integrand `z` of the cost
//! BSDE. Coefficients are [`Expr`] trees so problems can be read from plain
//! text config files; the built-in catalog is written in the same format.
//!
//! Config layout:
//!
//! ```text
//! name = decay_quadratic
//! dimension = 1
//! noise_dimension = 1
//!
//! [dynamics]
//! drift1 = -u1*x1
//! diffusion1_1 = 0
//!
//! [cost]
//! running = x1^2          # or psi1 = ... and g = ... for split costs
//!
//! [domain]
//! kind = box               # or ball with center = .. and radius = ..
//! lower = -1
//! upper = 1
//!
//! [constants]
//! M = 1
//! Kx = 2
//! Kz = 0
//! c = 1
//! c0 = 2
//! M0 = 2
//!
//! [controls]
//! values = 0.5; 1          # controls separated by ';', components by ','
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::expr::{self, Env, Expr, VarKind};
use crate::report::ConditionReport;
use crate::rng::Halton;

/// State constraint set; closure of a box or a ball.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Box { lower, .. } => lower.len(),
            Domain::Ball { center, .. } => center.len(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.excursion(x) == 0.0
    }

    /// Euclidean distance from `x` to the domain (zero inside).
    pub fn excursion(&self, x: &[f64]) -> f64 {
        match self {
            Domain::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&lo, &hi))| {
                    let d = (lo - v).max(v - hi).max(0.0);
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            Domain::Ball { center, radius } => (dist(x, center) - radius).max(0.0),
        }
    }

    /// Nearest point of the domain.
    pub fn project(&self, x: &mut [f64]) {
        match self {
            Domain::Box { lower, upper } => {
                for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
                    *v = v.clamp(lo, hi);
                }
            }
            Domain::Ball { center, radius } => {
                let r = dist(x, center);
                if r > *radius {
                    let s = radius / r;
                    for (v, &c) in x.iter_mut().zip(center) {
                        *v = c + (*v - c) * s;
                    }
                }
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Box { lower, upper } => (lower.clone(), upper.clone()),
            Domain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
        }
    }

    pub fn diameter(&self) -> f64 {
        match self {
            Domain::Box { lower, upper } => dist(lower, upper),
            Domain::Ball { radius, .. } => 2.0 * radius,
        }
    }

    /// Maps a point of the unit cube into the domain.
    pub fn from_unit(&self, unit: &[f64], out: &mut [f64]) {
        let (lo, hi) = self.bounds();
        for i in 0..out.len() {
            out[i] = lo[i] + unit[i] * (hi[i] - lo[i]);
        }
        self.project(out);
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Declared problem constants. They are audited, never inferred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    /// Bound on `|psi(x, 0, u)|`.
    pub bound_m: f64,
    pub lip_kx: f64,
    pub lip_kz: f64,
    /// Lipschitz and linear-growth constant of `b` and `sigma`.
    pub lip_c: f64,
    /// Constant of the nonexpansivity condition.
    pub nonexp_c0: f64,
    /// Hamiltonian cap, at least `max(nonexp_c0, bound_m)`.
    pub cap_m0: f64,
}

/// Cost of the form `psi(x, z, u) = psi1(x, u) + g(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitForm {
    pub psi1: Expr,
    pub g: Expr,
}

/// A fully specified control problem. Immutable once built.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    dim: usize,
    noise_dim: usize,
    drift: Vec<Expr>,
    diffusion: Vec<Expr>,
    cost: Expr,
    cost_zero: Expr,
    controls: Vec<Vec<f64>>,
    pub domain: Domain,
    pub constants: Constants,
    split: Option<SplitForm>,
}

impl ControlProblem {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn control_count(&self) -> usize {
        self.controls.len()
    }

    pub fn control(&self, index: usize) -> &[f64] {
        &self.controls[index]
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn split_form(&self) -> Option<&SplitForm> {
        self.split.as_ref()
    }

    pub fn cost_expr(&self) -> &Expr {
        &self.cost
    }

    /// `b(x, u)` into `out` (length N).
    pub fn drift(&self, x: &[f64], u: usize, out: &mut [f64]) {
        let env = Env { x, z: &[], u: &self.controls[u] };
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(&env);
        }
    }

    /// `sigma(x, u)` into `out`, row-major `N x d`.
    pub fn diffusion(&self, x: &[f64], u: usize, out: &mut [f64]) {
        let env = Env { x, z: &[], u: &self.controls[u] };
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval(&env);
        }
    }

    pub fn cost(&self, x: &[f64], z: &[f64], u: usize) -> f64 {
        self.cost.eval(&Env { x, z, u: &self.controls[u] })
    }

    /// `psi(x, 0, u)`.
    pub fn cost_at_zero(&self, x: &[f64], u: usize) -> f64 {
        self.cost_zero.eval(&Env { x, z: &[], u: &self.controls[u] })
    }

    /// `min_v psi(x, 0, v)` over the control list.
    pub fn min_cost_at_zero(&self, x: &[f64]) -> f64 {
        (0..self.controls.len()).map(|v| self.cost_at_zero(x, v)).fold(f64::INFINITY, f64::min)
    }

    /// `g(z)` of a split cost.
    pub fn split_g(&self, z: &[f64]) -> Option<f64> {
        self.split.as_ref().map(|s| s.g.eval(&Env { x: &[], z, u: &[] }))
    }

    /// `psi1(x, u)` of a split cost.
    pub fn split_psi1(&self, x: &[f64], u: usize) -> Option<f64> {
        self.split.as_ref().map(|s| s.psi1.eval(&Env { x, z: &[], u: &self.controls[u] }))
    }

    /// Whether the running cost reads `z` at all.
    pub fn cost_depends_on_z(&self) -> bool {
        self.cost.uses(VarKind::Noise)
    }

    /// True when `sigma` vanishes at every sampled state and control.
    pub fn diffusion_vanishes(&self) -> bool {
        if self.diffusion.iter().all(|e| matches!(e, Expr::Num(v) if *v == 0.0)) {
            return true;
        }
        let h = Halton::new(self.dim, 0xD1FF);
        let (mut unit, mut x) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        let mut sig = vec![0.0; self.dim * self.noise_dim];
        for i in 0..256 {
            h.point(i, &mut unit);
            self.domain.from_unit(&unit, &mut x);
            for u in 0..self.controls.len() {
                self.diffusion(&x, u, &mut sig);
                if sig.iter().any(|s| *s != 0.0) {
                    return false;
                }
            }
        }
        true
    }

    /// Same problem with `psi` replaced by `psi + delta`.
    pub fn with_cost_shift(&self, delta: f64) -> ControlProblem {
        let mut p = self.clone();
        p.name = format!("{}+shift({delta})", self.name);
        p.cost = self.cost.clone().add(Expr::num(delta));
        p.cost_zero = p.cost.at_zero_noise();
        p.split = self.split.as_ref().map(|s| SplitForm { psi1: s.psi1.clone().add(Expr::num(delta)), g: s.g.clone() });
        p.constants.bound_m += delta.abs();
        p.constants.cap_m0 = p.constants.cap_m0.max(p.constants.bound_m);
        p
    }

    /// Same problem with `psi` replaced by `factor * psi`, `factor >= 0`.
    pub fn with_cost_scale(&self, factor: f64) -> ControlProblem {
        let mut p = self.clone();
        p.name = format!("{}*scale({factor})", self.name);
        p.cost = Expr::num(factor).mul(self.cost.clone());
        p.cost_zero = p.cost.at_zero_noise();
        p.split = self.split.as_ref().map(|s| SplitForm {
            psi1: Expr::num(factor).mul(s.psi1.clone()),
            g: Expr::num(factor).mul(s.g.clone()),
        });
        let c = &mut p.constants;
        c.bound_m *= factor;
        c.lip_kx *= factor;
        c.lip_kz *= factor;
        c.nonexp_c0 *= factor;
        c.cap_m0 = (c.cap_m0 * factor).max(c.nonexp_c0).max(c.bound_m);
        p
    }

    /// Same problem with the `z`-dependent part of a split cost removed.
    pub fn without_g(&self) -> Result<ControlProblem> {
        let s = self.split.as_ref().ok_or_else(|| Error::MissingSplitForm(self.name.clone()))?;
        let mut p = self.clone();
        p.name = format!("{}-g", self.name);
        p.cost = s.psi1.clone();
        p.cost_zero = p.cost.clone();
        p.split = Some(SplitForm { psi1: s.psi1.clone(), g: Expr::num(0.0) });
        p.constants.lip_kz = 0.0;
        Ok(p)
    }

    /// Canonical config text; parses back to an equivalent problem.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "dimension = {}", self.dim);
        let _ = writeln!(s, "noise_dimension = {}", self.noise_dim);
        let _ = writeln!(s, "\n[dynamics]");
        for (i, e) in self.drift.iter().enumerate() {
            let _ = writeln!(s, "drift{} = {e}", i + 1);
        }
        for i in 0..self.dim {
            for j in 0..self.noise_dim {
                let _ = writeln!(s, "diffusion{}_{} = {}", i + 1, j + 1, self.diffusion[i * self.noise_dim + j]);
            }
        }
        let _ = writeln!(s, "\n[cost]");
        match &self.split {
            Some(sp) => {
                let _ = writeln!(s, "psi1 = {}", sp.psi1);
                let _ = writeln!(s, "g = {}", sp.g);
                let _ = writeln!(s, "running = {}", self.cost);
            }
            None => {
                let _ = writeln!(s, "running = {}", self.cost);
            }
        }
        let _ = writeln!(s, "\n[domain]");
        match &self.domain {
            Domain::Box { lower, upper } => {
                let _ = writeln!(s, "kind = box\nlower = {}\nupper = {}", join(lower), join(upper));
            }
            Domain::Ball { center, radius } => {
                let _ = writeln!(s, "kind = ball\ncenter = {}\nradius = {radius:?}", join(center));
            }
        }
        let c = &self.constants;
        let _ = writeln!(
            s,
            "\n[constants]\nM = {:?}\nKx = {:?}\nKz = {:?}\nc = {:?}\nc0 = {:?}\nM0 = {:?}",
            c.bound_m, c.lip_kx, c.lip_kz, c.lip_c, c.nonexp_c0, c.cap_m0
        );
        let controls: Vec<String> = self.controls.iter().map(|u| join(u)).collect();
        let _ = writeln!(s, "\n[controls]\nvalues = {}", controls.join("; "));
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

/// Raw key/value content of a problem config, grouped by section.
#[derive(Debug, Clone, Default)]
pub struct ProblemConfig {
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl ProblemConfig {
    pub fn parse(text: &str) -> Result<ProblemConfig> {
        let mut cfg = ProblemConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or(Error::Config {
                    line: line_no,
                    message: format!("malformed section header '{line}'"),
                })?;
                section = name.trim().to_string();
                if !["dynamics", "cost", "domain", "constants", "controls"].contains(&section.as_str()) {
                    return Err(Error::Config { line: line_no, message: format!("unknown section [{section}]") });
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Config {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let entry = cfg.sections.entry(section.clone()).or_default();
            if entry.insert(k.trim().to_string(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::Config { line: line_no, message: format!("duplicate key '{}'", k.trim()) });
            }
        }
        Ok(cfg)
    }

    fn get(&self, section: &str, key: &str) -> Option<&(String, usize)> {
        self.sections.get(section).and_then(|s| s.get(key))
    }

    fn require(&self, section: &str, key: &str) -> Result<&(String, usize)> {
        self.get(section, key).ok_or_else(|| Error::Config {
            line: 0,
            message: format!("missing key '{key}'{}", if section.is_empty() { String::new() } else { format!(" in [{section}]") }),
        })
    }

    fn number(&self, section: &str, key: &str) -> Result<f64> {
        let (v, line) = self.require(section, key)?;
        v.parse().map_err(|_| Error::Config { line: *line, message: format!("'{key}' is not a number: '{v}'") })
    }

    fn list(&self, section: &str, key: &str) -> Result<Vec<f64>> {
        let (v, line) = self.require(section, key)?;
        parse_list(v, *line)
    }

    pub fn build(&self) -> Result<ControlProblem> {
        let name = self.get("", "name").map(|v| v.0.clone()).unwrap_or_else(|| "unnamed".into());
        let dim = self.number("", "dimension")? as usize;
        let noise_dim = self.number("", "noise_dimension")? as usize;
        if dim == 0 || noise_dim == 0 {
            return Err(Error::Config { line: 0, message: "dimensions must be positive".into() });
        }

        let (ctrl_text, ctrl_line) = self.require("controls", "values")?;
        let mut controls = Vec::new();
        for part in ctrl_text.split(';') {
            controls.push(parse_list(part, *ctrl_line)?);
        }
        let control_dim = controls[0].len();
        if controls.iter().any(|c| c.len() != control_dim) {
            return Err(Error::Config { line: *ctrl_line, message: "controls have differing lengths".into() });
        }

        let expr_at = |section: &str, key: &str, default: Option<&str>| -> Result<Expr> {
            let text = match self.get(section, key) {
                Some((t, _)) => t.as_str(),
                None => match default {
                    Some(d) => d,
                    None => return Err(self.require(section, key).unwrap_err()),
                },
            };
            expr::parse_checked(text, dim, noise_dim, control_dim)
                .map_err(|source| Error::Expr { field: format!("{section}.{key}"), source })
        };

        let drift = (1..=dim).map(|i| expr_at("dynamics", &format!("drift{i}"), None)).collect::<Result<Vec<_>>>()?;
        let mut diffusion = Vec::with_capacity(dim * noise_dim);
        for i in 1..=dim {
            for j in 1..=noise_dim {
                diffusion.push(expr_at("dynamics", &format!("diffusion{i}_{j}"), Some("0"))?);
            }
        }
        for (k, e) in drift.iter().chain(&diffusion).enumerate() {
            if e.uses(VarKind::Noise) {
                return Err(Error::Expr {
                    field: format!("dynamics[{k}]"),
                    source: crate::error::ExprError::DimensionMismatch { variable: "z".into(), declared: 0 },
                });
            }
        }

        let split = match (self.get("cost", "psi1"), self.get("cost", "g")) {
            (Some(_), Some(_)) => {
                let psi1 = expr_at("cost", "psi1", None)?;
                let g = expr_at("cost", "g", None)?;
                if psi1.uses(VarKind::Noise) || g.uses(VarKind::State) || g.uses(VarKind::Control) {
                    return Err(Error::Config {
                        line: self.get("cost", "g").map(|v| v.1).unwrap_or(0),
                        message: "split form needs psi1(x,u) free of z and g(z) free of x,u".into(),
                    });
                }
                Some(SplitForm { psi1, g })
            }
            (None, None) => None,
            _ => return Err(Error::Config { line: 0, message: "split form needs both psi1 and g".into() }),
        };
        let cost = match (self.get("cost", "running"), &split) {
            (Some(_), _) => expr_at("cost", "running", None)?,
            (None, Some(s)) => s.psi1.clone().add(s.g.clone()),
            (None, None) => return Err(self.require("cost", "running").unwrap_err()),
        };

        let kind = self.get("domain", "kind").map(|v| v.0.as_str()).unwrap_or("box");
        let domain = match kind {
            "box" => {
                let lower = self.list("domain", "lower")?;
                let upper = self.list("domain", "upper")?;
                if lower.len() != dim || upper.len() != dim || lower.iter().zip(&upper).any(|(a, b)| a >= b) {
                    return Err(Error::Config { line: 0, message: "box needs lower < upper in every coordinate".into() });
                }
                Domain::Box { lower, upper }
            }
            "ball" => {
                let center = self.list("domain", "center")?;
                let radius = self.number("domain", "radius")?;
                if center.len() != dim || radius <= 0.0 {
                    return Err(Error::Config { line: 0, message: "ball needs a centre in R^N and radius > 0".into() });
                }
                Domain::Ball { center, radius }
            }
            other => return Err(Error::Config { line: 0, message: format!("unknown domain kind '{other}'") }),
        };

        let constants = Constants {
            bound_m: self.number("constants", "M")?,
            lip_kx: self.number("constants", "Kx")?,
            lip_kz: self.number("constants", "Kz")?,
            lip_c: self.number("constants", "c")?,
            nonexp_c0: self.number("constants", "c0")?,
            cap_m0: self.number("constants", "M0")?,
        };
        let c = &constants;
        if [c.bound_m, c.lip_kx, c.lip_kz, c.lip_c].iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config { line: 0, message: "M, Kx, Kz, c must be finite and >= 0".into() });
        }
        if c.nonexp_c0 <= 0.0 || c.cap_m0 <= 0.0 {
            return Err(Error::Config { line: 0, message: "c0 and M0 must be positive".into() });
        }
        if c.cap_m0 < c.nonexp_c0.max(c.bound_m) {
            return Err(Error::Config { line: 0, message: "M0 must be at least max(c0, M)".into() });
        }

        let cost_zero = cost.at_zero_noise();
        Ok(ControlProblem { name, dim, noise_dim, drift, diffusion, cost, cost_zero, controls, domain, constants, split })
    }
}

fn parse_list(text: &str, line: usize) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>().map_err(|_| Error::Config { line, message: format!("'{t}' is not a number") })
        })
        .collect()
}

/// Parses a problem from config text.
pub fn parse_problem(config_text: &str) -> Result<ControlProblem> {
    ProblemConfig::parse(config_text)?.build()
}

/// Names accepted by [`builtin_problem`].
pub const CATALOG: &[&str] = &[
    "example_2_3",
    "constant_cost",
    "decay_quadratic",
    "split_homogeneous",
    "expanding",
    "elliptic_counterexample",
    "ergodic_diffusion",
    "soft_abs_cost",
    "attracting_peak",
    "steerable",
];

fn builtin_text(name: &str) -> Option<String> {
    let box1 = "[domain]\nkind = box\nlower = -1\nupper = 1\n";
    let head = |drift: &str, diff: &str| {
        format!("name = {name}\ndimension = 1\nnoise_dimension = 1\n[dynamics]\ndrift1 = {drift}\ndiffusion1_1 = {diff}\n{box1}")
    };
    let consts = |m: f64, kx: f64, kz: f64, c: f64, c0: f64, m0: f64| {
        format!("[constants]\nM = {m}\nKx = {kx}\nKz = {kz}\nc = {c}\nc0 = {c0}\nM0 = {m0}\n")
    };
    let text = match name {
        // b = -3x, sigma = x, psi = z.
        "example_2_3" => head("-3*x1", "x1") + "[cost]\nrunning = z1\n" + &consts(0.0, 0.0, 1.0, 4.0, 1.0, 1.0) + "[controls]\nvalues = 0; 1\n",
        "constant_cost" => head("0", "0") + "[cost]\nrunning = 1\n" + &consts(1.0, 0.0, 0.0, 0.0, 1.0, 1.0) + "[controls]\nvalues = 0\n",
        "decay_quadratic" => head("-u1*x1", "0") + "[cost]\nrunning = x1^2\n" + &consts(1.0, 2.0, 0.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0.5; 1\n",
        // u = 0 freezes the state, so H(x,p,A) >= H(x,0,0).
        "split_homogeneous" => {
            head("-u1*x1", "0") + "[cost]\npsi1 = x1^2\ng = -1*abs(z1)\n" + &consts(1.0, 2.0, 1.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0; 0.5; 1\n"
        }
        // Negative controls and auxiliary problems.
        "expanding" => head("x1", "0") + "[cost]\nrunning = x1^2\n" + &consts(1.0, 2.0, 0.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0\n",
        "elliptic_counterexample" => {
            head("-x1", "0.5") + "[cost]\nrunning = x1^2\n" + &consts(1.0, 2.0, 0.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0\n"
        }
        "ergodic_diffusion" => {
            head("0", "1") + "[cost]\npsi1 = x1^2\ng = -1*abs(z1)\n" + &consts(1.0, 2.0, 1.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0\n"
        }
        "soft_abs_cost" => {
            head("-u1*x1", "0") + "[cost]\nrunning = x1^2 + sqrt(1 + z1^2) - 1\n" + &consts(1.0, 2.0, 1.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0.5; 1\n"
        }
        // Flow runs into the cost peak at 0: lambda * V_lambda decreases in lambda at x = +-1.
        "attracting_peak" => head("-x1", "0") + "[cost]\nrunning = 1 - x1^2\n" + &consts(1.0, 2.0, 0.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = 0\n",
        // Drift in either direction: sup_l H(x, l p, l A) is infinite for every p != 0.
        "steerable" => head("u1", "0") + "[cost]\nrunning = x1^2\n" + &consts(1.0, 2.0, 0.0, 1.0, 2.0, 2.0) + "[controls]\nvalues = -1; 0; 1\n",
        _ => return None,
    };
    Some(text)
}

/// Looks up a catalog problem by name.
pub fn builtin_problem(name: &str) -> Result<ControlProblem> {
    let text = builtin_text(name).ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
    parse_problem(&text)
}

/// Resolves `builtin:<name>` or reads a config file from disk.
pub fn resolve_problem(spec: &str) -> Result<ControlProblem> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin_problem(name),
        None => parse_problem(&std::fs::read_to_string(spec)?),
    }
}

/// Empirical check of the declared constants on quasi-random samples.
///
/// `z` is drawn in the ball of radius `10 * Kz` (radius 1 when `Kz = 0`).
pub fn lipschitz_audit(problem: &ControlProblem, sample_count: usize, seed: u64) -> ConditionReport {
    let mut report = ConditionReport::new("lipschitz_audit");
    let (n, d) = (problem.dim(), problem.noise_dim());
    let c = problem.constants;
    let radius = if c.lip_kz > 0.0 { 10.0 * c.lip_kz } else { 1.0 };
    let halton = Halton::new(2 * n + 2 * d, seed);
    let mut unit = vec![0.0; halton.dim()];
    let (mut x, mut xp, mut z, mut zp) = (vec![0.0; n], vec![0.0; n], vec![0.0; d], vec![0.0; d]);
    let (mut bx, mut bxp) = (vec![0.0; n], vec![0.0; n]);
    let (mut sx, mut sxp) = (vec![0.0; n * d], vec![0.0; n * d]);

    let mut worst = BTreeMap::<&str, (f64, Vec<f64>)>::new();
    let mut bump = |key: &'static str, v: f64, pt: &dyn Fn() -> Vec<f64>| {
        let e = worst.entry(key).or_insert((0.0, Vec::new()));
        if v > e.0 || v.is_nan() {
            *e = (v, pt());
        }
    };

    for i in 0..sample_count.max(1) {
        halton.point(i as u64, &mut unit);
        problem.domain.from_unit(&unit[..n], &mut x);
        problem.domain.from_unit(&unit[n..2 * n], &mut xp);
        ball_point(&unit[2 * n..2 * n + d], radius, &mut z);
        ball_point(&unit[2 * n + d..], radius, &mut zp);
        let u = i % problem.control_count();
        let pt = || [x.clone(), xp.clone(), z.clone(), zp.clone(), vec![u as f64]].concat();

        let dx = dist(&x, &xp);
        let dz = dist(&z, &zp);
        if dx > 0.0 {
            let q = (problem.cost(&x, &z, u) - problem.cost(&xp, &z, u)).abs() / dx;
            bump("Kx", q, &pt);
            problem.drift(&x, u, &mut bx);
            problem.drift(&xp, u, &mut bxp);
            problem.diffusion(&x, u, &mut sx);
            problem.diffusion(&xp, u, &mut sxp);
            let q = (dist(&bx, &bxp) + dist(&sx, &sxp)) / dx;
            bump("c", q, &pt);
        }
        if dz > 0.0 {
            let q = (problem.cost(&x, &z, u) - problem.cost(&x, &zp, u)).abs() / dz;
            bump("Kz", q, &pt);
        }
        bump("M", problem.cost_at_zero(&x, u).abs(), &pt);
        problem.drift(&x, u, &mut bx);
        problem.diffusion(&x, u, &mut sx);
        bump("c", (norm(&bx) + norm(&sx)) / (1.0 + norm(&x)), &pt);

        if let Some(split) = problem.split_form() {
            let g = |z: &[f64]| split.g.eval(&Env { x: &[], z, u: &[] });
            let gz = g(&z);
            let mut hom = 0.0f64;
            for t in [0.0, 0.5, 1.0, 2.0, 7.0] {
                let tz: Vec<f64> = z.iter().map(|v| t * v).collect();
                let err = (g(&tz) - t * gz).abs() / (1e-300 + (t * gz).abs().max(g(&tz).abs()).max(1.0));
                hom = hom.max(err);
            }
            bump("g_homogeneity", hom, &pt);
            for kappa in [0.25, 0.5, 0.75] {
                let mix: Vec<f64> = z.iter().zip(&zp).map(|(a, b)| kappa * a + (1.0 - kappa) * b).collect();
                let gap = kappa * gz + (1.0 - kappa) * g(&zp) - g(&mix);
                bump("g_concavity", gap, &pt);
            }
            if dz > 0.0 {
                bump("g_lipschitz", (gz - g(&zp)).abs() / dz, &pt);
            }
            let recombined = problem.split_psi1(&x, u).unwrap_or(0.0) + gz;
            bump("split_consistency", (recombined - problem.cost(&x, &z, u)).abs(), &pt);
        }
    }

    let slack = |v: f64| v * (1.0 + 1e-9) + 1e-12;
    let mut first_fail: Option<(String, Vec<f64>)> = None;
    let mut record = |report: &mut ConditionReport, label: &str, key: &str, bound: f64| {
        if let Some((v, pt)) = worst.get(key) {
            report.metric(format!("empirical_{key}"), *v);
            if !report.check(label, *v, bound) && first_fail.is_none() {
                first_fail = Some((format!("{label}: empirical {v:.6e} exceeds {bound:.6e}"), pt.clone()));
            }
        }
    };
    record(&mut report, "Kx", "Kx", slack(c.lip_kx));
    record(&mut report, "Kz", "Kz", slack(c.lip_kz));
    record(&mut report, "M", "M", slack(c.bound_m));
    record(&mut report, "c", "c", slack(c.lip_c));
    if problem.split_form().is_some() {
        let g0 = problem.split_g(&vec![0.0; d]).unwrap_or(0.0).abs();
        report.check("g(0) = 0", g0, 0.0);
        record(&mut report, "g homogeneity", "g_homogeneity", 1e-12);
        record(&mut report, "g concavity", "g_concavity", 1e-12);
        record(&mut report, "g Lipschitz", "g_lipschitz", slack(c.lip_kz));
        record(&mut report, "psi = psi1 + g", "split_consistency", 1e-12);
    }
    report.check("M0 >= max(c0, M)", c.nonexp_c0.max(c.bound_m), c.cap_m0);
    if let Some((desc, pt)) = first_fail {
        report.witness(desc, pt);
    }
    report.metric("z_radius", radius);
    report.metric("samples", sample_count as f64);
    report
}

/// Maps a unit-cube point into the closed ball of given radius around 0.
pub(crate) fn ball_point(unit: &[f64], radius: f64, out: &mut [f64]) {
    for (o, u) in out.iter_mut().zip(unit) {
        *o = radius * (2.0 * u - 1.0);
    }
    let r = norm(out);
    if r > radius {
        for o in out.iter_mut() {
            *o *= radius / r;
        }
    }
}
