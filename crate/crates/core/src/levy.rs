//! Monte Carlo for the controlled 2s-stable process dX = -zeta(X) dt + dL.
//!
//! The stable process is normalized so that E exp(i xi L_t) = exp(-t |xi|^{2s}),
//! i.e. its generator is -(-Delta)^s. Paths use Euler steps with exact stable
//! increments and independent ChaCha streams (seed, path index).

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::ergodic::EigenPair;
use crate::grid::{GridFunction, UniformGrid};
use crate::operator::{apply_field_with, KernelSpec, Stencil};
use crate::problem::ProblemSpec;
use crate::quad::gl32;
use crate::{Error, Result};

/// Paths whose position exceeds this magnitude are stopped and flagged.
pub const ESCAPE_RADIUS: f64 = 1e6;

fn check_order(s: f64) -> Result<()> {
    if !(s > 0.5 && s < 1.0) {
        return Err(Error::Validation(format!("stable sampler needs 1/2 < s < 1, got {s}")));
    }
    Ok(())
}

/// Standard symmetric (2s)-stable variate with characteristic function
/// exp(-|xi|^{2s}) (Chambers-Mallows-Stuck).
pub fn standard_stable<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    (a * v).sin() / v.cos().powf(1.0 / a) * (((1.0 - a) * v).cos() / w).powf((1.0 - a) / a)
}

/// Positive s-stable variate with Laplace transform exp(-lambda^s) (Kanter).
pub fn positive_stable<R: Rng + ?Sized>(s: f64, rng: &mut R) -> f64 {
    // U in (0, 1) open at both ends
    let u = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let w: f64 = Exp1.sample(rng);
    let a =
        ((s * PI * u).sin() / (PI * u).sin()).powf(1.0 / (1.0 - s)) * ((1.0 - s) * PI * u).sin() / (s * PI * u).sin();
    (a / w).powf((1.0 - s) / s)
}

/// Increment of the rotationally invariant 2s-stable process over dt in
/// dimension 1 or 2, written into `out`.
pub fn sample_stable_increment<R: Rng + ?Sized>(s: f64, dt: f64, rng: &mut R, out: &mut [f64]) -> Result<()> {
    check_order(s)?;
    if !(dt > 0.0) {
        return Err(Error::Validation("time step must be positive".into()));
    }
    match out.len() {
        1 => {
            out[0] = dt.powf(0.5 / s) * standard_stable(2.0 * s, rng);
        }
        2 => {
            // subordinated Brownian motion: sqrt(A) N(0, 2 I) with A positive s-stable
            let a = dt.powf(1.0 / s) * positive_stable(s, rng);
            let sd = (2.0 * a).sqrt();
            for o in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *o = sd * z;
            }
        }
        d => return Err(Error::Validation(format!("stable sampler supports d in {{1, 2}}, got {d}"))),
    }
    Ok(())
}

/// Generator for path `index` of a run with the given seed.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    /// Nodal values of zeta on a grid, linear in between; beyond the grid
    /// zeta(x) = grad_p H(x, sign(x) a beta |x|^{beta - 1}) per side.
    Feedback {
        grid: UniformGrid,
        values: Vec<f64>,
        tail: [(f64, f64); 2],
    },
    /// Nodal values read from a file, held constant beyond the grid ends.
    Table {
        grid: UniformGrid,
        values: Vec<f64>,
    },
    Constant(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub struct ControlPolicy {
    pub kind: PolicyKind,
    /// Multiplier applied to the drift (1 for the policy as built).
    pub scale: f64,
    pub source: String,
}

impl ControlPolicy {
    pub fn zero() -> Self {
        ControlPolicy { kind: PolicyKind::Zero, scale: 1.0, source: "zero".into() }
    }

    pub fn constant(c: f64) -> Self {
        ControlPolicy { kind: PolicyKind::Constant(c), scale: 1.0, source: format!("constant {c}") }
    }

    /// b_u = grad_p H(x, Du) from an extracted eigenpair.
    pub fn feedback(pair: &EigenPair) -> Self {
        ControlPolicy {
            kind: PolicyKind::Feedback { grid: pair.u.grid, values: pair.feedback.clone(), tail: pair.tail },
            scale: 1.0,
            source: "b_u from EigenPair".into(),
        }
    }

    /// Policy from a grid function (the far-field model is ignored).
    pub fn from_grid_function(gf: &GridFunction, source: &str) -> Result<Self> {
        if gf.grid.len < 2 || gf.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("policy table needs at least two finite values".into()));
        }
        Ok(ControlPolicy {
            kind: PolicyKind::Table { grid: gf.grid, values: gf.values.clone() },
            scale: 1.0,
            source: source.into(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ControlPolicy {
            kind: self.kind.clone(),
            scale: self.scale * factor,
            source: format!("{} x{factor}", self.source),
        }
    }

    pub fn eval(&self, spec: &ProblemSpec, x: f64) -> f64 {
        let z = match &self.kind {
            PolicyKind::Zero => 0.0,
            PolicyKind::Constant(c) => *c,
            PolicyKind::Table { grid, values } => {
                let t = ((x - grid.x0) / grid.h).clamp(0.0, (grid.len - 1) as f64);
                let k = (t.floor() as usize).min(grid.len - 2);
                let w = t - k as f64;
                (1.0 - w) * values[k] + w * values[k + 1]
            }
            PolicyKind::Feedback { grid, values, tail } => {
                let x_first = grid.x0;
                let x_last = grid.x_end();
                if x >= x_first && x <= x_last {
                    let t = (x - x_first) / grid.h;
                    let k = (t.floor() as usize).min(grid.len - 2);
                    let w = t - k as f64;
                    (1.0 - w) * values[k] + w * values[k + 1]
                } else {
                    let (a, beta) = if x < 0.0 { tail[0] } else { tail[1] };
                    let p = x.signum() * a * beta * x.abs().powf(beta - 1.0);
                    spec.hamiltonian.grad1(x, p)
                }
            }
        };
        self.scale * z
    }

    /// Policy values on the nodes of a grid, as a grid function.
    pub fn to_grid_function(&self, spec: &ProblemSpec, grid: UniformGrid) -> Result<GridFunction> {
        GridFunction::from_fn(grid, crate::grid::FarFieldModel::Zero, |x| self.eval(spec, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub x0: f64,
    /// Radius of the return set B.
    pub return_radius: f64,
    /// Fraction of the horizon discarded before time-averaging.
    pub burn_in: f64,
}

impl PathConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon >= self.dt) {
            return Err(Error::Validation("need dt > 0 and horizon >= dt".into()));
        }
        if self.n_paths == 0 {
            return Err(Error::Validation("need at least one path".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::Validation("burn-in fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

/// Smallest radius R with min_xi G(x, xi) - lambda > 1 for all |x| >= R on
/// a fine sample of [0, r_max] (both signs); G = f + l.
pub fn return_radius(spec: &ProblemSpec, lambda: f64, r_max: f64) -> f64 {
    let ham = &spec.hamiltonian;
    let n = 20_000;
    let mut r_b: f64 = 0.0;
    for k in 0..=n {
        let r = r_max * k as f64 / n as f64;
        for x in [r, -r] {
            // min over xi of l(x, xi) is -H(x, 0), attained at xi = grad_p H(x, 0)
            let g_min = spec.f1(x) + ham.lagrangian1(x, ham.grad1(x, 0.0));
            if g_min - lambda <= 1.0 {
                r_b = r_b.max(r);
            }
        }
    }
    r_b
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSummary {
    pub path_id: u64,
    /// Time average of G over [burn_in T, T].
    pub time_avg_cost: f64,
    /// Integral of G from 0 to the horizon (or to the escape time).
    pub total_cost: f64,
    /// First time the path is in B after having been outside it.
    pub return_time: Option<f64>,
    pub escaped: bool,
    pub final_x: f64,
}

/// One Euler path. The return time is the first entrance into B after the
/// path has been outside B (immediately, for a start outside B).
pub fn simulate_path(
    policy: &ControlPolicy,
    spec: &ProblemSpec,
    config: &PathConfig,
    path_id: u64,
) -> Result<PathSummary> {
    config.check()?;
    let s = spec.s();
    let ham = &spec.hamiltonian;
    let mut rng = path_rng(config.seed, path_id);
    let steps = config.steps();
    let burn = ((config.burn_in * steps as f64).round() as usize).min(steps - 1);
    let scale = config.dt.powf(0.5 / s);
    let a = 2.0 * s;
    let mut x = config.x0;
    let mut total = 0.0;
    let mut tail = 0.0;
    let mut left_b = x.abs() > config.return_radius;
    let mut return_time = None;
    let mut escaped = false;
    for k in 0..steps {
        let z = policy.eval(spec, x);
        let g = spec.f1(x) + ham.lagrangian1(x, z);
        total += g * config.dt;
        if k >= burn {
            tail += g * config.dt;
        }
        x += -z * config.dt + scale * standard_stable(a, &mut rng);
        if !x.is_finite() || x.abs() > ESCAPE_RADIUS {
            escaped = true;
            break;
        }
        let inside = x.abs() <= config.return_radius;
        if !inside {
            left_b = true;
        } else if left_b && return_time.is_none() {
            return_time = Some((k + 1) as f64 * config.dt);
        }
    }
    let avg_len = (steps - burn) as f64 * config.dt;
    Ok(PathSummary { path_id, time_avg_cost: tail / avg_len, total_cost: total, return_time, escaped, final_x: x })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub dt: f64,
    /// Fraction of paths stopped at the escape radius.
    pub escaped_fraction: f64,
    /// More than 5% of paths escaped.
    pub unreliable: bool,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs all paths (in parallel when enabled); results are ordered by path id.
pub fn simulate_paths(policy: &ControlPolicy, spec: &ProblemSpec, config: &PathConfig) -> Result<Vec<PathSummary>> {
    config.check()?;
    crate::par::map_range(config.n_paths, |i| simulate_path(policy, spec, config, i as u64)).into_iter().collect()
}

/// Long-run average cost: per-path time averages after burn-in, then mean
/// and standard error across paths.
pub fn estimate_long_run_cost(policy: &ControlPolicy, spec: &ProblemSpec, config: &PathConfig) -> Result<SimEstimate> {
    let paths = simulate_paths(policy, spec, config)?;
    Ok(estimate_from(&paths, config))
}

pub fn estimate_from(paths: &[PathSummary], config: &PathConfig) -> SimEstimate {
    let vals: Vec<f64> = paths.iter().filter(|p| !p.escaped).map(|p| p.time_avg_cost).collect();
    let escaped = paths.iter().filter(|p| p.escaped).count() as f64 / paths.len() as f64;
    let (mean, stderr) = if vals.is_empty() { (f64::INFINITY, f64::INFINITY) } else { mean_stderr(&vals) };
    SimEstimate {
        mean,
        stderr,
        n_paths: paths.len(),
        seed: config.seed,
        dt: config.dt,
        escaped_fraction: escaped,
        unreliable: escaped > 0.05,
    }
}

pub fn paths_csv(paths: &[PathSummary]) -> String {
    let mut out = String::from("path_id,time_avg_cost,return_time,flag\n");
    for p in paths {
        let flag = if p.escaped {
            "escaped"
        } else if p.return_time.is_some() {
            "returned"
        } else {
            "no_return"
        };
        let rt = p.return_time.map(crate::grid::e17).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", p.path_id, crate::grid::e17(p.time_avg_cost), rt, flag));
    }
    out
}

impl SimEstimate {
    pub fn to_csv(&self) -> String {
        format!(
            "mean,stderr,n_paths,seed,dt,escaped_fraction,unreliable\n{},{},{},{},{},{},{}\n",
            crate::grid::e17(self.mean),
            crate::grid::e17(self.stderr),
            self.n_paths,
            self.seed,
            crate::grid::e17(self.dt),
            crate::grid::e17(self.escaped_fraction),
            self.unreliable
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepresentationPoint {
    pub x: f64,
    pub u: f64,
    /// E[int_0^tau (G - lambda) dt + u(X_tau)].
    pub rhs: f64,
    pub stderr: f64,
    /// Fraction of paths that did not enter B within the horizon.
    pub non_return: f64,
}

/// Above this non-return fraction a point is reported as inconclusive.
pub const MAX_NON_RETURN: f64 = 0.05;

impl RepresentationPoint {
    pub fn inconclusive(&self) -> bool {
        self.non_return > MAX_NON_RETURN
    }
}

#[derive(Debug, Clone)]
pub struct RepresentationReport {
    pub points: Vec<RepresentationPoint>,
    pub lambda: f64,
    pub return_radius: f64,
    pub dt: f64,
}

impl RepresentationReport {
    /// u(x) <= RHS + 3 stderr + allowance at every point; false if any
    /// point is inconclusive.
    pub fn inequality_holds(&self, allowance: f64) -> bool {
        self.points.iter().all(|p| !p.inconclusive() && p.u <= p.rhs + 3.0 * p.stderr + allowance)
    }

    pub fn inconclusive(&self) -> bool {
        self.points.iter().any(RepresentationPoint::inconclusive)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,u,rhs,stderr,non_return,inconclusive\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                crate::grid::e17(p.x),
                crate::grid::e17(p.u),
                crate::grid::e17(p.rhs),
                crate::grid::e17(p.stderr),
                crate::grid::e17(p.non_return),
                p.inconclusive()
            ));
        }
        out
    }
}

/// Per-path samples of int_0^tau (G - lambda) dt + u(X_tau) for paths started
/// at x outside B, with tau the first entrance time into B. Non-returning
/// paths are dropped and counted.
pub fn representation_samples(
    pair: &EigenPair,
    policy: &ControlPolicy,
    spec: &ProblemSpec,
    config: &PathConfig,
    x: f64,
) -> Result<(Vec<f64>, f64)> {
    let samples = representation_paths(pair, policy, spec, config, x)?;
    let n = samples.len() as f64;
    let kept: Vec<f64> = samples.into_iter().flatten().collect();
    let non_return = 1.0 - kept.len() as f64 / n;
    Ok((kept, non_return))
}

/// Per-path representation samples indexed by path (None: no return).
fn representation_paths(
    pair: &EigenPair,
    policy: &ControlPolicy,
    spec: &ProblemSpec,
    config: &PathConfig,
    x: f64,
) -> Result<Vec<Option<f64>>> {
    config.check()?;
    let s = spec.s();
    let ham = &spec.hamiltonian;
    let lambda = pair.lambda_star;
    let steps = config.steps();
    let scale = config.dt.powf(0.5 / s);
    let a = 2.0 * s;
    let samples = crate::par::map_range(config.n_paths, |i| {
        let mut rng = path_rng(config.seed, i as u64);
        let mut y = x;
        let mut acc = 0.0;
        if y.abs() <= config.return_radius {
            return Some(pair.u.eval(y));
        }
        for _ in 0..steps {
            let z = policy.eval(spec, y);
            acc += (spec.f1(y) + ham.lagrangian1(y, z) - lambda) * config.dt;
            y += -z * config.dt + scale * standard_stable(a, &mut rng);
            if !y.is_finite() || y.abs() > ESCAPE_RADIUS {
                return None;
            }
            if y.abs() <= config.return_radius {
                return Some(acc + pair.u.eval(y));
            }
        }
        None
    });
    Ok(samples)
}

/// Paired comparison of two policies at a start point on shared random
/// streams: mean and standard error of RHS_b - RHS_a over paths where both
/// returned.
pub fn compare_representation(
    pair: &EigenPair,
    a: &ControlPolicy,
    b: &ControlPolicy,
    spec: &ProblemSpec,
    config: &PathConfig,
    x: f64,
) -> Result<(f64, f64)> {
    let sa = representation_paths(pair, a, spec, config, x)?;
    let sb = representation_paths(pair, b, spec, config, x)?;
    let d: Vec<f64> = sa.iter().zip(&sb).filter_map(|(p, q)| Some((*q)? - (*p)?)).collect();
    if d.len() < 2 {
        return Err(Error::Property(format!("no paired returns at x = {x}")));
    }
    Ok(mean_stderr(&d))
}

/// Monte Carlo right-hand side of the representation inequality at each start
/// point (paths share random streams across points and policies). Points
/// where too many paths fail to return are kept but flagged inconclusive.
pub fn verify_representation(
    pair: &EigenPair,
    policy: &ControlPolicy,
    spec: &ProblemSpec,
    config: &PathConfig,
    starts: &[f64],
) -> Result<RepresentationReport> {
    let mut points = Vec::new();
    for &x in starts {
        let (v, non_return) = representation_samples(pair, policy, spec, config, x)?;
        let (rhs, stderr) = mean_stderr(&v);
        points.push(RepresentationPoint { x, u: pair.u.eval(x), rhs, stderr, non_return });
    }
    Ok(RepresentationReport { points, lambda: pair.lambda_star, return_radius: config.return_radius, dt: config.dt })
}

/// Smooth compactly supported test functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// (1 - ((x - c)/r)^2)_+^k, with k >= 3 for two continuous derivatives.
    Polynomial { center: f64, radius: f64, power: i32 },
    /// exp(1 - 1/(1 - ((x - c)/r)^2)) inside, 0 outside.
    Bump { center: f64, radius: f64 },
}

impl TestFunction {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            TestFunction::Polynomial { center, radius, .. } | TestFunction::Bump { center, radius } => {
                (center - radius, center + radius)
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Polynomial { center, radius, power } => {
                let t = (x - center) / radius;
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - t * t).powi(power)
                }
            }
            TestFunction::Bump { center, radius } => {
                let t = (x - center) / radius;
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - t * t)).exp()
                }
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Polynomial { center, radius, power } => {
                let t = (x - center) / radius;
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    -2.0 * power as f64 * t / radius * (1.0 - t * t).powi(power - 1)
                }
            }
            TestFunction::Bump { center, radius } => {
                let t = (x - center) / radius;
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    let q = 1.0 - t * t;
                    self.value(x) * (-2.0 * t / (q * q)) / radius
                }
            }
        }
    }
}

/// I psi tabulated on a fine grid around the support; beyond it the
/// integral has no singularity and is done by direct quadrature.
pub struct GeneratorTable {
    grid: UniformGrid,
    values: Vec<f64>,
    psi: TestFunction,
    kernel: KernelSpec,
}

impl GeneratorTable {
    pub fn new(psi: TestFunction, kernel: &KernelSpec, h: f64, half_width: f64) -> Result<Self> {
        let (lo, hi) = psi.support();
        let c = 0.5 * (lo + hi);
        let m = (half_width / h).ceil() as usize;
        let grid = UniformGrid::new(c - m as f64 * h, h, 2 * m + 1)?;
        let gf = GridFunction::from_fn(grid, crate::grid::FarFieldModel::Zero, |x| psi.value(x))?;
        let st = Stencil::new(kernel, h, grid.len)?;
        let field = apply_field_with(&st, &gf)?;
        Ok(GeneratorTable { grid, values: field.values, psi, kernel: kernel.clone() })
    }

    /// I psi at x.
    pub fn i_psi(&self, x: f64) -> f64 {
        let (lo, hi) = self.psi.support();
        let g = &self.grid;
        if x >= g.x0 + 2.0 * g.h && x <= g.x_end() - 3.0 * g.h {
            let t = (x - g.x0) / g.h;
            let k = (t.floor() as usize).min(g.len - 2);
            let w = t - k as f64;
            return (1.0 - w) * self.values[k] + w * self.values[k + 1];
        }
        // x is far outside the support: I psi(x) = int psi(y) K(y - x) dy
        let rule = gl32();
        let panels = 8;
        let width = (hi - lo) / panels as f64;
        let mut acc = 0.0;
        for p in 0..panels {
            let a = lo + p as f64 * width;
            acc += rule.integrate(a, a + width, |y| self.psi.value(y) * self.kernel.density(y - x));
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynkinReport {
    /// E[psi(X_t)] - psi(x0).
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// E[int_0^t A psi(X_r) dr].
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Standard error of the per-path difference.
    pub diff_stderr: f64,
    pub t: f64,
    pub dt: f64,
}

impl DynkinReport {
    pub fn agrees(&self, k_sigma: f64, dt_allowance: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k_sigma * self.diff_stderr + dt_allowance
    }
}

/// Checks E psi(X_t) - psi(x0) = E int_0^t (I psi - zeta psi')(X_r) dr.
pub fn dynkin_check(
    policy: &ControlPolicy,
    spec: &ProblemSpec,
    psi: TestFunction,
    table: &GeneratorTable,
    x0: f64,
    t: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<DynkinReport> {
    check_order(spec.s())?;
    if !(dt > 0.0 && t >= dt) || n_paths < 2 {
        return Err(Error::Validation("need dt > 0, t >= dt and at least two paths".into()));
    }
    let s = spec.s();
    let steps = (t / dt).round() as usize;
    let scale = dt.powf(0.5 / s);
    let a = 2.0 * s;
    let gen = |y: f64| table.i_psi(y) - policy.eval(spec, y) * psi.derivative(y);
    let per_path = crate::par::map_range(n_paths, |i| {
        let mut rng = path_rng(seed, i as u64);
        let mut y = x0;
        let mut acc = 0.0;
        for _ in 0..steps {
            // trapezoid in time on each step
            let g0 = gen(y);
            y += -policy.eval(spec, y) * dt + scale * standard_stable(a, &mut rng);
            acc += 0.5 * (g0 + gen(y)) * dt;
        }
        (psi.value(y) - psi.value(x0), acc)
    });
    let lhs: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = per_path.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = per_path.iter().map(|p| p.0 - p.1).collect();
    let (l, ls) = mean_stderr(&lhs);
    let (r, rs) = mean_stderr(&rhs);
    let (_, ds) = mean_stderr(&diff);
    Ok(DynkinReport { lhs: l, lhs_stderr: ls, rhs: r, rhs_stderr: rs, diff_stderr: ds, t, dt })
}

/// Empirical characteristic function E cos(xi X) of n increments over dt
/// with its standard error (the law is symmetric).
pub fn empirical_cf(s: f64, dt: f64, xi: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    check_order(s)?;
    let mut rng = path_rng(seed, 0);
    let mut out = [0.0];
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        sample_stable_increment(s, dt, &mut rng, &mut out)?;
        vals.push((xi * out[0]).cos());
    }
    Ok(mean_stderr(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_stable_laplace() {
        let s = 0.7;
        let mut rng = path_rng(3, 0);
        let n = 200_000;
        for lam in [0.5, 1.0, 2.0] {
            let v: Vec<f64> = (0..n).map(|_| (-lam * positive_stable(s, &mut rng)).exp()).collect();
            let (m, se) = mean_stderr(&v);
            let exact = (-(lam as f64).powf(s)).exp();
            assert!((m - exact).abs() < 4.0 * se + 1e-4, "lam {lam}: {m} vs {exact}");
        }
    }

    #[test]
    fn planar_cf() {
        let s = 0.8;
        let dt = 0.5;
        let mut rng = path_rng(11, 0);
        let mut out = [0.0; 2];
        let n = 200_000;
        let xi = [0.6, -0.8];
        let v: Vec<f64> = (0..n)
            .map(|_| {
                sample_stable_increment(s, dt, &mut rng, &mut out).unwrap();
                (xi[0] * out[0] + xi[1] * out[1]).cos()
            })
            .collect();
        let (m, se) = mean_stderr(&v);
        let exact = (-dt * 1.0f64.powf(2.0 * s)).exp();
        assert!((m - exact).abs() < 4.0 * se, "{m} vs {exact}");
    }

    #[test]
    fn reproducible_paths() {
        let spec = ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![6.0]).unwrap();
        let cfg = PathConfig { dt: 0.01, horizon: 2.0, n_paths: 4, seed: 9, x0: 0.0, return_radius: 1.0, burn_in: 0.2 };
        let a = simulate_paths(&ControlPolicy::constant(0.3), &spec, &cfg).unwrap();
        let b = simulate_paths(&ControlPolicy::constant(0.3), &spec, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cost_for_zero_data() {
        let spec = ProblemSpec::power_model(0.75, 2.0, 0.0, 0.0, vec![6.0]).unwrap();
        let cfg = PathConfig { dt: 0.01, horizon: 1.0, n_paths: 3, seed: 1, x0: 0.0, return_radius: 1.0, burn_in: 0.0 };
        for p in simulate_paths(&ControlPolicy::zero(), &spec, &cfg).unwrap() {
            assert_eq!(p.total_cost, 0.0);
        }
    }
}
