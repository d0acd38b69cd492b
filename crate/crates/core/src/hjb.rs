//! Truncated discounted problems alpha W + (-Delta)^s W + H(x, W') = f on
//! (-n, n), solved by Howard policy iteration on a monotone scheme.
//!
//! Grid layout: nodes x_k = (k - M - 2) h for k = 0..2M+4 with M = n/h. The
//! unknowns are the nodes with |x| < n (k = 3..=2M+1); the two pad nodes per
//! side plus everything beyond the grid form the exterior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{FarFieldModel, FarTable, GridFunction, UniformGrid};
use crate::operator::{KernelKind, Stencil};
use crate::problem::{HamiltonianSpec, ProblemSpec};
use crate::quad::power_symbol;
use crate::{par, Error, Result};

/// Exterior data outside the ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExteriorData {
    /// W = 0 outside, the truncated problem proper.
    Zero,
    Constant(f64),
    /// W = W(anchor) + g(|x|) outside, where g solves the one-dimensional
    /// discounted equation with a fitted nonlocal correction. Keeps the
    /// truncated solution close to the whole-line one.
    Continuation,
}

#[derive(Debug, Clone)]
pub struct DiscountedProblem {
    pub spec: ProblemSpec,
    pub alpha: f64,
    pub radius: f64,
    pub h: f64,
    pub exterior: ExteriorData,
    /// Extra source added to f at every grid node (comparison experiments).
    pub forcing: Option<Vec<f64>>,
}

impl DiscountedProblem {
    pub fn new(spec: &ProblemSpec, alpha: f64, radius: f64, h: f64) -> Result<Self> {
        let p = DiscountedProblem { spec: spec.clone(), alpha, radius, h, exterior: ExteriorData::Zero, forcing: None };
        p.check()?;
        Ok(p)
    }

    pub fn with_exterior(mut self, exterior: ExteriorData) -> Self {
        self.exterior = exterior;
        self
    }

    pub fn with_forcing(mut self, forcing: Vec<f64>) -> Result<Self> {
        if forcing.len() != self.grid()?.len {
            return Err(Error::Validation("forcing length differs from the grid".into()));
        }
        self.forcing = Some(forcing);
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if self.spec.dim != 1 {
            return Err(Error::Precondition("grid solves are one-dimensional".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Validation(format!("discount alpha = {} must be >= 0", self.alpha)));
        }
        if !(self.h > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Validation("radius and spacing must be positive".into()));
        }
        if self.cells() < 3 {
            return Err(Error::Validation("need at least 3 cells per half-ball".into()));
        }
        if (self.cells() as f64 * self.h - self.radius).abs() > 1e-9 * self.radius {
            return Err(Error::Validation(format!("radius {} is not a multiple of h = {}", self.radius, self.h)));
        }
        Ok(())
    }

    /// M = n / h.
    pub fn cells(&self) -> usize {
        (self.radius / self.h).round() as usize
    }

    pub fn grid(&self) -> Result<UniformGrid> {
        let m = self.cells();
        UniformGrid::new(-((m + 2) as f64) * self.h, self.h, 2 * m + 5)
    }

    /// Grid indices of the unknowns.
    pub fn unknowns(&self) -> std::ops::RangeInclusive<usize> {
        3..=(2 * self.cells() + 1)
    }

    /// Source at grid node k including the optional forcing.
    fn source_at(&self, grid: &UniformGrid, k: usize) -> f64 {
        self.spec.f1(grid.x(k)) + self.forcing.as_ref().map_or(0.0, |v| v[k])
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Candidate controls used to audit the policy (the policy update itself
    /// uses the exact maximizer).
    pub control_grid: Vec<f64>,
    pub tol_residual: f64,
    pub max_policy_iters: usize,
    /// Relative tolerance of the iterative linear solver.
    pub linear_tol: f64,
    /// Policy update xi <- (1 - damping) xi + damping xi_new.
    pub damping: f64,
    /// Outer iterations on the continuation anchors.
    pub max_outer_iters: usize,
    pub outer_tol: f64,
    /// Systems with more unknowns than this use the iterative solver.
    pub direct_limit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            control_grid: default_control_grid(),
            tol_residual: 1e-9,
            max_policy_iters: 100,
            linear_tol: 1e-13,
            damping: 1.0,
            max_outer_iters: 40,
            outer_tol: 1e-10,
            direct_limit: 4096,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<()> {
        if !self.control_grid.contains(&0.0) {
            return Err(Error::Validation("control grid must contain 0".into()));
        }
        if !(self.tol_residual > 0.0) || !(self.linear_tol > 0.0) || !(self.outer_tol > 0.0) {
            return Err(Error::Validation("tolerances must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Validation("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// 129 magnitudes log-spaced in [1e-4, 1e3], both signs, plus 0.
pub fn default_control_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    for k in 0..129 {
        let v = 10f64.powf(-4.0 + 7.0 * k as f64 / 128.0);
        g.push(v);
        g.push(-v);
    }
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub residual_sup: f64,
    pub policy_changes: usize,
}

#[derive(Debug, Clone)]
pub struct DiscreteSolution {
    pub w: GridFunction,
    /// Sup of the nonlinear residual over all unknowns.
    pub residual_norm: f64,
    /// Same over unknowns with |x| <= n - 1.
    pub residual_inner: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Control xi at each grid node (0 outside the ball).
    pub policy: Vec<f64>,
    pub log: Vec<IterationRecord>,
    pub alpha: f64,
    pub radius: f64,
    pub h: f64,
    pub tol: f64,
}

impl DiscreteSolution {
    /// Value at x = 0 (a grid node by construction).
    pub fn at_origin(&self) -> f64 {
        self.w.values[self.w.grid.len / 2]
    }

    pub fn to_csv(&self) -> String {
        self.w.to_csv_with_meta(&[
            ("alpha", crate::grid::e17(self.alpha)),
            ("n", crate::grid::e17(self.radius)),
            ("h", crate::grid::e17(self.h)),
            ("tol", crate::grid::e17(self.tol)),
            ("residual", crate::grid::e17(self.residual_norm)),
        ])
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("iter,residual_sup,policy_changes\n");
        for r in &self.log {
            out.push_str(&format!("{},{},{}\n", r.iter, crate::grid::e17(r.residual_sup), r.policy_changes));
        }
        out
    }
}

/// Operator rows and per-node data shared by every solve on one grid.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub grid: UniformGrid,
    pub stencil: Stencil,
    /// Grid part of I for each unknown: rows over all grid nodes.
    rows: Vec<Vec<f64>>,
    /// Kernel mass beyond the grid ends (left + right) for each unknown.
    tmass: Vec<(f64, f64)>,
    p_star: Vec<f64>,
    first: usize,
    ham: HamiltonianSpec,
}

impl Assembly {
    pub fn new(problem: &DiscountedProblem) -> Result<Assembly> {
        problem.check()?;
        let grid = problem.grid()?;
        let len = grid.len;
        let stencil = Stencil::new(&problem.spec.kernel, problem.h, len)?;
        let first = *problem.unknowns().start();
        let idx: Vec<usize> = problem.unknowns().collect();
        let rows = par::map_range(idx.len(), |r| {
            let mut row = vec![0.0; len];
            stencil.add_row(idx[r], len, 1.0, &mut row);
            row
        });
        let tmass = idx.iter().map(|&i| stencil.tail_masses(i, len)).collect();
        let ham = &problem.spec.hamiltonian;
        let p_star = (0..len).map(|k| ham.p_star1(grid.x(k))).collect();
        Ok(Assembly { grid, stencil, rows, tmass, p_star, first, ham: ham.clone() })
    }

    fn n_unknowns(&self) -> usize {
        self.rows.len()
    }
}

/// Zeroth-order part of the equation: alpha w for the discounted problem, an
/// unknown constant lambda (with w fixed to 0 at one unknown) for the
/// ergodic one.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Level {
    Discount(f64),
    /// lambda value, and the row index pinned to zero.
    Ergodic(f64, usize),
}

impl Level {
    fn alpha(&self) -> f64 {
        match self {
            Level::Discount(a) => *a,
            Level::Ergodic(..) => 0.0,
        }
    }

    fn lambda(&self) -> f64 {
        match self {
            Level::Discount(_) => 0.0,
            Level::Ergodic(l, _) => *l,
        }
    }
}

/// Exterior representation for one pass of the policy iteration: every
/// exterior node value is `anchor value + offset` (or `offset` alone).
struct ExteriorState {
    /// Offsets at grid nodes outside the ball.
    offset: Vec<f64>,
    /// Unknown position (row index) each exterior node is anchored to.
    anchor: Vec<Option<usize>>,
    /// Far integrals of the offsets, per unknown.
    far_const: Vec<f64>,
    /// Far-integral coefficients of the (left, right) anchors, per unknown.
    far_anchor: Vec<(f64, f64)>,
    far: Option<(FarTable, FarTable)>,
}

pub fn solve_dirichlet(problem: &DiscountedProblem, config: &SolverConfig) -> Result<DiscreteSolution> {
    let asm = Assembly::new(problem)?;
    solve_with(&asm, problem, config, None)
}

/// Policy iteration with a prepared assembly and an optional initial guess
/// (values on the problem grid).
/// Passes after which the exterior tail fit is frozen regardless.
const FIT_PASSES: usize = 10;

pub fn solve_with(
    asm: &Assembly,
    problem: &DiscountedProblem,
    config: &SolverConfig,
    init: Option<&[f64]>,
) -> Result<DiscreteSolution> {
    config.check()?;
    problem.check()?;
    let grid = asm.grid;
    if grid != problem.grid()? {
        return Err(Error::Precondition("assembly built for another grid".into()));
    }
    let len = grid.len;
    let nu = asm.n_unknowns();
    let first = asm.first;
    let alpha = problem.alpha;
    let h = problem.h;
    let fx: Vec<f64> = (0..len).map(|k| problem.source_at(&grid, k)).collect();

    let mut u = vec![0.0; nu];
    if let Some(v) = init {
        if v.len() != len {
            return Err(Error::Validation("initial guess length differs from the grid".into()));
        }
        u.copy_from_slice(&v[first..first + nu]);
    }
    let mut xi = vec![f64::NAN; nu];
    let mut log = Vec::new();
    let mut iter = 0;
    let mut last_res = f64::INFINITY;
    let mut outer = 0;
    // the tables depend on the anchor values through the discount term; the
    // anchors fed to them solve a_out(a_in) = a_in by a per-side secant
    let mut anchors = (u[0], u[nu - 1]);
    let mut secant: Option<((f64, f64), (f64, f64))> = None;
    let mut fits = None;
    let mut frozen = false;
    let mut ext;
    loop {
        // the tail fit is refreshed until the anchors settle, then frozen so
        // the remaining anchor iteration is a smooth contraction
        if !frozen {
            fits = None;
        }
        ext = exterior_state(asm, problem, &u, anchors, &mut fits, Level::Discount(alpha))?;
        let mut converged = false;
        let pass_start = log.len();
        for _ in 0..config.max_policy_iters {
            let ue = expand(&u, &ext, first);
            let (res, cand) = residual_and_policy(asm, problem, &ue, &ext, &u, &fx, Level::Discount(alpha));
            last_res = res.iter().fold(0.0f64, |a, r| a.max(r.abs()));
            let mut changes = 0;
            let window = (log.len() - pass_start).min(3);
            let prev_res = log[log.len() - window..]
                .iter()
                .map(|r: &IterationRecord| r.residual_sup)
                .fold(f64::INFINITY, f64::min);
            for r in 0..nu {
                let new =
                    if xi[r].is_nan() { cand[r] } else { (1.0 - config.damping) * xi[r] + config.damping * cand[r] };
                if xi[r].is_nan() || (new - xi[r]).abs() > 1e-12 * (1.0 + xi[r].abs()) {
                    changes += 1;
                }
                xi[r] = new;
            }
            log.push(IterationRecord { iter, residual_sup: last_res, policy_changes: changes });
            iter += 1;
            if !last_res.is_finite() {
                return Err(Error::Solver(format!("residual became non-finite at iteration {iter}")));
            }
            // accept a roundoff floor: the residual has not halved over the
            // last three iterations and is within a factor 100 of the tolerance
            let stalled = last_res >= 0.5 * prev_res && last_res < 100.0 * config.tol_residual;
            if last_res < config.tol_residual || stalled {
                converged = true;
                break;
            }
            u = linear_solve(asm, config, &ext, &xi, &fx, Level::Discount(alpha))?;
        }
        if !converged {
            return Err(Error::Solver(format!(
                "policy iteration did not converge in {} iterations (last residual {last_res:.3e})",
                config.max_policy_iters
            )));
        }
        outer += 1;
        if problem.exterior != ExteriorData::Continuation {
            break;
        }
        let out = (u[0], u[nu - 1]);
        let g = (out.0 - anchors.0, out.1 - anchors.1);
        let d = g.0.abs().max(g.1.abs());
        let scale = 1.0 + out.0.abs().max(out.1.abs());
        if d < 1e-6 * scale || outer >= FIT_PASSES {
            frozen = true;
        }
        if d < config.outer_tol * scale {
            break;
        }
        let step = |a: f64, g: f64, prev: Option<(f64, f64)>| match prev {
            Some((ap, gp)) if (g - gp).abs() > 1e-14 * (1.0 + g.abs()) && a != ap => {
                let slope = (g - gp) / (a - ap);
                if slope.abs() > 1e-3 {
                    a - g / slope
                } else {
                    a + g
                }
            }
            _ => a + g,
        };
        let next = (
            step(anchors.0, g.0, secant.map(|(a, gp)| (a.0, gp.0))),
            step(anchors.1, g.1, secant.map(|(a, gp)| (a.1, gp.1))),
        );
        secant = Some((anchors, g));
        anchors = next;
        if outer >= config.max_outer_iters {
            return Err(Error::Solver(format!(
                "exterior continuation did not settle in {outer} passes (anchor change {d:.3e})"
            )));
        }
    }

    let values = expand(&u, &ext, first);
    let far = match (&problem.exterior, &ext.far) {
        (ExteriorData::Zero, _) => FarFieldModel::Zero,
        (ExteriorData::Constant(c), _) => FarFieldModel::Constant(*c),
        (ExteriorData::Continuation, Some((l, r))) => {
            FarFieldModel::Tabulated { left: shift_table(l, u[0]), right: shift_table(r, u[nu - 1]) }
        }
        _ => unreachable!("continuation exterior always carries tables"),
    };
    let w = GridFunction::new(grid, values, far)?;
    let res = residual_values(asm, problem, &w, Level::Discount(alpha))?;
    let inner_lim = problem.radius - 1.0 + 1e-9;
    let mut residual_inner = 0.0f64;
    let mut residual_norm = 0.0f64;
    for k in problem.unknowns() {
        residual_norm = residual_norm.max(res[k].abs());
        if grid.x(k).abs() <= inner_lim {
            residual_inner = residual_inner.max(res[k].abs());
        }
    }
    let mut policy = vec![0.0; len];
    policy[first..first + nu].copy_from_slice(&xi);
    Ok(DiscreteSolution {
        w,
        residual_norm,
        residual_inner,
        iterations: iter,
        outer_iterations: outer,
        policy,
        log,
        alpha,
        radius: problem.radius,
        h,
        tol: config.tol_residual,
    })
}

#[derive(Debug, Clone)]
pub struct ErgodicSolution {
    /// Zero at the pinned node; exterior continued by H(x, u') = f + iota - lambda.
    pub u: GridFunction,
    pub lambda: f64,
    pub residual_norm: f64,
    pub residual_inner: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub policy: Vec<f64>,
    pub log: Vec<IterationRecord>,
}

/// Policy iteration for the truncated ergodic problem
/// lambda - I u + H_G(x, D u) = f, u(x_pin) = 0, started from a full-grid
/// guess (typically a discounted solution) and a lambda estimate. With the
/// continuation exterior, the level in the exterior law is iterated to a
/// fixed point by secant steps. `problem.alpha` is ignored.
pub fn solve_ergodic(
    asm: &Assembly,
    problem: &DiscountedProblem,
    config: &SolverConfig,
    init: &[f64],
    lambda0: f64,
    pin: usize,
) -> Result<ErgodicSolution> {
    config.check()?;
    problem.check()?;
    let grid = asm.grid;
    if grid != problem.grid()? {
        return Err(Error::Precondition("assembly built for another grid".into()));
    }
    let len = grid.len;
    let nu = asm.n_unknowns();
    let first = asm.first;
    if init.len() != len {
        return Err(Error::Validation("initial guess length differs from the grid".into()));
    }
    if pin < first || pin >= first + nu {
        return Err(Error::Validation("pinned node must be an unknown".into()));
    }
    let pr = pin - first;
    let fx: Vec<f64> = (0..len).map(|k| problem.source_at(&grid, k)).collect();
    let mut u: Vec<f64> = init[first..first + nu].iter().map(|v| v - init[pin]).collect();
    let mut lambda = lambda0;
    let mut table_level = lambda0;
    let mut secant: Option<(f64, f64)> = None;
    let mut xi = vec![f64::NAN; nu];
    let mut log = Vec::new();
    let mut iter = 0;
    let mut outer = 0;
    let mut fits = None;
    let mut frozen = false;
    let mut ext;
    loop {
        if !frozen {
            fits = None;
        }
        ext = exterior_state(asm, problem, &u, (0.0, 0.0), &mut fits, Level::Ergodic(table_level, pr))?;
        let mut converged = false;
        let mut last_res = f64::INFINITY;
        let pass_start = log.len();
        for _ in 0..config.max_policy_iters {
            let ue = expand(&u, &ext, first);
            let (res, cand) = residual_and_policy(asm, problem, &ue, &ext, &u, &fx, Level::Ergodic(lambda, pr));
            last_res = res.iter().fold(0.0f64, |a, r| a.max(r.abs()));
            let window = (log.len() - pass_start).min(3);
            let prev_res = log[log.len() - window..]
                .iter()
                .map(|r: &IterationRecord| r.residual_sup)
                .fold(f64::INFINITY, f64::min);
            let mut changes = 0;
            for r in 0..nu {
                if xi[r].is_nan() || (cand[r] - xi[r]).abs() > 1e-12 * (1.0 + xi[r].abs()) {
                    changes += 1;
                }
                xi[r] = cand[r];
            }
            log.push(IterationRecord { iter, residual_sup: last_res, policy_changes: changes });
            iter += 1;
            if !last_res.is_finite() {
                return Err(Error::Solver(format!("residual became non-finite at iteration {iter}")));
            }
            let stalled = last_res >= 0.5 * prev_res && last_res < 100.0 * config.tol_residual;
            if last_res < config.tol_residual || stalled {
                converged = true;
                break;
            }
            let mut v = linear_solve(asm, config, &ext, &xi, &fx, Level::Ergodic(lambda, pr))?;
            lambda = v[pr];
            v[pr] = 0.0;
            u = v;
        }
        if !converged {
            return Err(Error::Solver(format!(
                "ergodic policy iteration did not converge in {} iterations (last residual {last_res:.3e})",
                config.max_policy_iters
            )));
        }
        outer += 1;
        if problem.exterior != ExteriorData::Continuation {
            break;
        }
        let g = lambda - table_level;
        let scale = 1.0 + lambda.abs();
        if g.abs() < 1e-6 * scale || outer >= FIT_PASSES {
            frozen = true;
        }
        if g.abs() < config.outer_tol * scale {
            break;
        }
        if outer >= config.max_outer_iters {
            return Err(Error::Solver(format!(
                "ergodic exterior level did not settle in {outer} passes (change {:.3e})",
                g.abs()
            )));
        }
        let next = match secant {
            Some((ap, gp)) if (g - gp).abs() > 1e-14 * scale && table_level != ap => {
                let slope = (g - gp) / (table_level - ap);
                if slope.abs() > 1e-3 {
                    table_level - g / slope
                } else {
                    lambda
                }
            }
            _ => lambda,
        };
        secant = Some((table_level, g));
        table_level = next;
    }
    let values = expand(&u, &ext, first);
    let far = match (&problem.exterior, &ext.far) {
        (ExteriorData::Zero, _) => FarFieldModel::Zero,
        (ExteriorData::Constant(c), _) => FarFieldModel::Constant(*c),
        (ExteriorData::Continuation, Some((l, r))) => {
            FarFieldModel::Tabulated { left: shift_table(l, u[0]), right: shift_table(r, u[nu - 1]) }
        }
        _ => unreachable!("continuation exterior always carries tables"),
    };
    let w = GridFunction::new(grid, values, far)?;
    let res = residual_values(asm, problem, &w, Level::Ergodic(lambda, pr))?;
    let inner_lim = problem.radius - 1.0 + 1e-9;
    let mut residual_inner = 0.0f64;
    let mut residual_norm = 0.0f64;
    for k in problem.unknowns() {
        residual_norm = residual_norm.max(res[k].abs());
        if grid.x(k).abs() <= inner_lim {
            residual_inner = residual_inner.max(res[k].abs());
        }
    }
    let mut policy = vec![0.0; len];
    policy[first..first + nu].copy_from_slice(&xi);
    Ok(ErgodicSolution {
        u: w,
        lambda,
        residual_norm,
        residual_inner,
        iterations: iter,
        outer_iterations: outer,
        policy,
        log,
    })
}

fn shift_table(t: &FarTable, c: f64) -> FarTable {
    FarTable { z: t.z.clone(), values: t.values.iter().map(|v| v + c).collect(), tail_beta: t.tail_beta }
}

/// Full grid vector from the unknowns and the exterior state.
fn expand(u: &[f64], ext: &ExteriorState, first: usize) -> Vec<f64> {
    let len = ext.offset.len();
    let mut ue = vec![0.0; len];
    for k in 0..len {
        if k >= first && k < first + u.len() {
            ue[k] = u[k - first];
        } else {
            ue[k] = ext.offset[k] + ext.anchor[k].map_or(0.0, |a| u[a]);
        }
    }
    ue
}

/// Godunov value H_G and the maximizing control at node k.
fn godunov(problem: &DiscountedProblem, asm: &Assembly, ue: &[f64], k: usize) -> (f64, f64) {
    let h = problem.h;
    let dm = (ue[k] - ue[k - 1]) / h;
    let dp = (ue[k + 1] - ue[k]) / h;
    godunov_hamiltonian(&problem.spec.hamiltonian, asm.grid.x(k), dm, dp, asm.p_star[k])
}

/// Osher-Sethian flux for a convex H with minimizer p*: the larger of
/// H(max(D-, p*)) and H(min(D+, p*)), with the control grad_p H at the
/// selected slope (ties go to the smaller |control|).
pub fn godunov_hamiltonian(ham: &HamiltonianSpec, x: f64, dm: f64, dp: f64, p_star: f64) -> (f64, f64) {
    let pl = dm.max(p_star);
    let pr = dp.min(p_star);
    let hl = ham.h1(x, pl);
    let hr = ham.h1(x, pr);
    let (gl, gr) = (ham.grad1(x, pl), ham.grad1(x, pr));
    if hl > hr || (hl == hr && gl.abs() <= gr.abs()) {
        (hl, gl)
    } else {
        (hr, gr)
    }
}

/// I u at each unknown (row index r) from the expanded vector.
fn operator_values(asm: &Assembly, ue: &[f64], ext: &ExteriorState, u: &[f64]) -> Vec<f64> {
    let nu = asm.n_unknowns();
    let first = asm.first;
    par::map_range(nu, |r| {
        let row = &asm.rows[r];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(ue) {
            acc += a * b;
        }
        let (tl, tr) = asm.tmass[r];
        let (al, ar) = ext.far_anchor[r];
        acc - (tl + tr) * ue[first + r] + ext.far_const[r] + al * u[0] + ar * u[nu - 1]
    })
}

fn residual_and_policy(
    asm: &Assembly,
    problem: &DiscountedProblem,
    ue: &[f64],
    ext: &ExteriorState,
    u: &[f64],
    fx: &[f64],
    level: Level,
) -> (Vec<f64>, Vec<f64>) {
    let iu = operator_values(asm, ue, ext, u);
    let first = asm.first;
    let mut res = vec![0.0; u.len()];
    let mut pol = vec![0.0; u.len()];
    for r in 0..u.len() {
        let k = first + r;
        let (hg, xi) = godunov(problem, asm, ue, k);
        res[r] = level.alpha() * ue[k] + level.lambda() - iu[r] + hg - fx[k];
        pol[r] = xi;
    }
    (res, pol)
}

/// Solves the linear problem for a fixed policy.
/// In the ergodic case the pinned unknown's column carries lambda, which is
/// returned in that slot.
fn linear_solve(
    asm: &Assembly,
    config: &SolverConfig,
    ext: &ExteriorState,
    xi: &[f64],
    fx: &[f64],
    level: Level,
) -> Result<Vec<f64>> {
    let nu = asm.n_unknowns();
    let first = asm.first;
    let len = asm.grid.len;
    let h = asm.grid.h;
    let ham = &asm.ham;
    let mut b = DMatrix::<f64>::zeros(nu, nu);
    let mut rhs = DVector::<f64>::zeros(nu);
    let mut coef = vec![0.0; len];
    for r in 0..nu {
        let k = first + r;
        let x = asm.grid.x(k);
        for (c, a) in coef.iter_mut().zip(&asm.rows[r]) {
            *c = -a;
        }
        // upwind gradient against the drift
        let q = xi[r] / h;
        if xi[r] > 0.0 {
            coef[k] += q;
            coef[k - 1] -= q;
        } else if xi[r] < 0.0 {
            coef[k + 1] += q;
            coef[k] -= q;
        }
        let mut rr = fx[k] + ham.lagrangian1(x, xi[r]) + ext.far_const[r];
        for (j, c) in coef.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            if j >= first && j < first + nu {
                b[(r, j - first)] += c;
            } else {
                rr -= c * ext.offset[j];
                if let Some(a) = ext.anchor[j] {
                    b[(r, a)] += c;
                }
            }
        }
        let (tl, tr) = asm.tmass[r];
        b[(r, r)] += level.alpha() + tl + tr;
        let (al, ar) = ext.far_anchor[r];
        b[(r, 0)] -= al;
        b[(r, nu - 1)] -= ar;
        rhs[r] = rr;
    }
    if let Level::Ergodic(_, pin) = level {
        b.column_mut(pin).fill(1.0);
    }
    if nu <= config.direct_limit {
        let lu = b.clone().lu();
        let singular = || Error::Solver("singular policy system: the scheme lost monotonicity".into());
        let mut v = lu.solve(&rhs).ok_or_else(singular)?;
        // small alpha makes the system ill-conditioned; two refinement steps
        // bring the residual back to the evaluation roundoff
        for _ in 0..2 {
            let r = &rhs - &b * &v;
            v += lu.solve(&r).ok_or_else(singular)?;
        }
        if v.iter().any(|a| !a.is_finite()) {
            return Err(singular());
        }
        Ok(v.iter().copied().collect())
    } else {
        bicgstab_jacobi(&b, &rhs, config.linear_tol, 20 * nu)
    }
}

/// BiCGSTAB with diagonal preconditioning.
pub fn bicgstab_jacobi(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let dinv: Vec<f64> = (0..n).map(|i| 1.0 / a[(i, i)]).collect();
    if dinv.iter().any(|d| !d.is_finite()) {
        return Err(Error::Solver("zero diagonal in the policy system".into()));
    }
    let prec = |v: &DVector<f64>| DVector::from_iterator(n, v.iter().zip(&dinv).map(|(a, d)| a * d));
    let mut x = DVector::<f64>::zeros(n);
    let mut r = b - a * &x;
    let r0 = r.clone();
    let bnorm = b.norm().max(1e-300);
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = DVector::<f64>::zeros(n);
    let mut p = DVector::<f64>::zeros(n);
    for _ in 0..max_iter {
        let rho_new = r0.dot(&r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        p = &r + beta * (&p - omega * &v);
        let y = prec(&p);
        v = a * &y;
        alpha = rho_new / r0.dot(&v);
        let s = &r - alpha * &v;
        let z = prec(&s);
        let t = a * &z;
        omega = t.dot(&s) / t.dot(&t).max(1e-300);
        x += alpha * &y + omega * &z;
        r = &s - omega * &t;
        rho = rho_new;
        if r.norm() <= tol * bnorm {
            return Ok(x.iter().copied().collect());
        }
    }
    Err(Error::Solver(format!("BiCGSTAB stalled at relative residual {:.3e}", r.norm() / bnorm)))
}

fn exterior_state(
    asm: &Assembly,
    problem: &DiscountedProblem,
    u: &[f64],
    anchors: (f64, f64),
    fits: &mut Option<[(f64, f64); 2]>,
    level: Level,
) -> Result<ExteriorState> {
    let len = asm.grid.len;
    let nu = asm.n_unknowns();
    let first = asm.first;
    let mut offset = vec![0.0; len];
    let mut anchor = vec![None; len];
    let mut far_const = vec![0.0; nu];
    let mut far_anchor = vec![(0.0, 0.0); nu];
    let mut far = None;
    match problem.exterior {
        ExteriorData::Zero => {}
        ExteriorData::Constant(c) => {
            for (k, o) in offset.iter_mut().enumerate() {
                if k < first || k >= first + nu {
                    *o = c;
                }
            }
            for r in 0..nu {
                let (tl, tr) = asm.tmass[r];
                far_const[r] = c * (tl + tr);
            }
        }
        ExteriorData::Continuation => {
            let (left, right) = continuation_tables(asm, problem, u, anchors, fits, level)?;
            for k in 0..len {
                if k < first {
                    offset[k] = left.value(-asm.grid.x(k));
                    anchor[k] = Some(0);
                } else if k >= first + nu {
                    offset[k] = right.value(asm.grid.x(k));
                    anchor[k] = Some(nu - 1);
                }
            }
            let ones = |t: &FarTable| FarTable { z: t.z.clone(), values: vec![1.0; t.z.len()], tail_beta: 0.0 };
            let g_far = FarFieldModel::Tabulated { left: left.clone(), right: right.clone() };
            let one_far = FarFieldModel::Tabulated { left: ones(&left), right: ones(&right) };
            let zero_vals = vec![0.0; len];
            let gf_g = GridFunction { grid: asm.grid, values: zero_vals.clone(), far: g_far };
            let gf_1 = GridFunction { grid: asm.grid, values: zero_vals, far: one_far };
            let st = &asm.stencil;
            let h = problem.h;
            let vals = par::map_range(nu, |r| {
                let k = first + r;
                let x = asm.grid.x(k);
                let yr = (len - 1 - k) as f64 * h;
                let yl = k as f64 * h;
                let c = st.far_integral(&gf_g, x, yr, 1.0)? + st.far_integral(&gf_g, x, yl, -1.0)?;
                let al = st.far_integral(&gf_1, x, yl, -1.0)?;
                let ar = st.far_integral(&gf_1, x, yr, 1.0)?;
                Ok::<_, Error>((c, al, ar))
            });
            for (r, v) in vals.into_iter().enumerate() {
                let (c, al, ar) = v?;
                far_const[r] = c;
                far_anchor[r] = (al, ar);
            }
            far = Some((left, right));
        }
    }
    Ok(ExteriorState { offset, anchor, far_const, far_anchor, far })
}

/// Offsets g(|x|) - per side, relative to the anchor value - for the
/// continuation exterior: RK4 on alpha w + H(x, w') = f + iota on a
/// logarithmic grid from the last unknown out to 1e8 times its radius.
fn continuation_tables(
    asm: &Assembly,
    problem: &DiscountedProblem,
    u: &[f64],
    anchors: (f64, f64),
    fits: &mut Option<[(f64, f64); 2]>,
    level: Level,
) -> Result<(FarTable, FarTable)> {
    let nu = u.len();
    let first = asm.first;
    let grid = asm.grid;
    let z0 = grid.x(first + nu - 1);
    let fit = *fits.get_or_insert_with(|| {
        [tail_fit(problem, &grid, first, u, -1.0, z0), tail_fit(problem, &grid, first, u, 1.0, z0)]
    });
    match level {
        Level::Discount(alpha) => exterior_tables(&problem.spec, z0, anchors, fit, |w| alpha * w),
        Level::Ergodic(lambda, _) => exterior_tables(&problem.spec, z0, anchors, fit, |_| lambda),
    }
}

/// Far tables g(|x|) per side (relative to the anchor values) from RK4 on
/// H(x, w') = f + iota - lower(w) over r in [z0, 1e8 z0] on a logarithmic
/// grid. `lower(w)` is alpha w for discounted problems and lambda for the
/// ergodic one; `fit` holds the (a, beta) tail laws of the left and right
/// sides for iota.
pub fn exterior_tables<L: Fn(f64) -> f64>(
    spec: &ProblemSpec,
    z0: f64,
    anchors: (f64, f64),
    fit: [(f64, f64); 2],
    lower: L,
) -> Result<(FarTable, FarTable)> {
    let s = spec.s();
    let ham = &spec.hamiltonian;
    let npts = 4000;
    let z: Vec<f64> = (0..npts).map(|k| z0 * 10f64.powf(8.0 * k as f64 / (npts - 1) as f64)).collect();
    let mut tables = Vec::with_capacity(2);
    for (side, fit, w0) in [(-1.0f64, fit[0], anchors.0), (1.0, fit[1], anchors.1)] {
        let iota = iota_fn(fit, s);
        let rhs = |r: f64, w: f64| {
            let x = side * r;
            let level = spec.f1(x) + iota(r) - lower(w);
            side * ham.invert_branch1(x, level, side > 0.0)
        };
        let mut w = vec![w0; npts];
        for k in 0..npts - 1 {
            let (r, dz, wk) = (z[k], z[k + 1] - z[k], w[k]);
            let k1 = rhs(r, wk);
            let k2 = rhs(r + 0.5 * dz, wk + 0.5 * dz * k1);
            let k3 = rhs(r + 0.5 * dz, wk + 0.5 * dz * k2);
            let k4 = rhs(r + dz, wk + dz * k3);
            w[k + 1] = wk + dz * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
        }
        let g: Vec<f64> = w.iter().map(|v| v - w0).collect();
        // flat beyond the table (radius 1e8 z0): keeps the anchored table
        // linear in the anchor; the neglected kernel mass is ~1e-12 relative
        tables.push(FarTable::new(z.clone(), g, 0.0)?);
    }
    let right = tables.pop().unwrap();
    let left = tables.pop().unwrap();
    Ok((left, right))
}

/// Far-field growth exponent 1 + gamma/m of solutions: |u'|^m/m ~ f ~ |x|^gamma
/// at infinity. Clamped below 2s.
pub fn growth_exponent(spec: &ProblemSpec) -> f64 {
    (1.0 + spec.source.gamma() / spec.m()).min(2.0 * spec.s() - 0.02)
}

/// Fitted tail law (a, beta) of the current solution: least squares
/// c + a r^beta on [0.6 z0, z0] with beta from `growth_exponent`. a = 0
/// when the fit is not increasing or the kernel is not the fractional
/// Laplacian.
fn tail_fit(
    problem: &DiscountedProblem,
    grid: &UniformGrid,
    first: usize,
    u: &[f64],
    side: f64,
    z0: f64,
) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = u.iter().enumerate().map(|(r, v)| (grid.x(first + r) * side, *v)).collect();
    side_tail_fit(&problem.spec, &pts, z0)
}

/// Tail law (a, beta) from (radius, value) samples of one side, using the
/// samples with radius in [0.6 z0, z0].
pub fn side_tail_fit(spec: &ProblemSpec, samples: &[(f64, f64)], z0: f64) -> (f64, f64) {
    let pts: Vec<(f64, f64)> =
        samples.iter().copied().filter(|(r, _)| *r >= 0.6 * z0 - 1e-12 && *r <= z0 + 1e-12).collect();
    let fit = if matches!(spec.kernel.kind, KernelKind::FractionalLaplacian) && pts.len() >= 4 {
        let beta = growth_exponent(spec);
        fit_power(&pts, beta, beta)
    } else {
        None
    };
    match fit {
        Some((_, a, beta)) if a > 0.0 => (a, beta),
        _ => (0.0, 1.0),
    }
}

/// iota(r) = -a C(beta, s) r^{beta - 2s}: the fractional Laplacian of the
/// fitted power law, moved to the right-hand side of the exterior ODE.
fn iota_fn(fit: (f64, f64), s: f64) -> impl Fn(f64) -> f64 {
    let (a, beta) = fit;
    let c = if a > 0.0 { power_symbol(beta, s) } else { 0.0 };
    move |r: f64| if a > 0.0 { -a * c * r.powf(beta - 2.0 * s) } else { 0.0 }
}

/// Least-squares fit v = c + a r^beta: a beta scan with step 0.005 followed
/// by golden-section refinement, so the fit depends continuously on the data.
/// Returns (c, a, beta).
pub fn fit_power(pts: &[(f64, f64)], beta_lo: f64, beta_hi: f64) -> Option<(f64, f64, f64)> {
    let solve = |beta: f64| {
        let n = pts.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for (r, v) in pts {
            let t = r.powf(beta);
            sx += t;
            sy += v;
            sxx += t * t;
            sxy += t * v;
        }
        let det = n * sxx - sx * sx;
        if det.abs() < 1e-300 {
            return None;
        }
        let a = (n * sxy - sx * sy) / det;
        let c = (sy - a * sx) / n;
        let err: f64 = pts.iter().map(|(r, v)| (c + a * r.powf(beta) - v).powi(2)).sum();
        Some((err, c, a))
    };
    let mut best: Option<(f64, f64)> = None;
    let steps = ((beta_hi - beta_lo) / 0.005).floor() as usize;
    for k in 0..=steps {
        let beta = beta_lo + 0.005 * k as f64;
        if let Some((err, _, _)) = solve(beta) {
            if best.is_none_or(|b| err < b.0) {
                best = Some((err, beta));
            }
        }
    }
    let (_, b0) = best?;
    let err_at = |b: f64| solve(b).map_or(f64::INFINITY, |v| v.0);
    let (mut lo, mut hi) = ((b0 - 0.005).max(beta_lo), (b0 + 0.005).min(beta_hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut e1, mut e2) = (err_at(x1), err_at(x2));
    while hi - lo > 1e-9 {
        if e1 <= e2 {
            hi = x2;
            x2 = x1;
            e2 = e1;
            x1 = hi - g * (hi - lo);
            e1 = err_at(x1);
        } else {
            lo = x1;
            x1 = x2;
            e1 = e2;
            x2 = lo + g * (hi - lo);
            e2 = err_at(x2);
        }
    }
    let beta = 0.5 * (lo + hi);
    let (_, c, a) = solve(beta)?;
    Some((c, a, beta))
}

/// Full-grid residual of the discrete equation for a grid function on the
/// problem grid; unknown nodes only, zero elsewhere.
fn residual_values(asm: &Assembly, problem: &DiscountedProblem, gf: &GridFunction, level: Level) -> Result<Vec<f64>> {
    let len = asm.grid.len;
    let idx: Vec<usize> = problem.unknowns().collect();
    let vals = par::map_range(idx.len(), |r| {
        let k = idx[r];
        let iu = asm.stencil.apply(gf, k)?;
        let (hg, _) = godunov(problem, asm, &gf.values, k);
        Ok::<_, Error>(level.alpha() * gf.values[k] + level.lambda() - iu + hg - problem.source_at(&asm.grid, k))
    });
    let mut out = vec![0.0; len];
    for (r, v) in vals.into_iter().enumerate() {
        out[idx[r]] = v?;
    }
    Ok(out)
}

/// alpha u - I u + H_G(x, D u) - f at every unknown (zero at other nodes).
/// Uses the far-field model of `gf` for the nonlocal tails.
pub fn residual(problem: &DiscountedProblem, gf: &GridFunction) -> Result<GridFunction> {
    let asm = Assembly::new(problem)?;
    if gf.grid != asm.grid {
        return Err(Error::Precondition("grid function is not on the problem grid".into()));
    }
    let vals = residual_values(&asm, problem, gf, Level::Discount(problem.alpha))?;
    GridFunction::new(asm.grid, vals, FarFieldModel::Zero)
}

/// Discrete operator F_k(u) = alpha u_k - I u_k + H_G - f at node k for a
/// grid function; exposed for monotonicity audits.
pub fn discrete_operator(asm: &Assembly, problem: &DiscountedProblem, gf: &GridFunction, k: usize) -> Result<f64> {
    let iu = asm.stencil.apply(gf, k)?;
    let (hg, _) = godunov(problem, asm, &gf.values, k);
    Ok(problem.alpha * gf.values[k] - iu + hg - problem.source_at(&asm.grid, k))
}

/// Largest amount by which the best control on the audit grid beats the
/// returned policy, over unknowns: max_k [max_c (c D_c u - l(c)) - (xi D_xi u - l(xi))].
pub fn policy_optimality_gap(problem: &DiscountedProblem, sol: &DiscreteSolution, controls: &[f64]) -> f64 {
    let ham = &problem.spec.hamiltonian;
    let g = &sol.w.grid;
    let h = problem.h;
    let v = &sol.w.values;
    let value = |k: usize, c: f64| {
        let x = g.x(k);
        let d = if c > 0.0 {
            (v[k] - v[k - 1]) / h
        } else if c < 0.0 {
            (v[k + 1] - v[k]) / h
        } else {
            0.0
        };
        c * d - ham.lagrangian1(x, c)
    };
    let mut gap = f64::NEG_INFINITY;
    for k in problem.unknowns() {
        let own = value(k, sol.policy[k]);
        let best = controls.iter().map(|c| value(k, *c)).fold(f64::NEG_INFINITY, f64::max);
        gap = gap.max(best - own);
    }
    gap
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub trials: usize,
    /// (trial, node, sub - super) for every ordering violation.
    pub violations: Vec<(usize, usize, f64)>,
    /// Smallest super - sub over all trials and nodes.
    pub min_gap: f64,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random ordered data pairs on tiny grids: the solution with the smaller
/// source and exterior must stay below the other one.
pub fn check_discrete_comparison(problem: &DiscountedProblem, trials: usize, seed: u64) -> Result<ComparisonReport> {
    let grid = problem.grid()?;
    if grid.len > 64 {
        return Err(Error::Precondition(format!("comparison check needs <= 64 nodes, got {}", grid.len)));
    }
    let asm = Assembly::new(problem)?;
    let config = SolverConfig { tol_residual: 1e-11, ..SolverConfig::default() };
    let mut violations = Vec::new();
    let mut min_gap = f64::INFINITY;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let base: Vec<f64> = (0..grid.len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bump: Vec<f64> = (0..grid.len).map(|_| rng.random_range(0.0..1.0) * rng.random_range(0.0..1.0)).collect();
        let c_sub = rng.random_range(0.0..1.0);
        let c_sup = c_sub + rng.random_range(0.0..0.5);
        let sub = problem.clone().with_exterior(ExteriorData::Constant(c_sub)).with_forcing(base.clone())?;
        let sup_force: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let sup = problem.clone().with_exterior(ExteriorData::Constant(c_sup)).with_forcing(sup_force)?;
        let a = solve_with(&asm, &sub, &config, None)?;
        let b = solve_with(&asm, &sup, &config, None)?;
        for k in 0..grid.len {
            let d = a.w.values[k] - b.w.values[k];
            min_gap = min_gap.min(-d);
            if d > 1e-8 {
                violations.push((t, k, d));
            }
        }
    }
    Ok(ComparisonReport { trials, violations, min_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(alpha: f64) -> DiscountedProblem {
        let spec = ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![4.0]).unwrap();
        DiscountedProblem::new(&spec, alpha, 4.0, 0.25).unwrap()
    }

    #[test]
    fn zero_source_gives_zero() {
        let spec = ProblemSpec::power_model(0.75, 2.0, 0.0, 0.0, vec![4.0]).unwrap();
        let p = DiscountedProblem::new(&spec, 0.3, 4.0, 0.5).unwrap();
        let sol = solve_dirichlet(&p, &SolverConfig::default()).unwrap();
        assert!(sol.w.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn converges_and_nonnegative() {
        let p = small(0.2);
        let sol = solve_dirichlet(&p, &SolverConfig::default()).unwrap();
        assert!(sol.residual_norm < 1e-9, "{}", sol.residual_norm);
        assert!(sol.w.values.iter().all(|v| *v >= -1e-10));
        assert!(sol.iterations < 30);
    }

    #[test]
    fn continuation_self_consistent() {
        let p = small(0.1).with_exterior(ExteriorData::Continuation);
        let sol = solve_dirichlet(&p, &SolverConfig::default()).unwrap();
        assert!(sol.residual_norm < 1e-9, "{}", sol.residual_norm);
        let r = residual(&p, &sol.w).unwrap();
        let sup = r.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(sup < 1e-8, "{sup}");
    }

    #[test]
    fn iterative_matches_direct() {
        let p = small(0.2);
        let direct = solve_dirichlet(&p, &SolverConfig::default()).unwrap();
        let cfg = SolverConfig { direct_limit: 4, ..SolverConfig::default() };
        let iter = solve_dirichlet(&p, &cfg).unwrap();
        for (a, b) in direct.w.values.iter().zip(&iter.w.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn control_grid_shape() {
        let g = default_control_grid();
        assert_eq!(g.len(), 259);
        assert!(g.contains(&0.0));
    }
}
