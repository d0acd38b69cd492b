//! Vanishing-discount extraction of the critical pair (u, lambda*), the
//! power barrier V, sub/supersolution certificates and the divergence probe.

use crate::grid::{FarFieldModel, FarTable, GridFunction, UniformGrid};
use crate::hjb::{
    godunov_hamiltonian, side_tail_fit, solve_ergodic, solve_with, Assembly, DiscountedProblem, DiscreteSolution,
    ExteriorData, SolverConfig,
};
use crate::operator::Stencil;
use crate::problem::{normalize_source, ProblemSpec, Regime};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct BarrierModel {
    pub beta: f64,
    /// V = |x|^beta for |x| >= 1, even quartic inside, power far field.
    pub v: GridFunction,
    pub kappa0: f64,
    pub kappa1: f64,
    pub r0: f64,
    /// Exponent m (beta - 1) of the coercive lower bound.
    pub q: f64,
    /// min over nodes of (LV - f) - (-kappa0 chi + kappa1 |x|^q).
    pub min_slack: f64,
}

/// V(x) = |x|^beta outside the unit ball, a + b x^2 + c x^4 inside (C^2 match).
pub fn barrier_profile(beta: f64, x: f64) -> f64 {
    let r = x.abs();
    if r >= 1.0 {
        r.powf(beta)
    } else {
        let c = beta * (beta - 2.0) / 8.0;
        let b = beta * (4.0 - beta) / 4.0;
        let a = 1.0 - (6.0 * beta - beta * beta) / 8.0;
        a + b * r * r + c * r.powi(4)
    }
}

/// Admissible interval (max(1 + gamma/m, 1), 2s) for the barrier exponent.
pub fn barrier_interval(spec: &ProblemSpec) -> Result<(f64, f64)> {
    let lo = (1.0 + spec.source.gamma() / spec.m()).max(1.0);
    let hi = 2.0 * spec.s();
    if lo >= hi {
        return Err(Error::Precondition(format!("no barrier exponent: need max(1 + gamma/m, 1) = {lo} < 2s = {hi}")));
    }
    Ok((lo, hi))
}

/// L v(x_k) = -I v + H_G(x, D v) at node k.
fn l_operator(spec: &ProblemSpec, st: &Stencil, gf: &GridFunction, k: usize) -> Result<f64> {
    let iv = st.apply(gf, k)?;
    let h = gf.h();
    let v = &gf.values;
    let x = gf.grid.x(k);
    let ham = &spec.hamiltonian;
    let (hg, _) = godunov_hamiltonian(ham, x, (v[k] - v[k - 1]) / h, (v[k + 1] - v[k]) / h, ham.p_star1(x));
    Ok(-iv + hg)
}

/// Grid used for a truncation radius n with spacing h (two pad nodes per side).
pub fn problem_grid(radius: f64, h: f64) -> Result<UniformGrid> {
    let m = (radius / h).round() as usize;
    UniformGrid::new(-((m + 2) as f64) * h, h, 2 * m + 5)
}

/// Smallest radius on which the barrier constants are fitted; the
/// inequality for V only becomes coercive at moderately large |x|.
pub const BARRIER_MIN_RADIUS: f64 = 64.0;

/// Barrier with spacing h on a grid of radius max(n_max, 64). beta is the
/// midpoint of the admissible interval; constants are fitted on the grid.
pub fn build_barrier(spec: &ProblemSpec, h: f64) -> Result<BarrierModel> {
    if spec.regime != Regime::Existence {
        return Err(Error::Precondition("barrier needs gamma < m(2s - 1)".into()));
    }
    let (lo, hi) = barrier_interval(spec)?;
    let beta = 0.5 * (lo + hi);
    let q = spec.m() * (beta - 1.0);
    let radius = (spec.n_max().max(BARRIER_MIN_RADIUS) / h).ceil() * h;
    let grid = problem_grid(radius, h)?;
    let v = GridFunction::from_fn(grid, FarFieldModel::power(1.0, beta, grid.x_end()), |x| barrier_profile(beta, x))?;
    let st = Stencil::new(&spec.kernel, h, grid.len)?;
    let mut pts = Vec::new();
    for k in 2..grid.len - 2 {
        let x = grid.x(k);
        let g = l_operator(spec, &st, &v, k)? - spec.f1(x);
        pts.push((x.abs(), g));
    }
    let kappa1_from = |r0: f64| -> Option<f64> {
        let mut k1 = f64::INFINITY;
        for (r, g) in &pts {
            if *r >= r0 - 1e-12 {
                if *g <= 0.0 {
                    return None;
                }
                k1 = k1.min(g / r.powf(q));
            }
        }
        Some(k1)
    };
    let mut radii: Vec<f64> = pts.iter().map(|p| p.0).filter(|r| *r >= 1.0 - 1e-12).collect();
    radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
    radii.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let half = 0.5 * radius;
    let reference = radii
        .iter()
        .rev()
        .filter(|r| **r <= half + 1e-12)
        .find_map(|r| kappa1_from(*r))
        .ok_or_else(|| Error::Property("barrier: L V - f is not positive on the outer half-ball".into()))?;
    let (r0, kappa1) = radii
        .iter()
        .find_map(|r| kappa1_from(*r).filter(|k| *k >= 0.5 * reference).map(|k| (*r, k)))
        .expect("the reference radius itself qualifies");
    let mut kappa0 = 1e-12f64;
    for (r, g) in &pts {
        if *r < r0 - 1e-12 {
            kappa0 = kappa0.max(kappa1 * r.powf(q) - g);
        }
    }
    let mut min_slack = f64::INFINITY;
    for (r, g) in &pts {
        let chi = if *r < r0 - 1e-12 { 1.0 } else { 0.0 };
        min_slack = min_slack.min(g - (-kappa0 * chi + kappa1 * r.powf(q)));
    }
    Ok(BarrierModel { beta, v, kappa0, kappa1, r0, q, min_slack })
}

#[derive(Debug, Clone)]
pub struct ExtractConfig {
    pub h: f64,
    /// Strictly decreasing discount ladder.
    pub alphas: Vec<f64>,
    pub exterior: ExteriorData,
    pub solver: SolverConfig,
    /// Stabilization tolerance across radii, in eigenvalue units:
    /// alpha sup_{|x| <= n_prev/2} |w_n - w_prev|.
    pub stab_tol: f64,
    /// Normalization point (rounded to the nearest node).
    pub x0: f64,
    /// Certificates use nodes with |x| <= n_max - margin.
    pub cert_margin: f64,
    /// Largest admissible last increment of lambda(alpha), relative to
    /// 1 + |lambda|.
    pub cauchy_tol: f64,
}

impl ExtractConfig {
    /// h = 0.25 and alpha_k = 0.4 * 2^-k for k = 0..=12.
    pub fn worked() -> Self {
        ExtractConfig {
            h: 0.25,
            alphas: geometric_ladder(0.4, 13),
            exterior: ExteriorData::Continuation,
            solver: SolverConfig::default(),
            stab_tol: 0.02,
            x0: 0.0,
            cert_margin: 1.0,
            cauchy_tol: 1e-2,
        }
    }

    /// One refinement step: half the spacing and one more discount level.
    /// The truncation plan lives on the problem spec; see `refined_plan`.
    pub fn refined(&self) -> Self {
        let mut out = self.clone();
        out.h *= 0.5;
        let last = *self.alphas.last().unwrap();
        let ratio = if self.alphas.len() > 1 { last / self.alphas[self.alphas.len() - 2] } else { 0.5 };
        out.alphas.push(last * ratio);
        out
    }

    fn check(&self) -> Result<()> {
        if self.alphas.len() < 3 {
            return Err(Error::Validation("need at least three discount levels".into()));
        }
        if self.alphas.windows(2).any(|w| !(w[1] < w[0])) || self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Validation("discount ladder must be positive and strictly decreasing".into()));
        }
        if !(self.h > 0.0) {
            return Err(Error::Validation("grid spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Truncation plan of a refinement step: the radius ladder extended by one
/// doubling.
pub fn refined_plan(plan: &[f64]) -> Vec<f64> {
    let mut out = plan.to_vec();
    if let Some(last) = plan.last() {
        out.push(2.0 * last);
    }
    out
}

pub fn geometric_ladder(alpha0: f64, levels: usize) -> Vec<f64> {
    (0..levels).map(|k| alpha0 * 0.5f64.powi(k as i32)).collect()
}

/// Result of `solve_discounted`: the solution on the largest radius used.
#[derive(Debug, Clone)]
pub struct StabilizedSolve {
    pub solution: DiscreteSolution,
    pub radii: Vec<f64>,
    /// Stabilization metric for each radius increment.
    pub stabilization: Vec<f64>,
    /// max over nodes of w - (kappa0/alpha + V); <= 1e-6 when the barrier holds.
    pub barrier_excess: Option<f64>,
    pub per_radius: Vec<DiscreteSolution>,
}

/// Assemblies for the truncation plan, reused across discount levels.
pub struct Ladder {
    spec: ProblemSpec,
    config: ExtractConfig,
    assemblies: Vec<(f64, Assembly)>,
}

impl Ladder {
    pub fn new(spec: &ProblemSpec, config: &ExtractConfig) -> Result<Ladder> {
        config.check()?;
        let mut assemblies = Vec::new();
        for &n in &spec.truncation_plan {
            let p = DiscountedProblem::new(spec, config.alphas[0], n, config.h)?;
            assemblies.push((n, Assembly::new(&p)?));
        }
        Ok(Ladder { spec: spec.clone(), config: config.clone(), assemblies })
    }

    /// Discounted solves over the truncation plan until the solution on the
    /// inner half-ball stabilizes. `init` holds warm starts per radius.
    pub fn solve(
        &self,
        alpha: f64,
        init: Option<&[DiscreteSolution]>,
        barrier: Option<&BarrierModel>,
    ) -> Result<StabilizedSolve> {
        let mut per_radius: Vec<DiscreteSolution> = Vec::new();
        let mut stabilization = Vec::new();
        let mut radii = Vec::new();
        for (idx, (n, asm)) in self.assemblies.iter().enumerate() {
            let p = DiscountedProblem::new(&self.spec, alpha, *n, self.config.h)?.with_exterior(self.config.exterior);
            let guess = init.and_then(|v| v.get(idx)).map(|prev| rescale_guess(prev, alpha));
            let sol = solve_with(asm, &p, &self.config.solver, guess.as_deref())?;
            if let Some(prev) = per_radius.last() {
                stabilization.push(alpha * sup_diff(prev, &sol, 0.5 * prev.radius));
            }
            radii.push(*n);
            per_radius.push(sol);
            if stabilization.last().is_some_and(|d| *d < self.config.stab_tol) && idx + 1 == self.assemblies.len() {
                break;
            }
        }
        if let Some(d) = stabilization.last() {
            if *d >= self.config.stab_tol {
                return Err(Error::Solver(format!(
                    "discounted solutions did not stabilize across radii {:?} (last change {d:.3e}); use larger radii",
                    radii
                )));
            }
        }
        let solution = per_radius.last().unwrap().clone();
        let barrier_excess = barrier.map(|b| {
            let mut ex = f64::NEG_INFINITY;
            for (k, w) in solution.w.values.iter().enumerate() {
                let x = solution.w.grid.x(k);
                if x.abs() < solution.radius - 1e-9 {
                    ex = ex.max(w - (b.kappa0 / alpha + b.v.eval(x)));
                }
            }
            ex
        });
        Ok(StabilizedSolve { solution, radii, stabilization, barrier_excess, per_radius })
    }
}

/// Warm start for a smaller discount: keep the shape, rescale the level.
fn rescale_guess(prev: &DiscreteSolution, alpha: f64) -> Vec<f64> {
    let c = prev.at_origin();
    let level = prev.alpha * c / alpha;
    prev.w.values.iter().map(|v| v - c + level).collect()
}

/// sup over common nodes with |x| <= r of |a - b| (same spacing).
fn sup_diff(a: &DiscreteSolution, b: &DiscreteSolution, r: f64) -> f64 {
    let mut d = 0.0f64;
    for (k, va) in a.w.values.iter().enumerate() {
        let x = a.w.grid.x(k);
        if x.abs() <= r + 1e-9 {
            d = d.max((va - b.w.eval(x)).abs());
        }
    }
    d
}

/// Single-alpha convenience wrapper over `Ladder::solve`.
pub fn solve_discounted(spec: &ProblemSpec, alpha: f64, config: &ExtractConfig) -> Result<StabilizedSolve> {
    if !(alpha > 0.0) {
        return Err(Error::Validation("solve_discounted needs alpha > 0".into()));
    }
    let spec = normalize_source(spec);
    let barrier = if spec.regime == Regime::Existence { Some(build_barrier(&spec, config.h)?) } else { None };
    let ladder =
        Ladder::new(&spec, &ExtractConfig { alphas: vec![alpha, alpha * 0.5, alpha * 0.25], ..config.clone() })?;
    ladder.solve(alpha, None, barrier.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRow {
    pub alpha: f64,
    pub n: f64,
    /// alpha w_alpha(x0), in the units of the normalized source.
    pub lambda: f64,
    pub residual: f64,
    pub stabilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub value: f64,
    /// Node where the max (upper) or min (lower) is attained.
    pub at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    pub lower_at: f64,
    pub upper_at: f64,
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    /// Solution of the truncated ergodic problem, zero at x0, with the
    /// ergodic far-field continuation.
    pub u: GridFunction,
    /// alpha -> 0 limit at the largest radius: the eigenvalue of the
    /// truncated ergodic problem, in the units of the original source.
    pub lambda_star: f64,
    /// Richardson extrapolation of the last three lambda(alpha) values.
    pub lambda_richardson: f64,
    /// Fitted rate q in lambda(alpha) = lambda* + c alpha^q, when the last
    /// three values are monotone and contracting.
    pub rate: Option<f64>,
    pub shift: f64,
    pub lambda_table: Vec<LambdaRow>,
    /// max over B_R |wbar_k - wbar_{k+1}| for consecutive discount levels.
    pub oscillation: Vec<f64>,
    pub oscillation_radius: f64,
    /// Certified bounds (original units).
    pub bounds: Bounds,
    /// Residual of the ergodic solve over |x| <= n - 1.
    pub residual_inner: f64,
    pub radii: Vec<f64>,
    pub h: f64,
    pub x0: f64,
    /// Feedback b_u = grad_p H(x, Du) at the grid nodes.
    pub feedback: Vec<f64>,
    /// Tail laws (a, beta) of u on the left and right sides.
    pub tail: [(f64, f64); 2],
    pub barrier: Option<BarrierModel>,
    /// Largest barrier excess over the ladder.
    pub barrier_excess: Option<f64>,
}

impl EigenPair {
    /// Successive |lambda_k - lambda_{k+1}|.
    pub fn increments(&self) -> Vec<f64> {
        self.lambda_table.windows(2).map(|w| (w[1].lambda - w[0].lambda).abs()).collect()
    }

    pub fn final_gap(&self) -> f64 {
        *self.increments().last().unwrap_or(&f64::INFINITY)
    }

    pub fn n_max(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    pub fn eigen_csv(&self) -> String {
        let mut out = String::from("x,u\n");
        for (k, v) in self.u.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", crate::grid::e17(self.u.grid.x(k)), crate::grid::e17(*v)));
        }
        out
    }

    pub fn lambda_csv(&self) -> String {
        let mut out = String::from("alpha,n,lambda_alpha,residual\n");
        for r in &self.lambda_table {
            out.push_str(&format!(
                "{},{},{},{}\n",
                crate::grid::e17(r.alpha),
                crate::grid::e17(r.n),
                crate::grid::e17(r.lambda - self.shift),
                crate::grid::e17(r.residual)
            ));
        }
        out
    }

    pub fn certificate_csv(&self) -> String {
        format!(
            "lambda_low,lambda_star,lambda_up\n{},{},{}\n",
            crate::grid::e17(self.bounds.lower),
            crate::grid::e17(self.lambda_star),
            crate::grid::e17(self.bounds.upper)
        )
    }
}

/// Richardson extrapolation of the last three values assuming
/// lambda(alpha) = lambda* + c alpha^q on a geometric ladder.
pub fn richardson(alphas: &[f64], lambdas: &[f64]) -> (f64, Option<f64>) {
    let k = lambdas.len();
    let l3 = lambdas[k - 1];
    if k < 3 {
        return (l3, None);
    }
    let d1 = lambdas[k - 2] - lambdas[k - 3];
    let d2 = l3 - lambdas[k - 2];
    let r = d2 / d1;
    if !(d1 != 0.0 && r > 0.0 && r < 1.0) {
        return (l3, None);
    }
    let q = r.ln() / (alphas[k - 1] / alphas[k - 2]).ln();
    (l3 + d2 * r / (1.0 - r), Some(q))
}

/// Vanishing-discount pipeline: the discount ladder over the truncation
/// plan (each level warm-started from the previous one), then the alpha = 0
/// problem at the largest radius started from the smallest-alpha solution.
pub fn extract_eigenpair(spec: &ProblemSpec, config: &ExtractConfig) -> Result<EigenPair> {
    config.check()?;
    let spec = normalize_source(spec);
    let shift = spec.source.shift;
    let barrier = if spec.regime == Regime::Existence { Some(build_barrier(&spec, config.h)?) } else { None };
    let ladder = Ladder::new(&spec, config)?;
    let mut table = Vec::new();
    let mut prev: Option<Vec<DiscreteSolution>> = None;
    let mut bars: Vec<DiscreteSolution> = Vec::new();
    let mut barrier_excess: Option<f64> = None;
    let mut radii = Vec::new();
    for &alpha in &config.alphas {
        let st = ladder.solve(alpha, prev.as_deref(), barrier.as_ref())?;
        let sol = &st.solution;
        let k0 = node_of(&sol.w.grid, config.x0)?;
        table.push(LambdaRow {
            alpha,
            n: sol.radius,
            lambda: alpha * sol.w.values[k0],
            residual: sol.residual_norm,
            stabilization: st.stabilization.last().copied().unwrap_or(0.0),
        });
        if let Some(e) = st.barrier_excess {
            barrier_excess = Some(barrier_excess.map_or(e, |b: f64| b.max(e)));
        }
        radii = st.radii.clone();
        bars.push(sol.clone());
        prev = Some(st.per_radius);
    }
    let alphas: Vec<f64> = table.iter().map(|r| r.alpha).collect();
    let lambdas: Vec<f64> = table.iter().map(|r| r.lambda).collect();
    let (lambda_rich, rate) = richardson(&alphas, &lambdas);
    let increments: Vec<f64> = lambdas.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let last_inc = *increments.last().unwrap();
    let tail_decreasing = increments.windows(2).rev().take(2).all(|w| w[1] <= w[0]);
    if !(last_inc <= config.cauchy_tol * (1.0 + lambda_rich.abs())) || !tail_decreasing {
        let rows: Vec<String> = table.iter().map(|r| format!("alpha={:.4e} lambda={:.8}", r.alpha, r.lambda)).collect();
        return Err(Error::Solver(format!(
            "lambda(alpha) is not Cauchy along the discount ladder: {}",
            rows.join("; ")
        )));
    }

    let n_max = *radii.last().unwrap();
    let osc_r = 0.25 * n_max;
    let oscillation: Vec<f64> = bars
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let k0 = node_of(&a.w.grid, config.x0).unwrap();
            let (ca, cb) = (a.w.values[k0], b.w.values[k0]);
            let mut d = 0.0f64;
            for k in 0..a.w.grid.len {
                if a.w.grid.x(k).abs() <= osc_r + 1e-9 {
                    d = d.max(((a.w.values[k] - ca) - (b.w.values[k] - cb)).abs());
                }
            }
            d
        })
        .collect();

    let last = bars.last().unwrap();
    let pin = node_of(&last.w.grid, config.x0)?;
    let (_, asm) = ladder.assemblies.last().unwrap();
    let p = DiscountedProblem::new(&spec, last.alpha, n_max, config.h)?.with_exterior(config.exterior);
    let erg = solve_ergodic(asm, &p, &config.solver, &last.w.values, *lambdas.last().unwrap(), pin)?;
    let u = erg.u;
    let grid = u.grid;
    let z0 = grid.x(grid.len - 4);
    let side = |sgn: f64| -> Vec<(f64, f64)> { (3..grid.len - 3).map(|k| (sgn * grid.x(k), u.values[k])).collect() };
    let tail = [side_tail_fit(&spec, &side(-1.0), z0), side_tail_fit(&spec, &side(1.0), z0)];
    let feedback = feedback_on_grid(&spec, &u);

    let cert_r = n_max - config.cert_margin;
    // L annihilates constants: certify the copy with minimum zero.
    let lift = u.values.iter().fold(0.0f64, |a, v| a.min(*v));
    let lifted = u.add_constant(-lift);
    let up = certify_upper(&spec, &lifted, cert_r)?;
    let low = best_lower(&spec, &lifted, cert_r)?;
    let bounds = Bounds { lower: low.value - shift, upper: up.value - shift, lower_at: low.at, upper_at: up.at };
    Ok(EigenPair {
        u,
        lambda_star: erg.lambda - shift,
        lambda_richardson: lambda_rich - shift,
        rate,
        shift,
        lambda_table: table,
        oscillation,
        oscillation_radius: osc_r,
        bounds,
        residual_inner: erg.residual_inner,
        radii,
        h: config.h,
        x0: config.x0,
        feedback,
        tail,
        barrier,
        barrier_excess,
    })
}

fn node_of(grid: &UniformGrid, x: f64) -> Result<usize> {
    grid.index_of(x).ok_or_else(|| Error::Validation(format!("normalization point {x} outside the grid")))
}

/// grad_p H(x, D u) with the Godunov slope selection at interior nodes.
pub fn feedback_on_grid(spec: &ProblemSpec, u: &GridFunction) -> Vec<f64> {
    let ham = &spec.hamiltonian;
    let h = u.h();
    let v = &u.values;
    let mut out = vec![0.0; v.len()];
    for k in 1..v.len() - 1 {
        let x = u.grid.x(k);
        out[k] = godunov_hamiltonian(ham, x, (v[k] - v[k - 1]) / h, (v[k + 1] - v[k]) / h, ham.p_star1(x)).1;
    }
    out[0] = out[1];
    let n = v.len();
    out[n - 1] = out[n - 2];
    out
}

fn cert_nodes(gf: &GridFunction, radius: f64) -> Vec<usize> {
    let len = gf.grid.len;
    (2..len - 2).filter(|k| gf.grid.x(*k).abs() <= radius + 1e-9).collect()
}

fn f_minus_l(spec: &ProblemSpec, gf: &GridFunction, radius: f64) -> Result<Vec<(f64, f64)>> {
    let st = Stencil::new(&spec.kernel, gf.h(), gf.grid.len)?;
    let nodes = cert_nodes(gf, radius);
    let vals = crate::par::map_range(nodes.len(), |j| {
        let k = nodes[j];
        let x = gf.grid.x(k);
        l_operator(spec, &st, gf, k).map(|l| (x, spec.f1(x) - l))
    });
    vals.into_iter().collect()
}

/// max over nodes with |x| <= radius of f - L(candidate): an upper bound for
/// lambda* when the candidate is a nonnegative supersolution of the shifted
/// equation.
pub fn certify_upper(spec: &ProblemSpec, candidate: &GridFunction, radius: f64) -> Result<Certificate> {
    let scale = 1.0 + candidate.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if candidate.values.iter().any(|v| *v < -1e-8 * scale) {
        return Err(Error::Precondition("upper certificate needs a nonnegative candidate".into()));
    }
    let vals = f_minus_l(spec, candidate, radius)?;
    let mut best = Certificate { value: f64::NEG_INFINITY, at: f64::NAN };
    for (x, v) in vals {
        if v > best.value {
            best = Certificate { value: v, at: x };
        }
    }
    Ok(best)
}

/// min over nodes with |x| <= radius of f - L(candidate) for a nonpositive
/// candidate: a lower bound for lambda* when H is x-independent or periodic.
pub fn certify_lower(spec: &ProblemSpec, candidate: &GridFunction, radius: f64) -> Result<Certificate> {
    certify_lower_below(spec, candidate, 0.0, radius)
}

/// Same certificate for a candidate bounded above by `sup`: L annihilates
/// constants, so candidate - sup is the nonpositive function certified.
fn certify_lower_below(spec: &ProblemSpec, candidate: &GridFunction, sup: f64, radius: f64) -> Result<Certificate> {
    if !spec.hamiltonian.is_translation_structured() {
        return Err(Error::Precondition("lower certificate needs x -> H(x, p) constant or periodic".into()));
    }
    let far_ok = match &candidate.far {
        FarFieldModel::Zero => 0.0 <= sup,
        FarFieldModel::Constant(c) => *c <= sup,
        FarFieldModel::Tabulated { left, right } => left.values.iter().chain(&right.values).all(|v| *v <= sup),
        FarFieldModel::PowerGrowth { offset, a_left, a_right, .. } => {
            *offset <= sup && *a_left <= 0.0 && *a_right <= 0.0
        }
        FarFieldModel::Periodic { .. } => true,
    };
    if candidate.values.iter().any(|v| *v > sup) || !far_ok {
        return Err(Error::Precondition("lower certificate needs a nonpositive candidate".into()));
    }
    let vals = f_minus_l(spec, candidate, radius)?;
    let mut best = Certificate { value: f64::INFINITY, at: f64::NAN };
    for (x, v) in vals {
        if v < best.value {
            best = Certificate { value: v, at: x };
        }
    }
    Ok(best)
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Applies `map` to the values and to the far field (tabulated or bounded).
fn map_function(u: &GridFunction, map: impl Fn(f64) -> f64) -> Result<GridFunction> {
    let far = match &u.far {
        FarFieldModel::Tabulated { left, right } => {
            let c = |t: &FarTable| FarTable {
                z: t.z.clone(),
                values: t.values.iter().map(|v| map(*v)).collect(),
                tail_beta: 0.0,
            };
            FarFieldModel::Tabulated { left: c(left), right: c(right) }
        }
        FarFieldModel::Zero => FarFieldModel::Constant(map(0.0)),
        FarFieldModel::Constant(v) => FarFieldModel::Constant(map(*v)),
        _ => return Err(Error::Precondition("softplus cap needs a tabulated or bounded far field".into())),
    };
    GridFunction::new(u.grid, u.values.iter().map(|v| map(*v)).collect(), far)
}

/// Softplus cap -delta log(1 + exp((level - u)/delta)) <= 0 of a grid
/// function with a tabulated (or bounded) far field.
pub fn softplus_cap(u: &GridFunction, level: f64, delta: f64) -> Result<GridFunction> {
    map_function(u, |v| -delta * softplus((level - v) / delta))
}

/// The same cap plus `level`: u - delta log(1 + exp((u - level)/delta)),
/// which stays at the scale of u where u is small.
fn softplus_cap_shifted(u: &GridFunction, level: f64, delta: f64) -> Result<GridFunction> {
    map_function(u, |v| (v - delta * softplus((v - level) / delta)).min(level))
}

/// Cap radii as multiples of the last unknown's radius z0, up to the end
/// of the tabulated continuation.
pub const CAP_DECADES: std::ops::RangeInclusive<i32> = 1..=8;

/// Best lower certificate over caps of u at levels min u(+-R) with
/// R = z0 10^k and delta in {0.03, 0.1, 0.3} times the level, plus the zero
/// candidate.
pub fn best_lower(spec: &ProblemSpec, u: &GridFunction, radius: f64) -> Result<Certificate> {
    let mut best =
        certify_lower(spec, &GridFunction::new(u.grid, vec![0.0; u.grid.len], FarFieldModel::Zero)?, radius)?;
    let z0 = u.grid.x(u.grid.len - 4);
    for k in CAP_DECADES {
        let r = z0 * 10f64.powi(k);
        let level = u.eval(r).min(u.eval(-r));
        if !(level > 0.0) {
            continue;
        }
        for d in [0.03, 0.1, 0.3] {
            let v = softplus_cap_shifted(u, level, d * level)?;
            let c = certify_lower_below(spec, &v, level, radius)?;
            if c.value > best.value {
                best = c;
            }
        }
    }
    Ok(best)
}

/// (min of u over 0.8 n <= |x| <= 0.9 n, max of u over B_2).
pub fn coercivity_margin(u: &GridFunction, n: f64) -> (f64, f64) {
    let mut outer = f64::INFINITY;
    let mut inner = f64::NEG_INFINITY;
    for (k, v) in u.values.iter().enumerate() {
        let r = u.grid.x(k).abs();
        if r >= 0.8 * n - 1e-9 && r <= 0.9 * n + 1e-9 {
            outer = outer.min(*v);
        }
        if r <= 2.0 + 1e-9 {
            inner = inner.max(*v);
        }
    }
    (outer, inner)
}

#[derive(Debug, Clone)]
pub struct NonexistConfig {
    pub alpha: f64,
    pub radii: Vec<f64>,
    /// Grid cells per radius: h = n / cells.
    pub cells: usize,
    pub factor: f64,
    pub consecutive: usize,
    pub solver: SolverConfig,
}

impl Default for NonexistConfig {
    fn default() -> Self {
        NonexistConfig {
            alpha: 0.01,
            radii: vec![4.0, 8.0, 16.0, 32.0],
            cells: 64,
            factor: 2.0,
            consecutive: 3,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub regime: Regime,
    /// (n, lambda_n = alpha W_n(0)) for the truncated problems.
    pub ladder: Vec<(f64, f64)>,
    pub ratios: Vec<f64>,
    pub divergent: bool,
}

impl DivergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,lambda_n,ratio\n");
        for (k, (n, l)) in self.ladder.iter().enumerate() {
            let r = if k == 0 { String::new() } else { crate::grid::e17(self.ratios[k - 1]) };
            out.push_str(&format!("{},{},{}\n", crate::grid::e17(*n), crate::grid::e17(*l), r));
        }
        out
    }
}

/// Truncated problems with zero exterior at a fixed small discount over a
/// doubling ladder of radii; divergence is declared when lambda_n grows by
/// the factor in each of `consecutive` successive doublings.
pub fn detect_nonexistence(spec: &ProblemSpec, config: &NonexistConfig) -> Result<DivergenceReport> {
    let spec = normalize_source(spec);
    let mut ladder = Vec::new();
    for &n in &config.radii {
        let p = DiscountedProblem::new(&spec, config.alpha, n, n / config.cells as f64)?;
        let sol = crate::hjb::solve_dirichlet(&p, &config.solver)?;
        ladder.push((n, config.alpha * sol.at_origin() - spec.source.shift));
    }
    let ratios: Vec<f64> = ladder.windows(2).map(|w| w[1].1 / w[0].1).collect();
    let mut run = 0;
    let mut divergent = false;
    for r in &ratios {
        run = if *r >= config.factor { run + 1 } else { 0 };
        if run >= config.consecutive {
            divergent = true;
        }
    }
    Ok(DivergenceReport { regime: spec.regime, ladder, ratios, divergent })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barrier_profile_is_c2() {
        let b = 1.375;
        let e = 1e-6;
        let v = |x: f64| barrier_profile(b, x);
        assert!((v(1.0 - e) - v(1.0 + e)).abs() < 1e-5);
        let d = |x: f64| (v(x + e) - v(x - e)) / (2.0 * e);
        assert!((d(1.0 - 2.0 * e) - d(1.0 + 2.0 * e)).abs() < 1e-4);
        assert!(v(0.0) > 0.0);
    }

    #[test]
    fn richardson_exact_on_power_law() {
        let alphas = [0.4, 0.2, 0.1];
        let lambdas: Vec<f64> = alphas.iter().map(|a: &f64| 2.0 + 3.0 * a.powf(0.7)).collect();
        let (l, q) = richardson(&alphas, &lambdas);
        assert!((l - 2.0).abs() < 1e-12);
        assert!((q.unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn barrier_constants() {
        let spec = ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![6.0, 12.0]).unwrap();
        let b = build_barrier(&spec, 0.25).unwrap();
        assert!((b.beta - 1.375).abs() < 1e-12);
        assert!(b.kappa1 > 0.0 && b.kappa0 > 0.0 && b.r0 >= 1.0);
        assert!(b.min_slack >= -1e-12);
    }
}
