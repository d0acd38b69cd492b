//! Executable property checks: Lipschitz diagnostics under grid refinement,
//! comparison fuzzing, uniqueness up to constants and monotonicity of the
//! ergodic constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ergodic::{certify_upper, extract_eigenpair, EigenPair, ExtractConfig};
use crate::grid::{e17, GridFunction};
use crate::hjb::{check_discrete_comparison, DiscountedProblem};
use crate::operator::tail_seminorm;
use crate::problem::{normalize_source, ProblemSpec};
use crate::{Error, Result};

/// One row of the Lipschitz probe: measured quantities of u on B_R together
/// with the data aggregates entering the interior gradient bound.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzDiagnostic {
    pub r: f64,
    pub h: f64,
    /// max |u(x) - u(y)| / |x - y| over node pairs in B_R.
    pub measured_lip: f64,
    /// (m - 2s)/(m - 1), only when m >= 2s + 1.
    pub gamma0: Option<f64>,
    /// sup |u(x) - u(y)| / |x - y|^gamma0 over node pairs in B_{R+5/4}.
    pub holder_quotient: Option<f64>,
    pub a_r: f64,
    pub z1: f64,
    pub z2: f64,
    /// Tail seminorm of u over B_{R+2} with a = 1.
    pub h_seminorm: f64,
    pub osc_u: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateProbeReport {
    /// Rows keyed by strictly decreasing h.
    pub rows: Vec<LipschitzDiagnostic>,
    /// measured_lip(h_{k+1}) / measured_lip(h_k).
    pub ratios: Vec<f64>,
    pub stable: bool,
}

/// Refinements may raise the measured constant by at most this factor.
pub const LIP_GROWTH: f64 = 1.1;

fn nodes_in(u: &GridFunction, r: f64) -> Vec<usize> {
    (0..u.grid.len).filter(|&k| u.grid.x(k).abs() <= r + 1e-9 * u.h()).collect()
}

fn pair_quotient(u: &GridFunction, nodes: &[usize], exponent: f64) -> f64 {
    let mut q = 0.0f64;
    for (a, &i) in nodes.iter().enumerate() {
        for &j in &nodes[a + 1..] {
            let d = (u.grid.x(j) - u.grid.x(i)).abs();
            q = q.max((u.values[j] - u.values[i]).abs() / d.powf(exponent));
        }
    }
    q
}

fn osc(vals: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Diagnostics of a single grid function on B_R. `alpha` is the discount of
/// the equation u solves (0 for an eigenfunction).
pub fn lipschitz_diagnostic(u: &GridFunction, spec: &ProblemSpec, r: f64, alpha: f64) -> Result<LipschitzDiagnostic> {
    if u.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("grid function has non-finite values".into()));
    }
    if !(r > 0.0) || u.grid.x(0) > -(r + 2.0) || u.grid.x_end() < r + 2.0 {
        return Err(Error::Precondition(format!("grid does not cover B_{{R+2}} for R = {r}")));
    }
    let (s, m) = (spec.s(), spec.m());
    let inner = nodes_in(u, r);
    if inner.len() < 2 {
        return Err(Error::Precondition("fewer than two nodes in B_R".into()));
    }
    let measured_lip = pair_quotient(u, &inner, 1.0);
    let gamma0 = (m >= 2.0 * s + 1.0).then(|| (m - 2.0 * s) / (m - 1.0));
    let holder_quotient = gamma0.map(|g| pair_quotient(u, &nodes_in(u, r + 1.25), g));

    let outer = nodes_in(u, r + 2.0);
    let h_seminorm = tail_seminorm(u, &spec.kernel, &outer, 1.0)?;
    let osc_u = osc(outer.iter().map(|&k| u.values[k]));
    let fx: Vec<f64> = outer.iter().map(|&k| spec.f1(u.grid.x(k))).collect();
    let sup_f_plus = fx.iter().fold(0.0f64, |a, v| a.max(*v));
    let inf_u_minus = outer.iter().map(|&k| (-u.values[k]).max(0.0)).fold(f64::INFINITY, f64::min);
    let a_r = 1.0 + sup_f_plus - alpha * inf_u_minus + h_seminorm;
    // Outside the Hoelder regime the R-power is dropped (gamma0 = 1).
    let z1 = r.powf(1.0 - gamma0.unwrap_or(1.0)) * (a_r.powf(1.0 / m) + osc_u);
    let z2 = 1.0 + osc_u + osc(fx.into_iter()) + h_seminorm;
    Ok(LipschitzDiagnostic { r, h: u.h(), measured_lip, gamma0, holder_quotient, a_r, z1, z2, h_seminorm, osc_u })
}

/// Lipschitz probe over a refinement ladder (coarse to fine).
pub fn probe_lipschitz(ladder: &[GridFunction], spec: &ProblemSpec, r: f64) -> Result<EstimateProbeReport> {
    if ladder.len() < 2 {
        return Err(Error::Precondition("refinement ladder needs at least two grids".into()));
    }
    if ladder.windows(2).any(|w| !(w[1].h() < w[0].h())) {
        return Err(Error::Precondition("refinement ladder must have strictly decreasing h".into()));
    }
    let rows = ladder.iter().map(|u| lipschitz_diagnostic(u, spec, r, 0.0)).collect::<Result<Vec<_>>>()?;
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].measured_lip / w[0].measured_lip).collect();
    let stable = rows.windows(2).all(|w| w[1].measured_lip <= LIP_GROWTH * w[0].measured_lip);
    Ok(EstimateProbeReport { rows, ratios, stable })
}

impl EstimateProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,measured_lip,holder_quotient,a_r,z1,z2,h_seminorm\n");
        for r in &self.rows {
            let hq = r.holder_quotient.map_or(String::new(), e17);
            let cols = [e17(r.h), e17(r.measured_lip), hq, e17(r.a_r), e17(r.z1), e17(r.z2), e17(r.h_seminorm)];
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct UniquenessReport {
    /// Median of u_a - u_b on the comparison ball.
    pub offset: f64,
    pub sup_error: f64,
    pub tolerance: f64,
    /// Where the aligned discrepancy peaks.
    pub worst_x: f64,
    pub lambda_diff: f64,
    pub lambda_tolerance: f64,
    pub radius: f64,
    pub passed: bool,
}

/// Relative sup tolerance on the aligned difference, scaled by 1 + osc u.
pub const UNIQUENESS_TOL: f64 = 5e-3;

/// Two eigenpairs of the same problem must agree up to an additive constant.
/// The comparison ball is B_{n/2} for the smaller of the two radii; the
/// eigenvalues must agree within the union of their certificate gaps plus
/// the same relative allowance as the functions (the runs may use different
/// grids, which certificates do not see).
pub fn check_uniqueness(a: &EigenPair, b: &EigenPair) -> Result<UniquenessReport> {
    let radius = 0.5 * a.n_max().min(b.n_max());
    let nodes = nodes_in(&a.u, radius);
    if nodes.is_empty() {
        return Err(Error::Precondition("no common grid region".into()));
    }
    let mut diffs: Vec<f64> = nodes.iter().map(|&k| a.u.values[k] - b.u.eval(a.u.grid.x(k))).collect();
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let offset = if sorted.len() % 2 == 1 { sorted[mid] } else { 0.5 * (sorted[mid - 1] + sorted[mid]) };
    let mut sup_error = 0.0f64;
    let mut worst_x = 0.0;
    for (d, &k) in diffs.iter_mut().zip(&nodes) {
        *d -= offset;
        if d.abs() > sup_error {
            sup_error = d.abs();
            worst_x = a.u.grid.x(k);
        }
    }
    let osc_u = osc(nodes.iter().map(|&k| a.u.values[k]));
    let tolerance = UNIQUENESS_TOL * (1.0 + osc_u);
    let lambda_diff = (a.lambda_star - b.lambda_star).abs();
    let width = |p: &EigenPair| p.bounds.upper - p.bounds.lower;
    let lambda_tolerance = width(a) + width(b) + UNIQUENESS_TOL * (1.0 + a.lambda_star.abs());
    let passed = sup_error <= tolerance && lambda_diff <= lambda_tolerance;
    Ok(UniquenessReport { offset, sup_error, tolerance, worst_x, lambda_diff, lambda_tolerance, radius, passed })
}

#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gap: f64,
    /// sup (f2 - f1) over the sampled region.
    pub sup_diff: f64,
    /// sup (f2 - L u1): an upper bound for lambda(f2) from the f1 eigenfunction.
    pub upper_from_u1: f64,
    pub noise: f64,
    pub passed: bool,
}

/// Gap below which a strict increase is not distinguishable from noise.
pub const MONOTONE_NOISE: f64 = 1e-2;

/// lambda*(f1) < lambda*(f2) for f1 <= f2 with f1 != f2, with the gap
/// bounded by sup (f2 - f1).
pub fn check_monotonicity(
    spec1: &ProblemSpec,
    spec2: &ProblemSpec,
    config: &ExtractConfig,
) -> Result<MonotonicityReport> {
    let n = spec1.n_max().max(spec2.n_max());
    let count = (2.0 * n / config.h).round() as usize;
    let (mut sup_diff, mut strict) = (f64::NEG_INFINITY, false);
    for i in 0..=count {
        let x = -n + i as f64 * config.h;
        let d = spec2.f1(x) - spec1.f1(x);
        if d < -1e-12 * (1.0 + spec1.f1(x).abs()) {
            return Err(Error::Precondition(format!("f1 > f2 at x = {x}")));
        }
        strict |= d > 1e-12;
        sup_diff = sup_diff.max(d);
    }
    if !strict {
        return Err(Error::Precondition("f1 and f2 coincide on the grid".into()));
    }
    let e1 = extract_eigenpair(spec1, config)?;
    let e2 = extract_eigenpair(spec2, config)?;
    let shifted = normalize_source(spec2);
    let up = certify_upper(&shifted, &e1.u, e1.n_max() - config.cert_margin)?;
    let upper_from_u1 = up.value - shifted.source.shift;
    let gap = e2.lambda_star - e1.lambda_star;
    let passed = gap > MONOTONE_NOISE && gap <= sup_diff + MONOTONE_NOISE;
    Ok(MonotonicityReport {
        lambda1: e1.lambda_star,
        lambda2: e2.lambda_star,
        gap,
        sup_diff,
        upper_from_u1,
        noise: MONOTONE_NOISE,
        passed,
    })
}

#[derive(Debug, Clone)]
pub struct FuzzTrial {
    pub s: f64,
    pub m: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub violations: usize,
    pub min_gap: f64,
}

#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub seed: u64,
    pub trials: Vec<FuzzTrial>,
    pub violations: usize,
}

/// Ordered data pairs per fuzz instance.
pub const FUZZ_PAIRS: usize = 3;

/// Discrete comparison over randomized tiny instances: s in (1/2, 1),
/// m in [1.2, 3], f = c0 |x|^gamma plus random ordered forcings.
pub fn fuzz_comparison(trials: usize, seed: u64) -> Result<FuzzReport> {
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let s = rng.random_range(0.55..0.95);
        let m = rng.random_range(1.2..3.0);
        let gamma = rng.random_range(0.0..1.5);
        let c0 = rng.random_range(0.2..2.0);
        let alpha = rng.random_range(0.05..1.0);
        let spec = ProblemSpec::power_model(s, m, c0, gamma, vec![2.0])?;
        let problem = DiscountedProblem::new(&spec, alpha, 2.0, 0.25)?;
        let rep = check_discrete_comparison(&problem, FUZZ_PAIRS, rng.random())?;
        out.push(FuzzTrial { s, m, gamma, alpha, violations: rep.violations.len(), min_gap: rep.min_gap });
    }
    let violations = out.iter().map(|t| t.violations).sum();
    Ok(FuzzReport { seed, trials: out, violations })
}

/// One row of the aggregated verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub witness: String,
    pub metrics: String,
}

impl CheckRow {
    pub fn new(name: &str, passed: bool, witness: impl Into<String>, metrics: impl Into<String>) -> Self {
        CheckRow { name: name.into(), passed, witness: witness.into(), metrics: metrics.into() }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("name,status,witness,metrics\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&r.name),
            if r.passed { "pass" } else { "fail" },
            csv_field(&r.witness),
            csv_field(&r.metrics)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FarFieldModel, UniformGrid};

    fn spec() -> ProblemSpec {
        ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![8.0]).unwrap()
    }

    #[test]
    fn constant_function_has_zero_lipschitz() {
        let g = UniformGrid::symmetric(8.0, 0.25).unwrap();
        let u = GridFunction::from_fn(g, FarFieldModel::Constant(3.0), |_| 3.0).unwrap();
        let d = lipschitz_diagnostic(&u, &spec(), 2.0, 0.0).unwrap();
        assert_eq!(d.measured_lip, 0.0);
        assert!(d.h_seminorm.abs() < 1e-12);
        // oscillation-free value
        assert!((d.z1 - d.a_r.powf(0.5)).abs() < 1e-12);
        assert!(d.z2 >= 1.0 && d.a_r >= 1.0);
        assert!(d.gamma0.is_none());
    }

    #[test]
    fn gamma0_set_in_hoelder_regime() {
        let sp = ProblemSpec::power_model(0.6, 3.0, 1.0, 0.5, vec![8.0]).unwrap();
        let g = UniformGrid::symmetric(8.0, 0.25).unwrap();
        let u = GridFunction::from_fn(g, FarFieldModel::power(1.0, 1.0, 8.0), |x| x.abs()).unwrap();
        let d = lipschitz_diagnostic(&u, &sp, 2.0, 0.0).unwrap();
        let g0 = d.gamma0.unwrap();
        assert!((g0 - 0.9).abs() < 1e-12);
        assert!((d.measured_lip - 1.0).abs() < 1e-12);
        assert!(d.holder_quotient.unwrap() >= 1.0);
    }

    #[test]
    fn fuzz_is_reproducible() {
        let a = fuzz_comparison(3, 11).unwrap();
        let b = fuzz_comparison(3, 11).unwrap();
        assert_eq!(a.violations, 0);
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!(x.min_gap.to_bits(), y.min_gap.to_bits());
        }
    }

    #[test]
    fn report_quotes_fields() {
        let rows = vec![CheckRow::new("a", true, "x=1", "k=1,j=2")];
        assert_eq!(report_csv(&rows), "name,status,witness,metrics\na,pass,x=1,\"k=1,j=2\"\n");
    }
}
