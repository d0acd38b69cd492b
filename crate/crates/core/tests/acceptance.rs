//! Acceptance criteria 1-13 at their stated tolerances. Each test writes one
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured) before asserting.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ergodic_hjb::ergodic::{
    detect_nonexistence, extract_eigenpair, refined_plan, EigenPair, ExtractConfig, NonexistConfig,
};
use ergodic_hjb::grid::{FarFieldModel, GridFunction, UniformGrid};
use ergodic_hjb::levy::{
    compare_representation, dynkin_check, empirical_cf, estimate_long_run_cost, return_radius, verify_representation,
    ControlPolicy, GeneratorTable, PathConfig, TestFunction,
};
use ergodic_hjb::operator::{apply_operator_field, KernelSpec};
use ergodic_hjb::problem::{Bump, ProblemSpec};
use ergodic_hjb::quad::gamma_fn;
use ergodic_hjb::verifier::{check_monotonicity, check_uniqueness, fuzz_comparison, probe_lipschitz};

fn report(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    // Direct handle writes bypass the test harness capture.
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn worked_spec() -> ProblemSpec {
    ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![6.0, 12.0, 24.0]).unwrap()
}

fn worked_pair() -> &'static EigenPair {
    static PAIR: OnceLock<EigenPair> = OnceLock::new();
    PAIR.get_or_init(|| extract_eigenpair(&worked_spec(), &ExtractConfig::worked()).unwrap())
}

#[test]
fn criterion_01_fourier_symbol() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut at = (0.0, 0.0);
    for s in [0.6, 0.75, 0.9] {
        let kernel = KernelSpec::fractional_laplacian(1, s).unwrap();
        let n = 4096;
        let h = 32.0 * PI / n as f64;
        let grid = UniformGrid::new(-16.0 * PI, h, n + 1).unwrap();
        for k in [1.0f64, 2.0, 4.0] {
            let far = FarFieldModel::Periodic { period: 2.0 * PI };
            let gf = GridFunction::from_fn(grid, far, |x| (k * x).cos()).unwrap();
            // The grid operator is the generator I = -(-Delta)^s.
            let field = apply_operator_field(&gf, &kernel).unwrap();
            let sym = k.powf(2.0 * s);
            for i in 0..grid.len {
                let x = grid.x(i);
                if x.abs() <= 8.0 * PI && field.evaluated[i] {
                    let err = (-field.values[i] - sym * (k * x).cos()).abs() / sym;
                    if err > worst {
                        worst = err;
                        at = (s, k);
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-3 && secs <= 30.0;
    report(1, pass, format!("max rel err {worst:.3e} at (s, k) = {at:?}, {secs:.1} s"));
    assert!(pass);
}

/// (-Delta)^s of (1 - x^2)_+^s at x in (-1, 1) by adaptive Simpson on the
/// symmetric second-difference form, independent of the grid operator.
fn profile_by_quadrature(s: f64, x: f64) -> f64 {
    let u = |z: f64| if z.abs() < 1.0 { (1.0 - z * z).powf(s) } else { 0.0 };
    let c = 4f64.powf(s) * gamma_fn(0.5 + s) / (PI.sqrt() * gamma_fn(-s).abs());
    let w = 1.0 - x * x;
    let g = |y: f64| {
        if (x + y).abs() >= 1.0 || (x - y).abs() >= 1.0 {
            return 2.0 * u(x) - u(x + y) - u(x - y);
        }
        // u(x -+ y)/u(x) = e^a, e^b with a + b formed without cancellation:
        // 2 - e^a - e^b = expm1(a) expm1(b) - expm1(a + b).
        let a = s * (-y * (2.0 * x + y) / w).ln_1p();
        let b = s * (y * (2.0 * x - y) / w).ln_1p();
        let q = -2.0 * y * y / w - y * y * (4.0 * x * x - y * y) / (w * w);
        let sum = (s * q.ln_1p()).exp_m1();
        u(x) * (a.exp_m1() * b.exp_m1() - sum)
    };
    let integrand = |y: f64| g(y) * y.powf(-1.0 - 2.0 * s);
    // On (0, delta) the second difference is replaced by its Taylor term
    // -u''(x) y^2 (next term is O(delta^{4-2s})).
    let delta = 1e-4f64;
    let u2 = -2.0 * s * w.powf(s - 1.0) + 4.0 * s * (s - 1.0) * x * x * w.powf(s - 2.0);
    let core = -u2 * delta.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s);
    let (b1, b2) = (1.0 - x.abs(), 1.0 + x.abs());
    let near = adaptive_simpson(&integrand, delta, b1, 1e-11) + adaptive_simpson(&integrand, b1, b2, 1e-11);
    // Beyond 1 + |x| both shifted points are outside the support.
    let far = 2.0 * u(x) * b2.powf(-2.0 * s) / (2.0 * s);
    c * (core + near + far)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

#[test]
fn criterion_02_profile_constant() {
    let t0 = Instant::now();
    let s = 0.75;
    let closed = 4f64.powf(s) * gamma_fn(0.5 + s) * gamma_fn(1.0 + s) / gamma_fn(0.5);
    let oracle_dev = [-0.6, -0.3, 0.0, 0.45, 0.75]
        .iter()
        .map(|&x| (profile_by_quadrature(s, x) - closed).abs() / closed)
        .fold(0.0f64, f64::max);
    let kernel = KernelSpec::fractional_laplacian(1, s).unwrap();
    let grid = UniformGrid::symmetric(3.0, 1.0 / 512.0).unwrap();
    let gf = GridFunction::from_fn(grid, FarFieldModel::Zero, |x| (1.0 - x * x).max(0.0).powf(s)).unwrap();
    let field = apply_operator_field(&gf, &kernel).unwrap();
    let mut dev = 0.0f64;
    for i in 0..grid.len {
        let x = grid.x(i);
        if x.abs() < 0.8 {
            dev = dev.max((-field.values[i] - closed).abs() / closed);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = dev <= 1e-2 && oracle_dev <= 1e-6 && secs <= 60.0;
    report(2, pass, format!("grid sup dev {dev:.3e}, quadrature oracle dev {oracle_dev:.3e}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_03_comparison_fuzz() {
    let t0 = Instant::now();
    let r = fuzz_comparison(100, 0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = r.trials.len() == 100 && r.violations == 0 && secs <= 120.0;
    report(3, pass, format!("{} trials, {} violations, {secs:.1} s", r.trials.len(), r.violations));
    assert!(pass);
}

#[test]
fn criterion_04_eigenpair_pipeline() {
    let t0 = Instant::now();
    let spec = worked_spec();
    let e = worked_pair();
    let inc = e.increments();
    let decreasing = inc.windows(2).all(|w| w[1] < w[0]);
    let scale = 1.0 + e.lambda_star.abs();
    let final_ok = e.final_gap() <= 1e-2 * scale;
    let b = e.bounds;
    let sandwich = b.lower <= e.lambda_star && e.lambda_star <= b.upper;
    let gap = b.upper - b.lower;

    let spec_r = spec.with_plan(refined_plan(&spec.truncation_plan)).unwrap();
    let r = extract_eigenpair(&spec_r, &ExtractConfig::worked().refined()).unwrap();
    let gap_r = r.bounds.upper - r.bounds.lower;
    let sandwich_r = r.bounds.lower <= r.lambda_star && r.lambda_star <= r.bounds.upper;
    let secs = t0.elapsed().as_secs_f64();
    let pass = decreasing && final_ok && sandwich && gap <= 0.15 * scale && sandwich_r && gap_r < gap && secs <= 600.0;
    report(
        4,
        pass,
        format!(
            "lambda* {:.6} in [{:.6}, {:.6}], final increment {:.3e}, gap {gap:.3e} -> {gap_r:.3e} refined, increments decreasing {decreasing}, {secs:.1} s",
            e.lambda_star, b.lower, b.upper, e.final_gap()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_shift_covariance() {
    let t0 = Instant::now();
    let spec = worked_spec();
    let base = worked_pair();
    let shifted =
        extract_eigenpair(&spec.with_source(spec.source.clone().plus_constant(1.0)), &ExtractConfig::worked()).unwrap();
    let err = (shifted.lambda_star - base.lambda_star - 1.0).abs();
    let secs = t0.elapsed().as_secs_f64();
    let pass = err <= 1e-3;
    report(5, pass, format!("|lambda(f+1) - lambda(f) - 1| = {err:.3e}, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_06_monotonicity() {
    let spec = worked_spec();
    let bumped = spec.with_source(spec.source.clone().with_bump(Bump { height: 1.0, center: 0.0, width: 1.0 }));
    let r = check_monotonicity(&spec, &bumped, &ExtractConfig::worked()).unwrap();
    let pass = r.gap > 1e-2 && r.gap <= r.sup_diff + 1e-2;
    report(
        6,
        pass,
        format!("gap {:.4} with sup(f2 - f1) = {:.4}, upper bound from u1 {:.4}", r.gap, r.sup_diff, r.upper_from_u1),
    );
    assert!(pass);
}

#[test]
fn criterion_07_uniqueness() {
    let spec = worked_spec();
    let a = worked_pair();
    let other = ExtractConfig {
        h: 0.2,
        alphas: (0..14).map(|k| 0.3 * (1.0f64 / 1.8).powi(k)).collect(),
        x0: 1.0,
        ..ExtractConfig::worked()
    };
    let b = extract_eigenpair(&spec, &other).unwrap();
    let r = check_uniqueness(a, &b).unwrap();
    let pass = r.passed;
    report(
        7,
        pass,
        format!(
            "aligned sup error {:.3e} <= {:.3e} (offset {:.4}, worst at x = {}), |d lambda| {:.2e}",
            r.sup_error, r.tolerance, r.offset, r.worst_x, r.lambda_diff
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_nonexistence_probe() {
    let t0 = Instant::now();
    let cfg = NonexistConfig::default();
    let linear = ProblemSpec::power_model(0.75, 2.0, 1.0, 1.0, vec![4.0]).unwrap();
    let sqrt = ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![4.0]).unwrap();
    let a = detect_nonexistence(&linear, &cfg).unwrap();
    let b = detect_nonexistence(&sqrt, &cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = a.divergent && !b.divergent && secs <= 900.0;
    let fmt = |r: &[f64]| r.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ");
    report(
        8,
        pass,
        format!(
            "f=|x| divergent {} (ratios {}); f=|x|^0.5 divergent {} (ratios {}), {secs:.1} s",
            a.divergent,
            fmt(&a.ratios),
            b.divergent,
            fmt(&b.ratios)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_stable_law() {
    let t0 = Instant::now();
    let t = 1.0;
    let mut worst = 0.0f64;
    let mut seed = 100;
    for s in [0.6, 0.75, 0.9] {
        for xi in [0.5f64, 1.0, 2.0] {
            seed += 1;
            let (m, se) = empirical_cf(s, t, xi, 1_000_000, seed).unwrap();
            let exact = (-t * xi.powf(2.0 * s)).exp();
            worst = worst.max((m - exact).abs() / se);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 4.0 && secs <= 120.0;
    report(9, pass, format!("max |cf - exact| / stderr = {worst:.2} over 9 pairs, {secs:.1} s"));
    assert!(pass);
}

#[test]
fn criterion_10_long_run_cost() {
    let t0 = Instant::now();
    let spec = worked_spec();
    let e = worked_pair();
    let lam = e.lambda_star;
    let cfg =
        PathConfig { dt: 0.02, horizon: 400.0, n_paths: 10_000, seed: 11, x0: 0.0, return_radius: 1.0, burn_in: 0.0 };
    let fb = ControlPolicy::feedback(e);
    let est = estimate_long_run_cost(&fb, &spec, &cfg).unwrap();
    let half = estimate_long_run_cost(&fb, &spec, &PathConfig { dt: 0.01, ..cfg }).unwrap();
    let zero = estimate_long_run_cost(&ControlPolicy::zero(), &spec, &cfg).unwrap();
    let tol = (3.0 * est.stderr).max(0.05 * (1.0 + lam.abs()));
    let close = (est.mean - lam).abs() <= tol;
    let toward = (half.mean - lam).abs() < (est.mean - lam).abs();
    let zero_ok = zero.mean >= lam - 2.0 * zero.stderr;
    let secs = t0.elapsed().as_secs_f64();
    let pass = close && toward && zero_ok && secs <= 1200.0;
    report(
        10,
        pass,
        format!(
            "lambda* {lam:.4}; b_u cost {:.4} +- {:.4} (tol {tol:.4}), dt/2 {:.4} +- {:.4}, zero policy {:.4} +- {:.4}, {secs:.1} s",
            est.mean, est.stderr, half.mean, half.stderr, zero.mean, zero.stderr
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_11_representation() {
    let spec = worked_spec();
    let e = worked_pair();
    let rb = return_radius(&spec, e.lambda_star, 100.0);
    let cfg =
        PathConfig { dt: 0.01, horizon: 200.0, n_paths: 100_000, seed: 5, x0: 0.0, return_radius: rb, burn_in: 0.0 };
    let starts = [rb + 1.0, -(rb + 1.5), rb + 2.0, -(rb + 2.5), rb + 3.0];
    let fb = ControlPolicy::feedback(e);
    let coarse = verify_representation(e, &fb, &spec, &cfg, &starts).unwrap();
    let fine = verify_representation(e, &fb, &spec, &PathConfig { dt: 0.005, ..cfg }, &starts).unwrap();
    let mut holds = 0;
    let mut larger = 0;
    let mut rows = Vec::new();
    for (p, q) in coarse.points.iter().zip(&fine.points) {
        // Euler allowance: the change of the estimate under dt halving.
        let allowance = (p.rhs - q.rhs).abs();
        if !q.inconclusive() && q.u <= q.rhs + 3.0 * q.stderr + allowance {
            holds += 1;
        }
        let (d, se) = compare_representation(e, &fb, &fb.scaled(1.5), &spec, &cfg, p.x).unwrap();
        if d > 3.0 * se {
            larger += 1;
        }
        rows.push(format!("x={:.2}: u {:.3} vs {:.3}+-{:.3}", p.x, q.u, q.rhs, q.stderr));
    }
    let pass = holds == 5 && larger >= 4;
    report(11, pass, format!("inequality at {holds}/5, suboptimal larger at {larger}/5; {}", rows.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_12_dynkin_identity() {
    let spec = worked_spec();
    let e = worked_pair();
    let psis = [
        TestFunction::Polynomial { center: 0.0, radius: 2.0, power: 3 },
        TestFunction::Polynomial { center: 0.5, radius: 3.0, power: 4 },
        TestFunction::Bump { center: 0.0, radius: 2.5 },
    ];
    let policies = [ControlPolicy::zero(), ControlPolicy::feedback(e)];
    let dt = 2e-3;
    let mut agree = 0;
    let mut worst = 0.0f64;
    for (i, psi) in psis.iter().enumerate() {
        let table = GeneratorTable::new(*psi, &spec.kernel, 1.0 / 64.0, 20.0).unwrap();
        for (j, pol) in policies.iter().enumerate() {
            let r = dynkin_check(pol, &spec, *psi, &table, 0.3, 0.5, dt, 40_000, 7 + (3 * i + j) as u64).unwrap();
            worst = worst.max((r.lhs - r.rhs).abs() / r.diff_stderr);
            if r.agrees(4.0, dt) {
                agree += 1;
            }
        }
    }
    let pass = agree == 6;
    report(12, pass, format!("{agree}/6 pairs agree, worst |lhs - rhs| / stderr = {worst:.2}"));
    assert!(pass);
}

#[test]
fn criterion_13_lipschitz_probe() {
    let spec = worked_spec();
    let mut ladder = vec![worked_pair().u.clone()];
    for h in [0.125, 0.0625] {
        let cfg = ExtractConfig { h, ..ExtractConfig::worked() };
        ladder.push(extract_eigenpair(&spec, &cfg).unwrap().u);
    }
    let r = probe_lipschitz(&ladder, &spec, 2.0).unwrap();
    let lips: Vec<String> = r.rows.iter().map(|d| format!("{:.4}", d.measured_lip)).collect();
    let pass = r.stable;
    report(13, pass, format!("measured Lipschitz on B_2 over h = 0.25, 0.125, 0.0625: {}", lips.join(", ")));
    assert!(pass);
}
