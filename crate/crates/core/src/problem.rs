//! Problem instances: fractional order, Hamiltonian with its Lagrangian,
//! source term, and sampled checks of the standing assumptions.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::operator::KernelSpec;

/// Fractional order s of the operator, restricted to (1/2, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalOrder {
    s: f64,
}

impl FractionalOrder {
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.5 && s < 1.0) {
            return Err(Error::Validation(format!("fractional order s = {s} outside (1/2, 1)")));
        }
        Ok(FractionalOrder { s })
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

/// Writes the d x d coefficient matrix a(x) (row-major) into the output slice.
pub type MatrixField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Writes the drift vector b(x) into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum HamiltonianKind {
    /// H(x, p) = |p|^m / m.
    PowerLaw,
    /// H(x, p) = (p . a(x) p)^{m/2} / m + b(x) . p, with a(x) positive definite.
    /// `period`, when set, declares x -> H(x, p) periodic with that period.
    AnisotropicPower { a: MatrixField, b: VectorField, period: Option<f64> },
}

impl fmt::Debug for HamiltonianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HamiltonianKind::PowerLaw => write!(f, "PowerLaw"),
            HamiltonianKind::AnisotropicPower { period, .. } => {
                write!(f, "AnisotropicPower {{ period: {period:?} }}")
            }
        }
    }
}

/// Hamiltonian H(x, p) + h0 together with the constants of the growth and
/// scaling assumptions. `h0` is an additive constant (H(x, 0) = h0 for the
/// power law).
#[derive(Debug, Clone)]
pub struct HamiltonianSpec {
    pub kind: HamiltonianKind,
    pub m: f64,
    pub m_conj: f64,
    pub kappa: f64,
    pub b_m: f64,
    pub c_h3: f64,
    pub c_h1: f64,
    pub h0: f64,
}

impl HamiltonianSpec {
    /// H = |p|^m / m with the sharp constants: kappa = max(m, 1),
    /// b_m = (m - 1)/m and C = 0 in the scaling inequality.
    pub fn power_law(m: f64) -> Result<Self> {
        check_m(m)?;
        Ok(HamiltonianSpec {
            kind: HamiltonianKind::PowerLaw,
            m,
            m_conj: m / (m - 1.0),
            kappa: m.max(1.0),
            b_m: (m - 1.0) / m,
            c_h3: 0.0,
            c_h1: 2f64.powf(m),
            h0: 0.0,
        })
    }

    /// Anisotropic power Hamiltonian; the assumption constants are inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn anisotropic(
        m: f64,
        a: MatrixField,
        b: VectorField,
        period: Option<f64>,
        kappa: f64,
        b_m: f64,
        c_h3: f64,
        c_h1: f64,
    ) -> Result<Self> {
        check_m(m)?;
        Ok(HamiltonianSpec {
            kind: HamiltonianKind::AnisotropicPower { a, b, period },
            m,
            m_conj: m / (m - 1.0),
            kappa,
            b_m,
            c_h3,
            c_h1,
            h0: 0.0,
        })
    }

    pub fn with_offset(mut self, h0: f64) -> Self {
        self.h0 = h0;
        self
    }

    /// True when x -> H(x, p) is constant or declared periodic.
    pub fn is_translation_structured(&self) -> bool {
        match &self.kind {
            HamiltonianKind::PowerLaw => true,
            HamiltonianKind::AnisotropicPower { period, .. } => period.is_some(),
        }
    }

    fn coeffs(&self, x: &[f64]) -> Option<([f64; 4], [f64; 2])> {
        match &self.kind {
            HamiltonianKind::PowerLaw => None,
            HamiltonianKind::AnisotropicPower { a, b, .. } => {
                let d = x.len();
                let mut am = [0.0; 4];
                let mut bv = [0.0; 2];
                a(x, &mut am[..d * d]);
                b(x, &mut bv[..d]);
                Some((am, bv))
            }
        }
    }

    /// Checks positive definiteness of a(x) at the point.
    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if let Some((a, _)) = self.coeffs(x) {
            let ok = match x.len() {
                1 => a[0] > 0.0,
                2 => a[0] > 0.0 && a[0] * a[3] - a[1] * a[2] > 0.0 && (a[1] - a[2]).abs() < 1e-12,
                _ => false,
            };
            if !ok {
                return Err(Error::Validation(format!("coefficient a(x) not positive definite at x = {x:?}")));
            }
        }
        Ok(())
    }

    /// H(x, p).
    pub fn h(&self, x: &[f64], p: &[f64]) -> f64 {
        let m = self.m;
        match self.coeffs(x) {
            None => norm(p).powf(m) / m + self.h0,
            Some((a, b)) => {
                let q = quad_form(&a, p);
                q.powf(0.5 * m) / m + dot(&b, p) + self.h0
            }
        }
    }

    /// Gradient of H in p, written into `out`.
    pub fn grad_p(&self, x: &[f64], p: &[f64], out: &mut [f64]) {
        let m = self.m;
        match self.coeffs(x) {
            None => {
                let r = norm(p);
                let c = if r > 0.0 { r.powf(m - 2.0) } else { 0.0 };
                for (o, pi) in out.iter_mut().zip(p) {
                    *o = c * pi;
                }
            }
            Some((a, b)) => {
                let d = p.len();
                let q = quad_form(&a, p);
                let c = if q > 0.0 { q.powf(0.5 * m - 1.0) } else { 0.0 };
                for i in 0..d {
                    let mut ap = 0.0;
                    for j in 0..d {
                        ap += a[i * d + j] * p[j];
                    }
                    out[i] = c * ap + b[i];
                }
            }
        }
    }

    /// Lagrangian l(x, xi) = sup_p {p . xi - H(x, p)}: closed form for the
    /// power law, numeric maximization otherwise.
    pub fn lagrangian(&self, x: &[f64], xi: &[f64]) -> f64 {
        match self.kind {
            HamiltonianKind::PowerLaw => norm(xi).powf(self.m_conj) / self.m_conj - self.h0,
            HamiltonianKind::AnisotropicPower { .. } => self.legendre_numeric(x, xi).0,
        }
    }

    /// Numeric Legendre transform: returns (value, maximizing p).
    pub fn legendre_numeric(&self, x: &[f64], xi: &[f64]) -> (f64, [f64; 2]) {
        let d = xi.len();
        let mut p = [0.0; 2];
        if d == 1 {
            // grad_p H is increasing in p: bisection on grad_p H(p) = xi.
            let g = |pp: f64| {
                let mut o = [0.0];
                self.grad_p(x, &[pp], &mut o);
                o[0] - xi[0]
            };
            let (mut lo, mut hi) = (-1.0, 1.0);
            while g(lo) > 0.0 {
                lo *= 2.0;
            }
            while g(hi) < 0.0 {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                    break;
                }
            }
            p[0] = 0.5 * (lo + hi);
        } else {
            // Damped Newton on the concave objective p . xi - H(x, p).
            let obj = |pp: &[f64]| dot(pp, xi) - self.h(x, pp);
            for _ in 0..200 {
                let mut gr = [0.0; 2];
                self.grad_p(x, &p[..d], &mut gr[..d]);
                let r = [xi[0] - gr[0], xi[1] - gr[1]];
                if norm(&r[..d]) < 1e-13 * (1.0 + norm(&xi[..d])) {
                    break;
                }
                let hs = self.hessian_fd(x, &p[..d]);
                let det = hs[0] * hs[3] - hs[1] * hs[2];
                let step = if det.abs() > 1e-300 {
                    [(hs[3] * r[0] - hs[1] * r[1]) / det, (-hs[2] * r[0] + hs[0] * r[1]) / det]
                } else {
                    r
                };
                let f0 = obj(&p[..d]);
                let mut t = 1.0;
                loop {
                    let cand = [p[0] + t * step[0], p[1] + t * step[1]];
                    if obj(&cand[..d]) >= f0 || t < 1e-12 {
                        p = cand;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        (dot(&p[..d], xi) - self.h(x, &p[..d]), p)
    }

    fn hessian_fd(&self, x: &[f64], p: &[f64]) -> [f64; 4] {
        let d = p.len();
        let mut hs = [0.0; 4];
        for j in 0..d {
            let e = 1e-6 * (1.0 + p[j].abs());
            let mut pp = [p[0], if d > 1 { p[1] } else { 0.0 }];
            let mut pm = pp;
            pp[j] += e;
            pm[j] -= e;
            let mut gp = [0.0; 2];
            let mut gm = [0.0; 2];
            self.grad_p(x, &pp[..d], &mut gp[..d]);
            self.grad_p(x, &pm[..d], &mut gm[..d]);
            for i in 0..d {
                hs[i * 2 + j] = (gp[i] - gm[i]) / (2.0 * e);
            }
        }
        if d == 1 {
            hs[3] = 1.0;
        }
        hs
    }

    // One-dimensional helpers used by the grid solvers.

    pub fn h1(&self, x: f64, p: f64) -> f64 {
        self.h(&[x], &[p])
    }

    pub fn grad1(&self, x: f64, p: f64) -> f64 {
        let mut o = [0.0];
        self.grad_p(&[x], &[p], &mut o);
        o[0]
    }

    pub fn lagrangian1(&self, x: f64, xi: f64) -> f64 {
        self.lagrangian(&[x], &[xi])
    }

    /// Minimizer p*(x) of p -> H(x, p) in one dimension.
    pub fn p_star1(&self, x: f64) -> f64 {
        match self.kind {
            HamiltonianKind::PowerLaw => 0.0,
            HamiltonianKind::AnisotropicPower { .. } => self.legendre_numeric(&[x], &[0.0]).1[0],
        }
    }

    /// Solves H(x, p) = r on the branch p >= p* (`upper`) or p <= p*.
    /// Returns p* when r is below the minimum of H(x, .).
    pub fn invert_branch1(&self, x: f64, r: f64, upper: bool) -> f64 {
        if let HamiltonianKind::PowerLaw = self.kind {
            let v = (self.m * (r - self.h0).max(0.0)).powf(1.0 / self.m);
            return if upper { v } else { -v };
        }
        let ps = self.p_star1(x);
        if r <= self.h1(x, ps) {
            return ps;
        }
        let dir = if upper { 1.0 } else { -1.0 };
        let mut step = 1.0;
        while self.h1(x, ps + dir * step) < r {
            step *= 2.0;
        }
        let (mut lo, mut hi) = (0.0, step);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.h1(x, ps + dir * mid) < r {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + hi) {
                break;
            }
        }
        ps + dir * 0.5 * (lo + hi)
    }
}

fn check_m(m: f64) -> Result<()> {
    if !(m > 1.0) || !m.is_finite() {
        return Err(Error::Validation(format!("gradient exponent m = {m} must exceed 1")));
    }
    Ok(())
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(a: &[f64; 4], p: &[f64]) -> f64 {
    let d = p.len();
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += p[i] * a[i * d + j] * p[j];
        }
    }
    q.max(0.0)
}

/// Piecewise-linear table on increasing abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl Table1 {
    pub fn new(xs: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if xs.len() < 2 || xs.len() != values.len() {
            return Err(Error::Validation("table needs at least two matching points".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("table abscissae must increase".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("table values must be finite".into()));
        }
        Ok(Table1 { xs, values })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.xs[0] && x <= *self.xs.last().unwrap()
    }

    pub fn interp(&self, x: f64) -> f64 {
        interp_linear(&self.xs, &self.values, x)
    }
}

/// Linear interpolation with constant extension beyond the ends.
pub fn interp_linear(xs: &[f64], vs: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return vs[0];
    }
    if x >= xs[n - 1] {
        return vs[n - 1];
    }
    let k = xs.partition_point(|&t| t <= x) - 1;
    let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
    vs[k] + t * (vs[k + 1] - vs[k])
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// f(x) = c0 |x|^gamma, optionally overridden by tabulated values on the
    /// table's range (first coordinate).
    PowerGrowth { c0: f64, gamma: f64, core: Option<Table1> },
    /// Tabulated values with power-law tails v_end (|x|/|x_end|)^gamma.
    Tabulated { table: Table1, gamma: f64 },
}

/// Gaussian bump height * exp(-|x - center e_1|^2 / (2 width^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub height: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerm {
    pub kind: SourceKind,
    pub bumps: Vec<Bump>,
    /// Constant added so that H(x, 0) <= f. Reported eigenvalues subtract it.
    pub shift: f64,
    /// Declared growth constant C with |f| <= C (1 + |x|^gamma), if any.
    pub growth_const: Option<f64>,
}

impl SourceTerm {
    pub fn power(c0: f64, gamma: f64) -> Self {
        SourceTerm {
            kind: SourceKind::PowerGrowth { c0, gamma, core: None },
            bumps: Vec::new(),
            shift: 0.0,
            growth_const: None,
        }
    }

    pub fn gamma(&self) -> f64 {
        match &self.kind {
            SourceKind::PowerGrowth { gamma, .. } | SourceKind::Tabulated { gamma, .. } => *gamma,
        }
    }

    pub fn with_bump(mut self, bump: Bump) -> Self {
        self.bumps.push(bump);
        self
    }

    /// Adds a constant to f without touching the recorded shift.
    pub fn plus_constant(mut self, c: f64) -> Self {
        match &mut self.kind {
            SourceKind::PowerGrowth { c0, gamma, core } if *gamma == 0.0 && core.is_none() => {
                *c0 += c;
            }
            _ => self.bumps.push(Bump { height: c, center: 0.0, width: f64::INFINITY }),
        }
        self
    }

    /// f(x) including bumps and shift.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = norm(x);
        let base = match &self.kind {
            SourceKind::PowerGrowth { c0, gamma, core } => match core {
                Some(t) if x.len() == 1 && t.contains(x[0]) => t.interp(x[0]),
                Some(t) if x.len() > 1 && t.contains(r) => t.interp(r),
                _ => {
                    if *gamma == 0.0 {
                        *c0
                    } else {
                        c0 * r.powf(*gamma)
                    }
                }
            },
            SourceKind::Tabulated { table, gamma } => {
                let xv = if x.len() == 1 { x[0] } else { r };
                let lo = table.xs[0];
                let hi = *table.xs.last().unwrap();
                if xv > hi && hi > 0.0 {
                    table.values.last().unwrap() * (xv / hi).powf(*gamma)
                } else if xv < lo && lo < 0.0 {
                    table.values[0] * (xv / lo).powf(*gamma)
                } else {
                    table.interp(xv)
                }
            }
        };
        let mut bumps = 0.0;
        for b in &self.bumps {
            if b.width.is_infinite() {
                bumps += b.height;
                continue;
            }
            let mut d2 = (x[0] - b.center).powi(2);
            for xi in &x[1..] {
                d2 += xi * xi;
            }
            bumps += b.height * (-d2 / (2.0 * b.width * b.width)).exp();
        }
        base + bumps + self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Regime {
    Existence,
    NonexistenceProbe,
}

impl Regime {
    pub fn classify(gamma: f64, m: f64, s: f64) -> Regime {
        if gamma < m * (2.0 * s - 1.0) {
            Regime::Existence
        } else {
            Regime::NonexistenceProbe
        }
    }
}

/// A full problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub order: FractionalOrder,
    pub dim: usize,
    pub hamiltonian: HamiltonianSpec,
    pub source: SourceTerm,
    pub kernel: KernelSpec,
    pub truncation_plan: Vec<f64>,
    pub regime: Regime,
}

impl ProblemSpec {
    pub fn new(
        order: FractionalOrder,
        dim: usize,
        hamiltonian: HamiltonianSpec,
        source: SourceTerm,
        kernel: KernelSpec,
        truncation_plan: Vec<f64>,
    ) -> Result<Self> {
        let regime = Regime::classify(source.gamma(), hamiltonian.m, order.s());
        let spec = ProblemSpec { order, dim, hamiltonian, source, kernel, truncation_plan, regime };
        spec.check_structure()?;
        Ok(spec)
    }

    /// s, H = |p|^m/m, f = c0 |x|^gamma in one dimension with the default kernel.
    pub fn power_model(s: f64, m: f64, c0: f64, gamma: f64, plan: Vec<f64>) -> Result<Self> {
        let order = FractionalOrder::new(s)?;
        ProblemSpec::new(
            order,
            1,
            HamiltonianSpec::power_law(m)?,
            SourceTerm::power(c0, gamma),
            KernelSpec::fractional_laplacian(1, s)?,
            plan,
        )
    }

    fn check_structure(&self) -> Result<()> {
        FractionalOrder::new(self.order.s())?;
        check_m(self.hamiltonian.m)?;
        if !(self.dim == 1 || self.dim == 2) {
            return Err(Error::Validation(format!("dimension {} not in {{1, 2}}", self.dim)));
        }
        if (self.kernel.s - self.order.s()).abs() > 1e-15 || self.kernel.d != self.dim {
            return Err(Error::Validation("kernel order/dimension disagree with the spec".into()));
        }
        if self.source.gamma() < 0.0 || !self.source.gamma().is_finite() {
            return Err(Error::Validation("source growth exponent must be >= 0".into()));
        }
        if self.truncation_plan.is_empty()
            || self.truncation_plan.iter().any(|r| !(*r > 0.0))
            || self.truncation_plan.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Validation("truncation radii must be positive and increasing".into()));
        }
        Ok(())
    }

    pub fn s(&self) -> f64 {
        self.order.s()
    }

    pub fn m(&self) -> f64 {
        self.hamiltonian.m
    }

    pub fn n_max(&self) -> f64 {
        *self.truncation_plan.last().unwrap()
    }

    /// Source value at a point.
    pub fn f(&self, x: &[f64]) -> f64 {
        self.source.eval(x)
    }

    pub fn f1(&self, x: f64) -> f64 {
        self.source.eval(&[x])
    }

    /// Same instance with another source term (regime recomputed).
    pub fn with_source(&self, source: SourceTerm) -> Self {
        let mut out = self.clone();
        out.regime = Regime::classify(source.gamma(), out.hamiltonian.m, out.s());
        out.source = source;
        out
    }

    pub fn with_plan(&self, plan: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.truncation_plan = plan;
        out.check_structure()?;
        Ok(out)
    }
}

/// One sampled assumption check.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Estimated constant or smallest slack, depending on the check.
    pub metric: f64,
    pub witness: Option<Vec<f64>>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub regime: Regime,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Structured text rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!("regime: {:?}\n", self.regime);
        for c in &self.checks {
            s.push_str(&format!(
                "{:<5} {} metric={:e}{}{}\n",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.metric,
                c.witness.as_ref().map(|w| format!(" witness={w:?}")).unwrap_or_default(),
                if c.note.is_empty() { String::new() } else { format!(" ({})", c.note) }
            ));
        }
        s
    }

    /// CSV with one row per assumption.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("assumption,status,metric,witness,note\n");
        for c in &self.checks {
            let w = c
                .witness
                .as_ref()
                .map(|w| w.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{},{:.16e},{},{}\n",
                c.name,
                if c.passed { "pass" } else { "fail" },
                c.metric,
                w,
                c.note.replace(',', ";")
            ));
        }
        s
    }
}

/// Sample points x in [-2 n_max, 2 n_max] (along the first axis and the
/// diagonal in two dimensions).
pub fn sample_points(spec: &ProblemSpec, count: usize) -> Vec<Vec<f64>> {
    let l = 2.0 * spec.n_max();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let t = -l + 2.0 * l * k as f64 / (count - 1) as f64;
        if spec.dim == 1 {
            out.push(vec![t]);
        } else if k % 2 == 0 {
            out.push(vec![t, 0.0]);
        } else {
            out.push(vec![t / 2f64.sqrt(), t / 2f64.sqrt()]);
        }
    }
    out
}

/// Momenta with |p| <= 1e3, log-spaced magnitudes of both signs plus zero.
pub fn sample_momenta(dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]];
    for k in 0..41 {
        let r = 10f64.powf(-3.0 + 6.0 * k as f64 / 40.0);
        for sgn in [1.0, -1.0] {
            if dim == 1 {
                out.push(vec![sgn * r]);
            } else {
                out.push(vec![sgn * r, 0.0]);
                out.push(vec![sgn * r * 0.6, r * 0.8]);
            }
        }
    }
    out
}

/// Samples the standing assumptions and recomputes the regime.
pub fn validate_spec(spec: &ProblemSpec) -> Result<ValidationReport> {
    spec.check_structure()?;
    let xs = sample_points(spec, 401);
    let ps = sample_momenta(spec.dim);
    for x in &xs {
        spec.hamiltonian.check_point(x)?;
    }
    let hs = &spec.hamiltonian;
    let (s, m, gamma) = (spec.s(), hs.m, spec.source.gamma());
    let regime = Regime::classify(gamma, m, s);
    let mut checks = Vec::new();

    // (F1): growth bound and exponent restriction.
    let mut c_est: f64 = 0.0;
    let mut arg = xs[0].clone();
    for x in &xs {
        let f = spec.f(x);
        if !f.is_finite() {
            return Err(Error::Validation(format!("source not finite at {x:?}")));
        }
        let ratio = f.abs() / (1.0 + norm(x).powf(gamma));
        if ratio > c_est {
            c_est = ratio;
            arg = x.clone();
        }
    }
    let declared_ok = spec.source.growth_const.is_none_or(|c| c_est <= c);
    let exponent_ok = gamma < m * (2.0 * s - 1.0);
    checks.push(AssumptionCheck {
        name: "F1".into(),
        passed: declared_ok && exponent_ok,
        metric: c_est,
        witness: if declared_ok { None } else { Some(arg) },
        note: if exponent_ok { String::new() } else { format!("gamma = {gamma} >= m(2s-1) = {}", m * (2.0 * s - 1.0)) },
    });

    // (F2): the minimum of f over each sampled shell grows with the radius.
    let n_shells = 8;
    let lmax = 2.0 * spec.n_max();
    let mut shell_min = vec![f64::INFINITY; n_shells];
    for x in &xs {
        let r = norm(x);
        for (k, sm) in shell_min.iter_mut().enumerate() {
            let r0 = lmax * k as f64 / n_shells as f64;
            if r >= r0 {
                *sm = sm.min(spec.f(x));
            }
        }
    }
    let mut f2_ok = shell_min[n_shells - 1] > shell_min[0];
    let mut f2_w = None;
    for k in 1..n_shells {
        if shell_min[k] < shell_min[k - 1] {
            f2_ok = false;
            f2_w = Some(vec![lmax * k as f64 / n_shells as f64]);
            break;
        }
    }
    checks.push(AssumptionCheck {
        name: "F2".into(),
        passed: f2_ok,
        metric: shell_min[n_shells - 1] - shell_min[0],
        witness: f2_w,
        note: String::new(),
    });

    // (H1'): required constant over sampled tuples.
    let mut rng = ChaCha8Rng::seed_from_u64(0x4831);
    let mut c1: f64 = 0.0;
    let mut c1_arg = None;
    for _ in 0..4000 {
        let x = &xs[rng.random_range(0..xs.len())];
        let y = &xs[rng.random_range(0..xs.len())];
        let p = &ps[rng.random_range(0..ps.len())];
        let q = &ps[rng.random_range(0..ps.len())];
        let pq: Vec<f64> = p.iter().zip(q).map(|(a, b)| a + b).collect();
        let dx = norm(&x.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());
        let (np, nq) = (norm(p), norm(q));
        let denom = dx * (1.0 + np.powf(m)) + nq * (np.powf(m - 1.0) + nq.powf(m - 1.0));
        if denom <= 0.0 {
            continue;
        }
        let ratio = (hs.h(x, &pq) - hs.h(y, p)).abs() / denom;
        if ratio > c1 {
            c1 = ratio;
            c1_arg = Some([x.clone(), y.clone(), p.clone(), q.clone()].concat());
        }
    }
    let h1_ok = c1 <= hs.c_h1 * (1.0 + 1e-9);
    checks.push(AssumptionCheck {
        name: "H1'".into(),
        passed: h1_ok,
        metric: c1,
        witness: if h1_ok { None } else { c1_arg },
        note: format!("declared C = {}", hs.c_h1),
    });

    // (H2'): two-sided sandwich.
    let mut slack = f64::INFINITY;
    let mut h2_arg = None;
    for x in &xs {
        for p in &ps {
            let h = hs.h(x, p);
            let pm = norm(p).powf(m);
            let sl = (h - (pm / hs.kappa - hs.kappa)).min(hs.kappa * (1.0 + pm) - h);
            if sl < slack {
                slack = sl;
                h2_arg = Some([x.clone(), p.clone()].concat());
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "H2'".into(),
        passed: slack >= -1e-12,
        metric: slack,
        witness: if slack >= -1e-12 { None } else { h2_arg },
        note: format!("kappa = {}", hs.kappa),
    });

    // (H3).
    let h3 = check_h3_inequality(spec, 4000, 0x4833)?;
    checks.push(AssumptionCheck {
        name: "H3".into(),
        passed: h3.passed,
        metric: h3.min_slack,
        witness: h3.violation.clone(),
        note: format!("b_m = {}, C = {}", hs.b_m, hs.c_h3),
    });

    // (H4): strict midpoint convexity in p.
    let mut conv: f64 = f64::INFINITY;
    let mut h4_arg = None;
    for x in xs.iter().step_by(8) {
        for (i, p) in ps.iter().enumerate() {
            let q = &ps[(i * 7 + 3) % ps.len()];
            if norm(&p.iter().zip(q).map(|(a, b)| a - b).collect::<Vec<_>>()) == 0.0 {
                continue;
            }
            let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
            let gap = 0.5 * (hs.h(x, p) + hs.h(x, q)) - hs.h(x, &mid);
            let scale = 1.0 + hs.h(x, p).abs() + hs.h(x, q).abs();
            if gap / scale < conv {
                conv = gap / scale;
                h4_arg = Some([x.clone(), p.clone(), q.clone()].concat());
            }
        }
    }
    checks.push(AssumptionCheck {
        name: "H4".into(),
        passed: conv > 0.0,
        metric: conv,
        witness: if conv > 0.0 { None } else { h4_arg },
        note: String::new(),
    });

    Ok(ValidationReport { checks, regime })
}

/// Outcome of the sampled scaling inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct H3Report {
    pub passed: bool,
    pub min_slack: f64,
    pub samples: usize,
    /// (x, p, mu) of the first violating tuple.
    pub violation: Option<Vec<f64>>,
}

/// Checks mu H(x, p/mu) - H(x, p) >= (1 - mu)(b_m |p|^m - C) on random tuples.
pub fn check_h3_inequality(spec: &ProblemSpec, samples: usize, seed: u64) -> Result<H3Report> {
    let hs = &spec.hamiltonian;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = 2.0 * spec.n_max();
    let mut min_slack = f64::INFINITY;
    let mut violation = None;
    for _ in 0..samples {
        let x: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-l..l)).collect();
        let r = 10f64.powf(rng.random_range(-3.0..3.0));
        let p: Vec<f64> = if spec.dim == 1 {
            vec![if rng.random::<bool>() { r } else { -r }]
        } else {
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            vec![r * th.cos(), r * th.sin()]
        };
        let mu: f64 = rng.random_range(1e-3..1.0);
        let pm: Vec<f64> = p.iter().map(|v| v / mu).collect();
        let lhs = mu * hs.h(&x, &pm) - hs.h(&x, &p);
        let rhs = (1.0 - mu) * (hs.b_m * norm(&p).powf(hs.m) - hs.c_h3);
        let slack = (lhs - rhs) / (1.0 + lhs.abs());
        if slack < min_slack {
            min_slack = slack;
        }
        if slack < -1e-10 && violation.is_none() {
            let mut w = x.clone();
            w.extend(&p);
            w.push(mu);
            violation = Some(w);
        }
    }
    Ok(H3Report { passed: violation.is_none(), min_slack, samples, violation })
}

/// Chooses the shift so that H(x, 0) <= f on the sample grid, with margin
/// 1e-6 when a positive shift is needed. Shifts accumulate in `source.shift`.
pub fn normalize_source(spec: &ProblemSpec) -> ProblemSpec {
    let zero = vec![0.0; spec.dim];
    let mut sup = f64::NEG_INFINITY;
    for x in sample_points(spec, 4001) {
        sup = sup.max(spec.hamiltonian.h(&x, &zero) - spec.f(&x));
    }
    let mut out = spec.clone();
    if sup > 0.0 {
        out.source.shift += sup + 1e-6;
    }
    out
}

/// Public evaluation entry points with the positive-definiteness check.
pub fn eval_h(spec: &ProblemSpec, x: &[f64], p: &[f64]) -> Result<f64> {
    spec.hamiltonian.check_point(x)?;
    Ok(spec.hamiltonian.h(x, p))
}

pub fn eval_grad_p_h(spec: &ProblemSpec, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    spec.hamiltonian.check_point(x)?;
    let mut out = vec![0.0; p.len()];
    spec.hamiltonian.grad_p(x, p, &mut out);
    Ok(out)
}

pub fn eval_lagrangian(spec: &ProblemSpec, x: &[f64], xi: &[f64]) -> Result<f64> {
    spec.hamiltonian.check_point(x)?;
    Ok(spec.hamiltonian.lagrangian(x, xi))
}

/// Running cost f(x) + l(x, xi).
pub fn eval_running_cost(spec: &ProblemSpec, x: &[f64], xi: &[f64]) -> Result<f64> {
    Ok(spec.f(x) + eval_lagrangian(spec, x, xi)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> ProblemSpec {
        ProblemSpec::power_model(0.75, 2.0, 1.0, 0.5, vec![12.0, 24.0]).unwrap()
    }

    #[test]
    fn order_range() {
        assert!(FractionalOrder::new(0.3).is_err());
        assert!(FractionalOrder::new(0.5).is_err());
        assert!(FractionalOrder::new(1.0).is_err());
        assert!(FractionalOrder::new(0.75).is_ok());
    }

    #[test]
    fn regimes() {
        assert_eq!(worked().regime, Regime::Existence);
        let p = ProblemSpec::power_model(0.75, 2.0, 1.0, 1.0, vec![8.0]).unwrap();
        assert_eq!(p.regime, Regime::NonexistenceProbe);
        let r1 = validate_spec(&p).unwrap();
        let r2 = validate_spec(&p).unwrap();
        assert_eq!(r1.regime, r2.regime);
        assert!(!r1.get("F1").unwrap().passed);
    }

    #[test]
    fn worked_instance_validates() {
        let r = validate_spec(&worked()).unwrap();
        assert!(r.all_passed(), "{}", r.to_text());
        assert!(r.to_csv().lines().count() == 7);
    }

    #[test]
    fn malformed_m() {
        assert!(HamiltonianSpec::power_law(1.0).is_err());
        let mut p = worked();
        p.hamiltonian.m = 0.5;
        assert!(validate_spec(&p).is_err());
    }

    #[test]
    fn quadratic_values() {
        let h = HamiltonianSpec::power_law(2.0).unwrap();
        assert_eq!(h.h1(0.0, 3.0), 4.5);
        assert_eq!(h.grad1(0.0, 3.0), 3.0);
        assert_eq!(h.lagrangian1(0.0, 3.0), 4.5);
        assert_eq!(3.0 * 3.0 - h.lagrangian1(0.0, 3.0), 4.5);
        assert_eq!(h.h1(0.0, 0.0), 0.0);
        assert_eq!(h.grad1(0.0, 0.0), 0.0);
    }

    #[test]
    fn conjugate_exponent_identity() {
        for m in [1.1, 1.5, 2.0, 3.0, 7.5] {
            let h = HamiltonianSpec::power_law(m).unwrap();
            assert!((1.0 / h.m + 1.0 / h.m_conj - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn h3_power_law() {
        let r = check_h3_inequality(&worked(), 2000, 1).unwrap();
        assert!(r.passed);
        assert!(r.min_slack > -1e-12);
    }

    #[test]
    fn h3_rejects_unit_b_for_quadratic() {
        // (1/mu - 1)|p|^2/2 >= (1 - mu) b |p|^2 fails near mu = 1 once b > 1/2.
        let mut p = worked();
        p.hamiltonian.b_m = 1.0;
        let r = check_h3_inequality(&p, 2000, 1).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn normalize_examples() {
        let p = worked();
        assert_eq!(normalize_source(&p).source.shift, 0.0);
        let mut q = p.clone();
        q.hamiltonian = q.hamiltonian.with_offset(1.0);
        let n1 = normalize_source(&q);
        assert!((n1.source.shift - 1.0).abs() < 1e-5);
        let n2 = normalize_source(&n1);
        assert_eq!(n1.source.shift, n2.source.shift);
    }

    #[test]
    fn anisotropic_rejects_indefinite() {
        let a: MatrixField = Arc::new(|_x, o| o[0] = -1.0);
        let b: VectorField = Arc::new(|_x, o| o[0] = 0.0);
        let h = HamiltonianSpec::anisotropic(2.0, a, b, None, 2.0, 0.5, 0.0, 4.0).unwrap();
        let mut p = worked();
        p.hamiltonian = h;
        assert!(eval_h(&p, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn anisotropic_numeric_legendre_matches_closed_form() {
        // l(x, xi) = |xi - b|^{m'} / (m' a^{m'/2}) in one dimension.
        let a: MatrixField = Arc::new(|x, o| o[0] = 1.5 + 0.5 * x[0].cos());
        let b: VectorField = Arc::new(|x, o| o[0] = 0.3 * x[0].sin());
        let h = HamiltonianSpec::anisotropic(3.0, a, b, Some(std::f64::consts::TAU), 4.0, 0.5, 1.0, 20.0).unwrap();
        for &x in &[0.0, 0.7, 2.0] {
            for &xi in &[-3.0, -0.2, 0.0, 0.5, 4.0] {
                let av = 1.5 + 0.5 * f64::cos(x);
                let bv = 0.3 * f64::sin(x);
                let mc = 1.5;
                let exact = (xi - bv).abs().powf(mc) / (mc * av.powf(mc / 2.0));
                let num = h.lagrangian1(x, xi);
                assert!((num - exact).abs() < 1e-9 * (1.0 + exact), "{x} {xi} {num} {exact}");
            }
        }
    }
}
