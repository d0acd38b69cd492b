//! The nonlocal operator
//!   Iu(x) = \int (u(x+y) - u(x) - 1_{|y|<1} y u'(x)) K(y) dy
//! on grid functions, and the tail seminorm H(u, E, a).
//!
//! Quadrature: Taylor closure for |y| < 2h, cell-wise cubic interpolation
//! integrated against K by Gauss-Legendre on [2h, Y], and far-field tails
//! beyond the grid end Y.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{periodic_nodes, FarFieldModel, FarTable, GridFunction};
use crate::par;
use crate::quad::{gamma_fn, geometric_panels, gl16, gl32};

/// Multiplier m(y) of a bounded-ratio kernel K(y) = m(y) |y|^{-1-2s}.
#[derive(Clone)]
pub struct Modulation(pub Arc<dyn Fn(f64) -> f64 + Send + Sync>);

impl fmt::Debug for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Modulation(..)")
    }
}

#[derive(Debug, Clone)]
pub enum KernelKind {
    FractionalLaplacian,
    Bounded { c_lower: f64, c_upper: f64, modulation: Modulation },
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub d: usize,
    pub s: f64,
    c: f64,
}

/// c_{d,s} = 4^s Gamma(d/2 + s) / (pi^{d/2} |Gamma(-s)|).
pub fn normalizing_constant(d: usize, s: f64) -> Result<f64> {
    if d < 1 || !(s > 0.0 && s < 1.0) {
        return Err(Error::Validation(format!("normalizing constant undefined for d={d}, s={s}")));
    }
    let dh = d as f64 / 2.0;
    Ok(4f64.powf(s) * gamma_fn(dh + s) / (std::f64::consts::PI.powf(dh) * gamma_fn(-s).abs()))
}

impl KernelSpec {
    pub fn fractional_laplacian(d: usize, s: f64) -> Result<Self> {
        let c = normalizing_constant(d, s)?;
        Ok(KernelSpec { kind: KernelKind::FractionalLaplacian, d, s, c })
    }

    /// K(y) = m(y)|y|^{-1-2s} in one dimension with c_lower <= m <= c_upper
    /// checked on samples.
    pub fn bounded(s: f64, c_lower: f64, c_upper: f64, modulation: Modulation) -> Result<Self> {
        if !(0.0 < c_lower && c_lower <= c_upper) {
            return Err(Error::Validation("need 0 < c_lower <= c_upper".into()));
        }
        let k = KernelSpec {
            kind: KernelKind::Bounded { c_lower, c_upper, modulation },
            d: 1,
            s,
            c: normalizing_constant(1, s)?,
        };
        k.check_ellipticity(2001)?;
        Ok(k)
    }

    pub fn c_ds(&self) -> f64 {
        self.c
    }

    pub fn ellipticity(&self) -> (f64, f64) {
        match &self.kind {
            KernelKind::FractionalLaplacian => (self.c, self.c),
            KernelKind::Bounded { c_lower, c_upper, .. } => (*c_lower, *c_upper),
        }
    }

    fn modulation(&self, y: f64) -> f64 {
        match &self.kind {
            KernelKind::FractionalLaplacian => self.c,
            KernelKind::Bounded { modulation, .. } => (modulation.0)(y),
        }
    }

    /// K(y) for y != 0 (one dimension, signed).
    pub fn density(&self, y: f64) -> f64 {
        self.modulation(y) * y.abs().powf(-1.0 - 2.0 * self.s)
    }

    pub fn is_default(&self) -> bool {
        matches!(self.kind, KernelKind::FractionalLaplacian)
    }

    pub fn is_symmetric(&self) -> bool {
        match &self.kind {
            KernelKind::FractionalLaplacian => true,
            KernelKind::Bounded { modulation, .. } => (0..200).all(|k| {
                let y = 10f64.powf(-3.0 + 6.0 * k as f64 / 199.0);
                ((modulation.0)(y) - (modulation.0)(-y)).abs() <= 1e-14 * (modulation.0)(y).abs()
            }),
        }
    }

    /// Checks lambda |y|^{-1-2s} <= K(y) <= Lambda |y|^{-1-2s} at sampled y.
    pub fn check_ellipticity(&self, samples: usize) -> Result<()> {
        let (lo, hi) = self.ellipticity();
        for k in 0..samples {
            let t = 10f64.powf(-4.0 + 8.0 * k as f64 / (samples - 1) as f64);
            for y in [t, -t] {
                let m = self.modulation(y);
                if !(m >= lo * (1.0 - 1e-12) && m <= hi * (1.0 + 1e-12)) {
                    return Err(Error::Validation(format!("kernel ellipticity violated at y = {y}")));
                }
            }
        }
        Ok(())
    }

    /// Integral of K(side t) for t in [y, inf).
    pub fn tail_mass(&self, y: f64, side: f64) -> f64 {
        let s2 = 2.0 * self.s;
        match &self.kind {
            KernelKind::FractionalLaplacian => self.c * y.powf(-s2) / s2,
            KernelKind::Bounded { .. } => {
                // t = y u^{-1/(2s)}
                let g = gl32();
                y.powf(-s2) / s2 * g.integrate(0.0, 1.0, |u| self.modulation(side * y * u.powf(-1.0 / s2)))
            }
        }
    }

    /// K(side t) and its first two derivatives in t > 0.
    fn side_derivatives(&self, t: f64, side: f64) -> [f64; 3] {
        let a = 1.0 + 2.0 * self.s;
        match &self.kind {
            KernelKind::FractionalLaplacian => {
                let k = self.c * t.powf(-a);
                [k, -a * k / t, a * (a + 1.0) * k / (t * t)]
            }
            KernelKind::Bounded { .. } => {
                let e = 1e-3 * t;
                let f = |tt: f64| self.density(side * tt);
                let (fm, f0, fp) = (f(t - e), f(t), f(t + e));
                [f0, (fp - fm) / (2.0 * e), (fp - 2.0 * f0 + fm) / (e * e)]
            }
        }
    }

    /// Integral of y^2 K(y) over |y| < r, halved (coefficient of u'').
    fn taylor_mass(&self, r: f64) -> f64 {
        let e = 2.0 - 2.0 * self.s;
        match &self.kind {
            KernelKind::FractionalLaplacian => self.c * r.powf(e) / e,
            KernelKind::Bounded { .. } => {
                // y = r u^{1/e}: int_0^r y^{1-2s} m(y) dy = r^e/e int_0^1 m dy
                let g = gl32();
                let one = |side: f64| g.integrate(0.0, 1.0, |u| self.modulation(side * r * u.powf(1.0 / e)));
                0.5 * r.powf(e) / e * (one(1.0) + one(-1.0))
            }
        }
    }

    /// Integral of y K(y) over r <= |y| < 1 (zero for symmetric kernels).
    fn compensator_drift(&self, r: f64) -> f64 {
        if r >= 1.0 || self.is_default() {
            return 0.0;
        }
        let g = gl32();
        // y = e^w
        g.integrate(r.ln(), 0.0, |w| {
            let y = w.exp();
            y * y * (self.density(y) - self.density(-y))
        })
    }
}

/// Cubic-in-cell weights for one side of the node.
#[derive(Debug, Clone)]
struct SideTable {
    cen: Vec<[f64; 4]>,
    bwd: Vec<[f64; 4]>,
    /// Linear weights on the cell [2h, 3h], used when it is the only cell:
    /// the cubic through offsets 0..3 gives offset 1 a negative weight.
    lin: [f64; 2],
    g: Vec<f64>,
    prefix: Vec<f64>,
}

impl SideTable {
    fn build(kernel: &KernelSpec, h: f64, jmax: usize, side: f64) -> SideTable {
        let rule = gl16();
        let cen_nodes = [-1.0, 0.0, 1.0, 2.0];
        let bwd_nodes = [-2.0, -1.0, 0.0, 1.0];
        let lag = |nodes: &[f64; 4], q: usize, t: f64| {
            let mut l = 1.0;
            for (b, nb) in nodes.iter().enumerate() {
                if b != q {
                    l *= (t - nb) / (nodes[q] - nb);
                }
            }
            l
        };
        let ncell = jmax + 2;
        let mut cen = vec![[0.0; 4]; ncell];
        let mut bwd = vec![[0.0; 4]; ncell];
        let mut lin = [0.0; 2];
        for (t, w) in rule.nodes.iter().zip(&rule.weights) {
            let k = kernel.density(side * (2.0 + t) * h) * h * w;
            lin[0] += (1.0 - t) * k;
            lin[1] += t * k;
        }
        for c in 2..ncell {
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                let k = kernel.density(side * (c as f64 + t) * h) * h * w;
                for q in 0..4 {
                    cen[c][q] += lag(&cen_nodes, q, *t) * k;
                    bwd[c][q] += lag(&bwd_nodes, q, *t) * k;
                }
            }
        }
        // g[j]: weight of offset j when every cell touching it is centered.
        let mut g = vec![0.0; jmax + 1];
        for (j, gj) in g.iter_mut().enumerate().skip(1) {
            let lo = j.saturating_sub(2).max(2);
            for c in lo..=(j + 1) {
                if c < ncell {
                    *gj += cen[c][j + 1 - c];
                }
            }
        }
        let mut prefix = vec![0.0; jmax + 2];
        for j in 1..=jmax {
            prefix[j + 1] = prefix[j] + g[j];
        }
        SideTable { cen, bwd, lin, g, prefix }
    }

    /// Weight of offset j (1 <= j <= J) when J offsets are available.
    fn weight(&self, big_j: usize, j: usize) -> f64 {
        if j + 4 <= big_j {
            return self.g[j];
        }
        if big_j == 3 {
            return match j {
                2 => self.lin[0],
                3 => self.lin[1],
                _ => 0.0,
            };
        }
        let mut w = 0.0;
        let lo = j.saturating_sub(2).max(2);
        let hi = (j + 1).min(big_j.saturating_sub(2));
        for c in lo..=hi {
            if c >= 2 {
                w += self.cen[c][j + 1 - c];
            }
        }
        if big_j >= 3 && j + 3 >= big_j && j <= big_j {
            w += self.bwd[big_j - 1][j + 3 - big_j];
        }
        w
    }

    /// Sum of the weights for offsets 1..=J.
    fn total(&self, big_j: usize) -> f64 {
        let full = big_j.saturating_sub(4);
        let mut acc = self.prefix[full + 1];
        for j in (full + 1)..=big_j {
            acc += self.weight(big_j, j);
        }
        acc
    }
}

/// Precomputed quadrature for a grid with spacing h and up to `n` nodes.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub h: f64,
    pub kernel: KernelSpec,
    right: Arc<SideTable>,
    left: Arc<SideTable>,
    /// Coefficient of the second difference u_{i+1} - 2u_i + u_{i-1}.
    pub taylor: f64,
    /// Compensator drift: the operator contains -drift * u'(x).
    pub drift: f64,
}

impl Stencil {
    pub fn new(kernel: &KernelSpec, h: f64, n: usize) -> Result<Stencil> {
        if kernel.d != 1 {
            return Err(Error::Precondition("grid operator is one-dimensional".into()));
        }
        if !(h > 0.0) {
            return Err(Error::Validation("grid spacing must be positive".into()));
        }
        let jmax = n.max(4);
        let right = Arc::new(SideTable::build(kernel, h, jmax, 1.0));
        let left =
            if kernel.is_symmetric() { right.clone() } else { Arc::new(SideTable::build(kernel, h, jmax, -1.0)) };
        let r = 2.0 * h;
        Ok(Stencil {
            h,
            kernel: kernel.clone(),
            right,
            left,
            taylor: kernel.taylor_mass(r) / (h * h),
            drift: kernel.compensator_drift(r),
        })
    }

    /// Weights (w_right, w_left) for offsets 1..=J on each side.
    pub fn side_weight(&self, right: bool, big_j: usize, j: usize) -> f64 {
        if right {
            self.right.weight(big_j, j)
        } else {
            self.left.weight(big_j, j)
        }
    }

    /// Adds coef * (grid part of I at node i) to a dense row over the n nodes:
    /// neighbor weights, Taylor closure, compensator (centered) and the
    /// diagonal, excluding tail masses.
    pub fn add_row(&self, i: usize, n: usize, coef: f64, row: &mut [f64]) {
        let jr = n - 1 - i;
        let jl = i;
        for j in 1..=jr {
            row[i + j] += coef * self.right.weight(jr, j);
        }
        for j in 1..=jl {
            row[i - j] += coef * self.left.weight(jl, j);
        }
        let diag = self.right.total(jr) + self.left.total(jl) + 2.0 * self.taylor;
        row[i] -= coef * diag;
        row[i + 1] += coef * self.taylor;
        row[i - 1] += coef * self.taylor;
        if self.drift != 0.0 {
            let d = coef * self.drift / (2.0 * self.h);
            row[i + 1] -= d;
            row[i - 1] += d;
        }
    }

    /// Grid part of Iu at node i from nodal values.
    pub fn apply_grid(&self, values: &[f64], i: usize) -> f64 {
        let n = values.len();
        let u0 = values[i];
        let jr = n - 1 - i;
        let jl = i;
        let mut acc = 0.0;
        for j in 1..=jr {
            acc += self.right.weight(jr, j) * (values[i + j] - u0);
        }
        for j in 1..=jl {
            acc += self.left.weight(jl, j) * (values[i - j] - u0);
        }
        acc += self.taylor * (values[i + 1] - 2.0 * u0 + values[i - 1]);
        if self.drift != 0.0 {
            acc -= self.drift * (values[i + 1] - values[i - 1]) / (2.0 * self.h);
        }
        acc
    }

    /// Tail masses (left, right) at node i of an n-node grid.
    pub fn tail_masses(&self, i: usize, n: usize) -> (f64, f64) {
        let yr = (n - 1 - i) as f64 * self.h;
        let yl = i as f64 * self.h;
        (self.kernel.tail_mass(yl, -1.0), self.kernel.tail_mass(yr, 1.0))
    }

    /// Integral of v(x + side t) K(side t) over t >= y where v is the far
    /// field of `gf`; `x` is the node position.
    pub fn far_integral(&self, gf: &GridFunction, x: f64, y: f64, side: f64) -> Result<f64> {
        let k = &self.kernel;
        match &gf.far {
            FarFieldModel::Zero => Ok(0.0),
            FarFieldModel::Constant(v) => Ok(v * k.tail_mass(y, side)),
            FarFieldModel::PowerGrowth { offset, a_left, a_right, beta, .. } => {
                if *beta >= 2.0 * k.s {
                    return Err(Error::Validation(format!("power growth beta = {beta} >= 2s: tail integral diverges")));
                }
                let a = if side > 0.0 { *a_right } else { *a_left };
                let grow = if a == 0.0 { 0.0 } else { a * power_tail(k, x, y, side, *beta, |r| r.powf(*beta)) };
                Ok(offset * k.tail_mass(y, side) + grow)
            }
            FarFieldModel::Tabulated { left, right } => {
                let t = if side > 0.0 { right } else { left };
                if t.tail_beta >= 2.0 * k.s {
                    return Err(Error::Validation("tabulated tail grows like |x|^{2s} or faster".into()));
                }
                Ok(table_tail(k, x, y, side, t))
            }
            FarFieldModel::Periodic { period } => periodic_tail(self, gf, y, side, *period),
        }
    }

    /// Iu at node i, including far-field tails.
    pub fn apply(&self, gf: &GridFunction, i: usize) -> Result<f64> {
        let n = gf.values.len();
        if i < 2 || i + 2 >= n {
            return Err(Error::Precondition(format!("node {i} closer than 2h to the grid boundary")));
        }
        let x = gf.grid.x(i);
        let (tl, tr) = self.tail_masses(i, n);
        let yr = (n - 1 - i) as f64 * self.h;
        let yl = i as f64 * self.h;
        let u0 = gf.values[i];
        let tails = self.far_integral(gf, x, yr, 1.0)? + self.far_integral(gf, x, yl, -1.0)? - u0 * (tl + tr);
        Ok(self.apply_grid(&gf.values, i) + tails)
    }
}

/// a-free part of the power tail: integral of r(|x + side t|) K(side t), t >= y.
fn power_tail<F: Fn(f64) -> f64>(k: &KernelSpec, x: f64, y: f64, side: f64, beta: f64, r: F) -> f64 {
    let y_max = 1e12 * (1.0 + y + x.abs());
    let (body, end) = geometric_panels(y, y_max, |t| r((x + side * t).abs()) * k.density(side * t));
    let m_end = k.density(side * end) * end.powf(1.0 + 2.0 * k.s);
    body + m_end * end.powf(beta - 2.0 * k.s) / (2.0 * k.s - beta)
}

fn table_tail(k: &KernelSpec, x: f64, y: f64, side: f64, t: &FarTable) -> f64 {
    let tb = t.tail_beta;
    let y_max = (t.z_end() - side * x).max(y);
    let (body, end) = geometric_panels(y, y_max, |s| t.value((x + side * s).abs()) * k.density(side * s));
    // continuation v_end (r / z_end)^tb beyond the last panel
    let m_end = k.density(side * end) * end.powf(1.0 + 2.0 * k.s);
    let r_end = (x + side * end).abs();
    body + t.value(r_end) * m_end * end.powf(-2.0 * k.s) / (2.0 * k.s - tb)
}

/// Mean part plus three integration-by-parts terms with mean-zero periodic
/// antiderivatives sampled at the grid end.
fn periodic_tail(st: &Stencil, gf: &GridFunction, y: f64, side: f64, period: f64) -> Result<f64> {
    let p = periodic_nodes(&gf.grid, period)?;
    let n = gf.values.len();
    let samples: Vec<f64> = if side > 0.0 {
        (0..p).map(|j| gf.values[n - 1 - p + j]).collect()
    } else {
        (0..p).map(|j| gf.values[p - j]).collect()
    };
    let (mean, anti) = periodic_antiderivatives(&samples, st.h);
    let kd = st.kernel.side_derivatives(y, side);
    let osc = -anti[0] * kd[0] + anti[1] * kd[1] - anti[2] * kd[2];
    Ok(mean * st.kernel.tail_mass(y, side) + osc)
}

/// Mean and the values at phase 0 of the first three mean-zero
/// antiderivatives of a periodic sample sequence.
fn periodic_antiderivatives(v: &[f64], h: f64) -> (f64, [f64; 3]) {
    let p = v.len();
    let mean = v.iter().sum::<f64>() / p as f64;
    let mut cur: Vec<f64> = v.iter().map(|a| a - mean).collect();
    let mut out = [0.0; 3];
    for o in out.iter_mut() {
        let mut next = vec![0.0; p];
        for j in 0..p - 1 {
            let a = cur[(j + p - 1) % p];
            let b = cur[j];
            let c = cur[j + 1];
            let d = cur[(j + 2) % p];
            next[j + 1] = next[j] + h * (-a + 13.0 * b + 13.0 * c - d) / 24.0;
        }
        let m = next.iter().sum::<f64>() / p as f64;
        for x in next.iter_mut() {
            *x -= m;
        }
        *o = next[0];
        cur = next;
    }
    (mean, out)
}

/// Iu(x_i) for the grid function at node i (at least 2h from both ends).
pub fn apply_operator(gf: &GridFunction, kernel: &KernelSpec, i: usize) -> Result<f64> {
    let st = Stencil::new(kernel, gf.h(), gf.values.len())?;
    st.apply(gf, i)
}

/// Iu on every node at least 2h from the ends.
#[derive(Debug, Clone)]
pub struct OperatorField {
    /// Values on the input grid; nodes not evaluated hold NaN.
    pub values: Vec<f64>,
    pub evaluated: Vec<bool>,
}

impl OperatorField {
    pub fn to_grid_function(&self, gf: &GridFunction) -> GridFunction {
        GridFunction { grid: gf.grid, values: self.values.clone(), far: FarFieldModel::Zero }
    }
}

pub fn apply_operator_field(gf: &GridFunction, kernel: &KernelSpec) -> Result<OperatorField> {
    let st = Stencil::new(kernel, gf.h(), gf.values.len())?;
    apply_field_with(&st, gf)
}

pub fn apply_field_with(st: &Stencil, gf: &GridFunction) -> Result<OperatorField> {
    let n = gf.values.len();
    let res = par::map_range(n, |i| if i < 2 || i + 2 >= n { Ok(None) } else { st.apply(gf, i).map(Some) });
    let mut values = vec![f64::NAN; n];
    let mut evaluated = vec![false; n];
    for (i, r) in res.into_iter().enumerate() {
        if let Some(v) = r? {
            values[i] = v;
            evaluated[i] = true;
        }
    }
    Ok(OperatorField { values, evaluated })
}

/// H(u, E, a) = sup_{x in E} \int |u(x+y) - u(x)| / (a + |y|^{1+2s}) dy over
/// the node indices in E. Linear interpolation of |u(x+y) - u(x)| between
/// nodes, first-order closure for |y| < 2h, far-field tails on panels.
pub fn tail_seminorm(gf: &GridFunction, kernel: &KernelSpec, nodes: &[usize], a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::Validation("tail seminorm needs a > 0".into()));
    }
    let n = gf.values.len();
    let h = gf.h();
    let q = 1.0 + 2.0 * kernel.s;
    let rho = |t: f64| 1.0 / (a + t.powf(q));
    let g = gl16();
    // hat weights for offsets j >= 2: the first hat is one-sided on [2h, 3h].
    let jmax = n;
    let mut hat = vec![0.0; jmax + 2];
    for (j, w) in hat.iter_mut().enumerate().skip(2) {
        let jf = j as f64;
        let right = g.integrate(jf * h, (jf + 1.0) * h, |t| (jf + 1.0 - t / h) * rho(t));
        let left = if j > 2 { g.integrate((jf - 1.0) * h, jf * h, |t| (t / h - jf + 1.0) * rho(t)) } else { 0.0 };
        *w = right + left;
    }
    // the last hat on each side is one-sided; correction handled per node.
    let inner = 2.0 * g.integrate(0.0, 2.0 * h, |t| t * rho(t));
    let tail_rho = |y: f64| {
        let (body, end) = geometric_panels(y, 1e12 * (1.0 + y), rho);
        body + end.powf(1.0 - q) / (q - 1.0)
    };
    let mut best: f64 = 0.0;
    for &i in nodes {
        if i < 2 || i + 2 >= n {
            return Err(Error::Precondition(format!("node {i} closer than 2h to the grid boundary")));
        }
        let u0 = gf.values[i];
        let x = gf.grid.x(i);
        let du = (gf.values[i + 1] - gf.values[i - 1]).abs() / (2.0 * h);
        let mut acc = inner * du;
        for (side, big_j) in [(1i64, n - 1 - i), (-1i64, i)] {
            for j in 2..=big_j {
                let idx = (i as i64 + side * j as i64) as usize;
                let mut w = hat[j];
                if j == big_j {
                    let jf = j as f64;
                    w -= g.integrate(jf * h, (jf + 1.0) * h, |t| (jf + 1.0 - t / h) * rho(t));
                }
                acc += w * (gf.values[idx] - u0).abs();
            }
            let y = big_j as f64 * h;
            let sf = side as f64;
            acc += match &gf.far {
                FarFieldModel::Zero => u0.abs() * tail_rho(y),
                FarFieldModel::Constant(v) => (v - u0).abs() * tail_rho(y),
                FarFieldModel::Periodic { period } => {
                    let p = periodic_nodes(&gf.grid, *period)?;
                    let mean_abs = (0..p).map(|k| (gf.values[k] - u0).abs()).sum::<f64>() / p as f64;
                    mean_abs * tail_rho(y)
                }
                _ => {
                    let beta = gf.far.growth();
                    if beta >= q - 1.0 {
                        return Err(Error::Validation("far field leaves L^1(omega_s)".into()));
                    }
                    let (body, end) =
                        geometric_panels(y, 1e12 * (1.0 + y), |t| (gf.far_value(x + sf * t) - u0).abs() * rho(t));
                    body + gf.far_value(x + sf * end).abs() * end.powf(1.0 - q) / (q - 1.0 - beta)
                }
            };
        }
        best = best.max(acc);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UniformGrid;

    #[test]
    fn normalizing_constant_examples() {
        let c = normalizing_constant(1, 0.5).unwrap();
        assert!((c - 1.0 / std::f64::consts::PI).abs() < 1e-13);
        assert!(normalizing_constant(1, 0.0).is_err());
        assert!(normalizing_constant(1, 1.0).is_err());
        for s in [0.1, 0.5, 0.75, 0.99] {
            assert!(normalizing_constant(2, s).unwrap() > 0.0);
        }
    }

    #[test]
    fn constants_are_annihilated() {
        let k = KernelSpec::fractional_laplacian(1, 0.75).unwrap();
        let g = UniformGrid::symmetric(4.0, 0.125).unwrap();
        let gf = GridFunction::from_fn(g, FarFieldModel::Constant(2.5), |_| 2.5).unwrap();
        let f = apply_operator_field(&gf, &k).unwrap();
        for (v, e) in f.values.iter().zip(&f.evaluated) {
            if *e {
                assert!(v.abs() < 1e-12, "{v}");
            }
        }
        assert!(!f.evaluated[0] && !f.evaluated[1] && f.evaluated[2]);
    }

    #[test]
    fn weights_positive() {
        let k = KernelSpec::fractional_laplacian(1, 0.6).unwrap();
        let st = Stencil::new(&k, 0.1, 64).unwrap();
        for big_j in 2..64 {
            for j in 1..=big_j {
                // offset 1 also carries the Taylor closure coefficient
                let w = st.side_weight(true, big_j, j) + if j == 1 { st.taylor } else { 0.0 };
                assert!(w >= 0.0, "J={big_j} j={j} w={w}");
            }
        }
    }

    #[test]
    fn power_growth_beta_too_large_is_rejected() {
        let k = KernelSpec::fractional_laplacian(1, 0.75).unwrap();
        let g = UniformGrid::symmetric(4.0, 0.25).unwrap();
        let gf = GridFunction::from_fn(g, FarFieldModel::power(1.0, 1.6, 4.0), |x| x.abs().powf(1.6)).unwrap();
        assert!(apply_operator(&gf, &k, 10).is_err());
    }
}
