//! Quadrature rules and special-function helpers.

use std::f64::consts::PI;
use std::sync::OnceLock;

use statrs::function::gamma::gamma;

/// Gauss-Legendre nodes and weights mapped to [0, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Newton on P_n starting from the Chebyshev-like guess.
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_and_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-15 {
                    let (_, d) = legendre_and_derivative(n, z);
                    dp = d;
                    break;
                }
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = 0.5 * (1.0 - z);
            nodes[n - 1 - i] = 0.5 * (1.0 + z);
            weights[i] = 0.5 * w;
            weights[n - 1 - i] = 0.5 * w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integral of `f` over [a, b].
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let len = b - a;
        let mut acc = 0.0;
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(a + len * t);
        }
        acc * len
    }
}

fn legendre_and_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

pub fn gl8() -> &'static GaussLegendre {
    static R: OnceLock<GaussLegendre> = OnceLock::new();
    R.get_or_init(|| GaussLegendre::new(8))
}

pub fn gl16() -> &'static GaussLegendre {
    static R: OnceLock<GaussLegendre> = OnceLock::new();
    R.get_or_init(|| GaussLegendre::new(16))
}

pub fn gl32() -> &'static GaussLegendre {
    static R: OnceLock<GaussLegendre> = OnceLock::new();
    R.get_or_init(|| GaussLegendre::new(32))
}

/// Integral of `f(y)` over [y0, inf) by Gauss-Legendre on geometric panels
/// [y0 q^k, y0 q^{k+1}] with q = 2, up to `y_max`. Returns (value, last panel end).
pub fn geometric_panels<F: FnMut(f64) -> f64>(y0: f64, y_max: f64, mut f: F) -> (f64, f64) {
    let rule = gl16();
    let mut a = y0;
    let mut acc = 0.0;
    while a < y_max {
        let b = 2.0 * a;
        acc += rule.integrate(a, b, &mut f);
        a = b;
    }
    (acc, a)
}

/// Gamma function (statrs Lanczos, about 15 significant digits).
pub fn gamma_fn(x: f64) -> f64 {
    gamma(x)
}

/// Coefficient C with (-Delta)^s |x|^beta = C |x|^(beta - 2s) in one dimension,
/// valid for -1 < beta < 2s.
pub fn power_symbol(beta: f64, s: f64) -> f64 {
    4f64.powf(s) * gamma_fn((beta + 1.0) / 2.0) * gamma_fn(s - beta / 2.0)
        / (gamma_fn(-beta / 2.0) * gamma_fn((1.0 + beta) / 2.0 - s))
}

/// (-Delta)^s (1 - x^2)_+^s on (-1, 1) in one dimension.
pub fn bump_profile_constant(s: f64) -> f64 {
    4f64.powf(s) * gamma_fn(0.5 + s) * gamma_fn(1.0 + s) / gamma_fn(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exact_on_polynomials() {
        let g = GaussLegendre::new(8);
        for k in 0..16 {
            let v = g.integrate(0.0, 2.0, |x| x.powi(k));
            let exact = 2f64.powi(k + 1) / (k + 1) as f64;
            assert!((v - exact).abs() < 1e-12 * exact, "k={k} {v} {exact}");
        }
    }

    #[test]
    fn geometric_panels_power_tail() {
        let s = 0.75;
        let (v, end) = geometric_panels(0.5, 1e14, |y| y.powf(-1.0 - 2.0 * s));
        let rem = end.powf(-2.0 * s) / (2.0 * s);
        let exact = 0.5f64.powf(-2.0 * s) / (2.0 * s);
        let err = ((v + rem) - exact).abs() / exact;
        assert!(err < 1e-13, "{err}");
    }

    #[test]
    fn power_symbol_matches_quadratic_limit() {
        // beta = 0 gives a constant, annihilated by the operator.
        assert!(power_symbol(1e-12, 0.7).abs() < 1e-9);
    }
}
