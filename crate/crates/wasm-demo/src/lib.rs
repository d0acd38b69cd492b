use std::f64::consts::PI;

use wasm_bindgen::prelude::*;

use ergodic_hjb::ergodic::{extract_eigenpair, ExtractConfig};
use ergodic_hjb::grid::{FarFieldModel, GridFunction, UniformGrid};
use ergodic_hjb::levy::empirical_cf;
use ergodic_hjb::operator::{apply_operator_field, KernelSpec};
use ergodic_hjb::problem::ProblemSpec;

fn js_err(e: ergodic_hjb::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Series for plotting: x, numerical and exact values.
#[wasm_bindgen]
pub struct Series {
    xs: Vec<f64>,
    numeric: Vec<f64>,
    exact: Vec<f64>,
    max_rel_err: f64,
}

#[wasm_bindgen]
impl Series {
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }
    pub fn numeric(&self) -> Vec<f64> {
        self.numeric.clone()
    }
    pub fn exact(&self) -> Vec<f64> {
        self.exact.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn max_rel_err(&self) -> f64 {
        self.max_rel_err
    }
}

/// (-Delta)^s cos(kx) on a periodic grid against |k|^{2s} cos(kx), on the
/// central half of [-4 pi, 4 pi].
#[wasm_bindgen]
pub fn fourier_symbol(s: f64, k: f64, nodes: usize) -> Result<Series, JsError> {
    let kernel = KernelSpec::fractional_laplacian(1, s).map_err(js_err)?;
    let n = nodes.clamp(64, 8192);
    let grid = UniformGrid::new(-4.0 * PI, 8.0 * PI / n as f64, n + 1).map_err(js_err)?;
    let gf =
        GridFunction::from_fn(grid, FarFieldModel::Periodic { period: 2.0 * PI }, |x| (k * x).cos()).map_err(js_err)?;
    let field = apply_operator_field(&gf, &kernel).map_err(js_err)?;
    let sym = k.abs().powf(2.0 * s);
    let mut out = Series { xs: Vec::new(), numeric: Vec::new(), exact: Vec::new(), max_rel_err: 0.0 };
    for i in 0..grid.len {
        let x = grid.x(i);
        if x.abs() <= 2.0 * PI && field.evaluated[i] {
            let ex = sym * (k * x).cos();
            out.xs.push(x);
            out.numeric.push(-field.values[i]);
            out.exact.push(ex);
            out.max_rel_err = out.max_rel_err.max((-field.values[i] - ex).abs() / sym.max(1e-300));
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub struct Eigen {
    lambda: f64,
    lower: f64,
    upper: f64,
    xs: Vec<f64>,
    us: Vec<f64>,
    lambdas: Vec<f64>,
}

#[wasm_bindgen]
impl Eigen {
    #[wasm_bindgen(getter)]
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    #[wasm_bindgen(getter)]
    pub fn lower(&self) -> f64 {
        self.lower
    }
    #[wasm_bindgen(getter)]
    pub fn upper(&self) -> f64 {
        self.upper
    }
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }
    pub fn us(&self) -> Vec<f64> {
        self.us.clone()
    }
    /// lambda(alpha) along the discount ladder.
    pub fn lambda_table(&self) -> Vec<f64> {
        self.lambdas.clone()
    }
}

/// Eigenpair of (-Delta)^s u + |u'|^m / m = c0 |x|^gamma - lambda with the
/// default ladder (radii 6, 12, 24; h = 0.25; 13 discount levels).
#[wasm_bindgen]
pub fn eigenpair(s: f64, m: f64, c0: f64, gamma: f64) -> Result<Eigen, JsError> {
    let spec = ProblemSpec::power_model(s, m, c0, gamma, vec![6.0, 12.0, 24.0]).map_err(js_err)?;
    let e = extract_eigenpair(&spec, &ExtractConfig::worked()).map_err(js_err)?;
    let g = e.u.grid;
    let keep: Vec<usize> = (0..g.len).filter(|&k| g.x(k).abs() <= 12.0).collect();
    Ok(Eigen {
        lambda: e.lambda_star,
        lower: e.bounds.lower,
        upper: e.bounds.upper,
        xs: keep.iter().map(|&k| g.x(k)).collect(),
        us: keep.iter().map(|&k| e.u.values[k]).collect(),
        lambdas: e.lambda_table.iter().map(|r| r.lambda - e.shift).collect(),
    })
}

/// [empirical E cos(xi L_1), stderr, exp(-|xi|^{2s})] for the 2s-stable
/// sampler.
#[wasm_bindgen]
pub fn stable_cf(s: f64, xi: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let (m, se) = empirical_cf(s, 1.0, xi, samples.clamp(100, 5_000_000), seed).map_err(js_err)?;
    Ok(vec![m, se, (-xi.abs().powf(2.0 * s)).exp()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_series_is_accurate() {
        let r = fourier_symbol(0.75, 2.0, 1024).unwrap();
        assert!(r.max_rel_err < 1e-2, "{}", r.max_rel_err);
        assert_eq!(r.xs.len(), r.exact.len());
    }

    #[test]
    fn eigenpair_worked_instance() {
        let e = eigenpair(0.75, 2.0, 1.0, 0.5).unwrap();
        assert!(e.lower <= e.lambda && e.lambda <= e.upper + 1e-9);
        assert!((e.lambda - 2.775).abs() < 1e-2);
        assert_eq!(e.xs.len(), e.us.len());
    }

    #[test]
    fn cf_matches() {
        let v = stable_cf(0.75, 1.0, 200_000, 1).unwrap();
        assert!((v[0] - v[2]).abs() < 5.0 * v[1]);
    }
}
