use proptest::prelude::*;

use ergodic_hjb::grid::{FarFieldModel, GridFunction, UniformGrid};
use ergodic_hjb::operator::{apply_operator_field, KernelSpec};
use ergodic_hjb::problem::{check_h3_inequality, ProblemSpec};

const NODES: usize = 49;

fn grid() -> UniformGrid {
    UniformGrid::symmetric(3.0, 0.125).unwrap()
}

fn field(values: Vec<f64>, s: f64) -> Vec<(bool, f64)> {
    let gf = GridFunction::new(grid(), values, FarFieldModel::Zero).unwrap();
    let k = KernelSpec::fractional_laplacian(1, s).unwrap();
    let f = apply_operator_field(&gf, &k).unwrap();
    f.evaluated.into_iter().zip(f.values).collect()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, NODES)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_linear(u in values(), v in values(), a in -3.0f64..3.0, s in 0.55f64..0.95) {
        let w: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + y).collect();
        let (iu, iv, iw) = (field(u, s), field(v, s), field(w, s));
        for k in 0..NODES {
            if iw[k].0 {
                let expect = a * iu[k].1 + iv[k].1;
                prop_assert!((iw[k].1 - expect).abs() <= 1e-9 * (1.0 + expect.abs()), "node {k}");
            }
        }
    }

    #[test]
    fn reflection_commutes(u in values(), s in 0.55f64..0.95) {
        let mut r = u.clone();
        r.reverse();
        let (iu, ir) = (field(u, s), field(r, s));
        for k in 0..NODES {
            let j = NODES - 1 - k;
            if iu[k].0 && ir[j].0 {
                prop_assert!((iu[k].1 - ir[j].1).abs() <= 1e-9 * (1.0 + iu[k].1.abs()));
            }
        }
    }

    #[test]
    fn nonnegative_maximum_gives_nonpositive_operator(mut u in values(), s in 0.55f64..0.95, at in 8usize..41) {
        // Zero exterior: at a nonnegative global maximum, I u <= 0.
        let top = u.iter().cloned().fold(0.0f64, f64::max) + 0.5;
        u[at] = top;
        let iu = field(u, s);
        prop_assert!(iu[at].0);
        prop_assert!(iu[at].1 <= 1e-12, "{}", iu[at].1);
    }

    #[test]
    fn csv_round_trip_is_exact(u in values()) {
        let gf = GridFunction::new(grid(), u, FarFieldModel::Constant(0.25)).unwrap();
        let (back, _) = GridFunction::from_csv(&gf.to_csv()).unwrap();
        prop_assert_eq!(back.values.len(), gf.values.len());
        for (a, b) in back.values.iter().zip(&gf.values) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.grid.len, gf.grid.len);
    }

    #[test]
    fn h3_holds_with_default_constants(m in 1.1f64..4.0, seed in 0u64..1000) {
        let spec = ProblemSpec::power_model(0.75, m, 1.0, 0.1, vec![4.0]).unwrap();
        let r = check_h3_inequality(&spec, 300, seed).unwrap();
        prop_assert!(r.passed, "m = {m}, slack {}", r.min_slack);
    }
}
