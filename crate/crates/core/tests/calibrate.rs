//! Calibration diagnostics.

mod common;

use common::random_model;
use nalgebra::DMatrix;
use ovbsens::calibrate::{c_k, c_k_squared, calibration_report, rho_group, rho_k};
use ovbsens::simsel::{r_x_of_s, Design, SelectionDgp};
use ovbsens::{normalize, CovarianceModel, Role};
use proptest::prelude::*;

fn rescaled(m: &CovarianceModel, factors: &[f64]) -> CovarianceModel {
    let s = DMatrix::from_fn(m.dim(), m.dim(), |i, j| m.sigma()[(i, j)] * factors[i] * factors[j]);
    CovarianceModel::new(s, m.labels().to_vec(), m.roles().to_vec()).unwrap()
}

#[test]
fn reference_model_values() {
    let report = calibration_report(&common::ref_cov()).unwrap();
    // W11 and W12 are uncorrelated with unit variance: rho = 0.4 / 0.1.
    assert!((report.rho["W11"].to_f64() - 4.0).abs() < 1e-12);
    assert!((report.rho["W12"].to_f64() - 0.25).abs() < 1e-12);
    assert_eq!(report.suggested_c_range(), (0.0, 0.0));
    assert!((report.breakdown_reference.unwrap() - 0.683393756946).abs() < 1e-11);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn diagnostics_ignore_units(d1 in 2usize..5, d0 in 0usize..2, seed in any::<u64>(), f in proptest::collection::vec(0.1f64..10.0, 8)) {
        let m = random_model(d1, d0, seed);
        let m2 = rescaled(&m, &f[..m.dim()]);
        let (a, b) = (calibration_report(&m).unwrap(), calibration_report(&m2).unwrap());
        for label in a.rho.keys() {
            prop_assert!((a.rho[label].to_f64() - b.rho[label].to_f64()).abs() < 1e-8 * a.rho[label].to_f64().max(1.0));
            prop_assert!((a.c[label] - b.c[label]).abs() < 1e-9);
        }
    }

    #[test]
    fn rho_is_the_selection_ratio_of_leaving_one_out(d1 in 2usize..6, seed in any::<u64>(), k in 0usize..6) {
        let m = random_model(d1, 0, seed);
        let k = k % d1;
        let label = format!("W1_{}", k + 1);
        let rho = rho_k(&normalize(&m).unwrap(), &label).unwrap().to_f64();
        let dgp = SelectionDgp::from_model(&m).unwrap();
        let observed: Vec<usize> = (0..d1).filter(|&i| i != k).collect();
        let rx = r_x_of_s(&dgp, &Design::from_indices(d1, &observed).unwrap()).finite().unwrap();
        prop_assert!((rho - rx).abs() < 1e-9 * rx.max(1.0));
    }

    #[test]
    fn group_and_complement_are_reciprocal(d1 in 3usize..6, seed in any::<u64>()) {
        let nm = normalize(&random_model(d1, 1, seed)).unwrap();
        let group = ["W1_1", "W1_2"];
        let rest: Vec<String> = (3..=d1).map(|i| format!("W1_{i}")).collect();
        let rest: Vec<&str> = rest.iter().map(String::as_str).collect();
        let a = rho_group(&nm, &group).unwrap().to_f64();
        let b = rho_group(&nm, &rest).unwrap().to_f64();
        prop_assert!((a * b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn c_squared_is_a_partial_r2(d1 in 2usize..5, d0 in 0usize..3, seed in any::<u64>()) {
        let m = random_model(d1, d0, seed);
        let labels = m.labels_with_role(Role::Calibration);
        for l in &labels {
            let sq = c_k_squared(&m, l).unwrap();
            prop_assert!((0.0..=1.0).contains(&sq));
            prop_assert!((c_k(&m, l).unwrap().powi(2) - sq).abs() < 1e-12);
        }
    }
}
