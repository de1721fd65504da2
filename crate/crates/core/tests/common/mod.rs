//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use ovbsens::{normalize, CovarianceModel, NormalizedModel, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Reference four-variable model: `Y, X, W11, W12`.
pub fn ref_cov() -> CovarianceModel {
    let sigma = DMatrix::from_row_slice(
        4,
        4,
        &[1.0, 0.5, 0.3, 0.2, 0.5, 1.0, 0.4, 0.1, 0.3, 0.4, 1.0, 0.0, 0.2, 0.1, 0.0, 1.0],
    );
    CovarianceModel::new(
        sigma,
        labels(&["Y", "X", "W11", "W12"]),
        vec![Role::Outcome, Role::Treatment, Role::Calibration, Role::Calibration],
    )
    .unwrap()
}

pub fn ref_nm() -> NormalizedModel {
    normalize(&ref_cov()).unwrap()
}

pub fn labels(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Random positive definite model with `d1` calibration covariates and `d0`
/// controls, labelled `Y, X, W1_1.., W0_1..`.
pub fn random_model(d1: usize, d0: usize, seed: u64) -> CovarianceModel {
    let p = 2 + d1 + d0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale: Vec<f64> = (0..p).map(|_| rng.gen_range(0.5..3.0)).collect();
    let base = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
    let sigma = DMatrix::from_fn(p, p, |i, j| base[(i, j)] * scale[i] * scale[j]);
    let mut names = vec!["Y".to_string(), "X".to_string()];
    names.extend((1..=d1).map(|k| format!("W1_{k}")));
    names.extend((1..=d0).map(|k| format!("W0_{k}")));
    let mut roles = vec![Role::Outcome, Role::Treatment];
    roles.extend(std::iter::repeat_n(Role::Calibration, d1));
    roles.extend(std::iter::repeat_n(Role::Control, d0));
    CovarianceModel::new(sigma, names, roles).unwrap()
}

pub fn random_nm(d1: usize, seed: u64) -> NormalizedModel {
    normalize(&random_model(d1, 0, seed)).unwrap()
}

/// Relative difference scaled by `max(1, |b|)`.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
