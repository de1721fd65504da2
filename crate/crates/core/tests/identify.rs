//! Closed-form identified sets and breakdown points under `r_X` budgets.

mod common;

use common::{random_nm, ref_nm};
use ovbsens::identify::{
    bounds_rx, bounds_rx_c, breakdown_point_rx, breakdown_point_rx_c, dev_rx, dev_rx_c, zbar_x, SensitivityBudget,
};
use ovbsens::oracle::zbar_oracle;
use ovbsens::{Error, IdentifiedInterval, Magnitude};
use proptest::prelude::*;

#[test]
fn zero_budget_is_the_point_estimand() {
    let nm = ref_nm();
    assert_eq!(bounds_rx(&nm, 0.0).unwrap(), IdentifiedInterval::point(nm.beta_med()));
}

#[test]
fn reference_breakdown_point() {
    let nm = ref_nm();
    let bp = breakdown_point_rx(&nm).unwrap();
    assert!((bp - 0.683393756946).abs() < 1e-11);
    assert!((dev_rx(&nm, bp).to_f64() - nm.beta_med()).abs() < 1e-10);
}

#[test]
fn interval_becomes_unbounded_at_the_threshold() {
    let nm = ref_nm();
    let edge = (1.0 - nm.r2_x_w1()).sqrt();
    assert!(dev_rx(&nm, edge * (1.0 - 1e-9)).is_finite());
    assert_eq!(dev_rx(&nm, edge), Magnitude::Infinite);
    assert!(!bounds_rx(&nm, 1.0).unwrap().is_finite());
}

#[test]
fn invalid_arguments_are_rejected() {
    let nm = ref_nm();
    assert!(matches!(bounds_rx(&nm, -0.1), Err(Error::Domain(_))));
    assert!(bounds_rx_c(&nm, 0.5, 0.6, 0.4).is_err());
    assert!(bounds_rx_c(&nm, 0.5, 0.0, 1.5).is_err());
    assert!(SensitivityBudget { rx_bar: 0.5, ry_bar: Some(-1.0), c_low: 0.0, c_high: 1.0 }.validate().is_err());
}

#[test]
fn zbar_matches_its_grid_oracle() {
    let nm = ref_nm();
    for &(rx, cl, ch) in &[(0.3, 0.0, 1.0), (0.6, 0.0, 0.3), (0.6, 0.5, 0.9), (0.9, 0.2, 0.4), (1.5, 0.0, 0.5)] {
        let closed = zbar_x(rx, cl, ch, nm.sigma_w1x().norm()).to_f64();
        let grid = zbar_oracle(&nm, rx, cl, ch, 16);
        assert!((closed - grid).abs() < 1e-7 * closed.max(1.0), "rx {rx} [{cl},{ch}]: {closed} vs {grid}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounds_are_nested_in_rx(d1 in 1usize..5, seed in any::<u64>(), a in 0.0f64..1.5, b in 0.0f64..1.5) {
        let nm = random_nm(d1, seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = bounds_rx(&nm, lo).unwrap();
        let large = bounds_rx(&nm, hi).unwrap();
        prop_assert!(large.contains_interval(&small));
        prop_assert!(small.contains(nm.beta_med()));
    }

    #[test]
    fn bounds_are_symmetric_about_beta(d1 in 1usize..5, seed in any::<u64>(), rx in 0.0f64..1.0) {
        let nm = random_nm(d1, seed);
        let iv = bounds_rx(&nm, rx).unwrap();
        prop_assert_eq!(iv.below, iv.above);
        prop_assert_eq!(iv.center, nm.beta_med());
    }

    #[test]
    fn unrestricted_controls_reduce_to_the_plain_bounds(d1 in 1usize..5, seed in any::<u64>(), rx in 0.0f64..2.0) {
        let nm = random_nm(d1, seed);
        let plain = dev_rx(&nm, rx);
        let general = dev_rx_c(&nm, rx, 0.0, 1.0);
        match (plain, general) {
            (Magnitude::Finite(a), Magnitude::Finite(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn narrower_control_ranges_give_narrower_bounds(
        d1 in 1usize..5, seed in any::<u64>(), rx in 0.0f64..1.5,
        c in proptest::collection::vec(0.0f64..1.0, 4),
    ) {
        let nm = random_nm(d1, seed);
        let mut c = c;
        c.sort_by(f64::total_cmp);
        let outer = bounds_rx_c(&nm, rx, c[0], c[3]).unwrap();
        let inner = bounds_rx_c(&nm, rx, c[1], c[2]).unwrap();
        prop_assert!(outer.contains_interval(&inner));
        prop_assert!(bounds_rx_c(&nm, rx, 0.0, 1.0).unwrap().contains_interval(&outer));
    }

    #[test]
    fn breakdown_point_is_where_the_sign_flips(d1 in 1usize..5, seed in any::<u64>()) {
        let nm = random_nm(d1, seed);
        let bp = breakdown_point_rx(&nm).unwrap();
        let dev = dev_rx(&nm, bp).to_f64();
        prop_assert!((dev - nm.beta_med().abs()).abs() < 1e-8 * nm.beta_med().abs().max(1.0));
        let bisected = breakdown_point_rx_c(&nm, 0.0, 1.0).unwrap();
        prop_assert!((bisected - bp).abs() < 1e-8);
    }

    #[test]
    fn breakdown_point_grows_when_controls_are_restricted(d1 in 1usize..5, seed in any::<u64>(), ch in 0.0f64..1.0) {
        let nm = random_nm(d1, seed);
        let free = breakdown_point_rx_c(&nm, 0.0, 1.0).unwrap();
        let restricted = breakdown_point_rx_c(&nm, 0.0, ch).unwrap();
        prop_assert!(restricted >= free - 1e-9);
    }

    #[test]
    fn scaling_the_outcome_scales_the_bounds(d1 in 1usize..4, seed in any::<u64>(), rx in 0.0f64..0.9, k in 0.1f64..10.0) {
        use ovbsens::{normalize, CovarianceModel};
        let m = common::random_model(d1, 0, seed);
        let mut s = m.sigma().clone();
        for j in 0..m.dim() {
            s[(0, j)] *= k;
            s[(j, 0)] *= k;
        }
        let scaled = CovarianceModel::new(s, m.labels().to_vec(), m.roles().to_vec()).unwrap();
        let a = bounds_rx(&normalize(&m).unwrap(), rx).unwrap();
        let b = bounds_rx(&normalize(&scaled).unwrap(), rx).unwrap();
        prop_assert!((b.center - k * a.center).abs() < 1e-9 * (1.0 + (k * a.center).abs()));
        if let (Magnitude::Finite(x), Magnitude::Finite(y)) = (a.dev(), b.dev()) {
            prop_assert!((y - k * x).abs() < 1e-9 * (1.0 + k * x));
        }
    }
}
