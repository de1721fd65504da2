//! The brute-force checker: its membership test, witnesses, and hull.

mod common;

use common::{random_nm, ref_nm};
use nalgebra::DVector;
use ovbsens::frontier::bounds_rx_ry;
use ovbsens::identify::{bounds_rx, bounds_rx_c};
use ovbsens::oracle::{brute_force_bounds, brute_force_search, membership, witness_r_x, witness_r_y, z_x};
use ovbsens::{IdentifiedInterval, NormalizedModel, SensitivityBudget};
use proptest::prelude::*;

/// Coefficient implied by `(r_x, r_y, c)` when `1 + r_y'c != 0`.
fn implied_b(nm: &NormalizedModel, r_x: &DVector<f64>, r_y: &DVector<f64>, c: &DVector<f64>) -> Option<f64> {
    let z = z_x(nm, r_x, c)?;
    let s = (1.0 - c.norm_squared()).sqrt();
    let d = 1.0 + r_y.dot(c);
    let num = nm.k1() * d - z * s * r_y.dot(nm.sigma_w1y());
    let den = nm.k0() * d - z * s * r_y.dot(nm.sigma_w1x());
    (den.abs() > 1e-12).then(|| num / den)
}

fn widen(iv: &IdentifiedInterval) -> IdentifiedInterval {
    IdentifiedInterval::from_endpoints(
        iv.center,
        iv.lower().map(|l| l - 1e-8 * (1.0 + l.abs())),
        iv.upper().map(|u| u + 1e-8 * (1.0 + u.abs())),
    )
}

#[test]
fn zero_budget_hull_is_the_point_estimand() {
    let nm = ref_nm();
    let hull = brute_force_bounds(&nm, &SensitivityBudget::rx_only(0.0), 20_000, 1);
    assert_eq!(hull.lower(), Some(nm.beta_med()));
    assert_eq!(hull.upper(), Some(nm.beta_med()));
}

#[test]
fn hull_is_inside_and_close_to_the_closed_form_on_the_reference_model() {
    let nm = ref_nm();
    for rx in [0.1, 0.3, 0.5, 0.7] {
        let closed = bounds_rx(&nm, rx).unwrap();
        let report = brute_force_search(&nm, &SensitivityBudget::rx_only(rx), 50_000, 5);
        assert!(report.n_feasible > 0);
        assert!(closed.contains_interval(&report.hull), "rx {rx}: {:?} vs {:?}", report.hull, closed);
        let half = closed.dev().to_f64();
        assert!((report.hull.lower().unwrap() - closed.lower().unwrap()).abs() < 0.02 * half);
        assert!((report.hull.upper().unwrap() - closed.upper().unwrap()).abs() < 0.02 * half);
    }
}

#[test]
fn hull_respects_an_ry_budget() {
    let nm = ref_nm();
    for (rx, ry) in [(0.5, 0.5), (0.9, 0.6), (1.2, 1.0)] {
        let closed = bounds_rx_ry(&nm, rx, Some(ry), 0.0, 1.0).unwrap();
        let budget = SensitivityBudget { rx_bar: rx, ry_bar: Some(ry), c_low: 0.0, c_high: 1.0 };
        let hull = brute_force_bounds(&nm, &budget, 50_000, 9);
        assert!(widen(&closed).contains_interval(&hull), "({rx},{ry}): {hull:?} vs {closed:?}");
    }
}

#[test]
fn hull_is_deterministic_across_thread_counts() {
    let nm = ref_nm();
    let budget = SensitivityBudget { rx_bar: 0.6, ry_bar: Some(0.8), c_low: 0.1, c_high: 0.7 };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| brute_force_search(&nm, &budget, 20_000, 3))
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.hull, b.hull);
    assert_eq!(a.n_feasible, b.n_feasible);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn witnesses_certify_membership(
        d1 in 1usize..5, seed in any::<u64>(), zf in 0.05f64..0.95, cf in 0.0f64..0.95, bf in -0.95f64..0.95,
        dir in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let nm = random_nm(d1, seed);
        let z = zf * nm.k0().sqrt();
        let dir = DVector::from_iterator(d1, dir.into_iter().take(d1));
        prop_assume!(dir.norm() > 1e-3);
        let c = dir.normalize() * cf;
        let reach = ovbsens::frontier::devsq(&nm, z).unwrap().sqrt();
        let b = nm.beta_med() + bf * reach;
        prop_assume!(b != nm.beta_med());
        let r_x = witness_r_x(&nm, z, &c);
        let r_y = witness_r_y(&nm, z, &c, b);
        prop_assume!(r_x.is_some() && r_y.is_some());
        let (r_x, r_y) = (r_x.unwrap(), r_y.unwrap());
        prop_assume!((1.0 + r_x.dot(&c)).abs() > 1e-6);
        let implied = z_x(&nm, &r_x, &c).unwrap();
        prop_assert!((implied - z).abs() < 1e-9 * (1.0 + z.abs()));
        prop_assert!(membership(&nm, b, &r_x, &r_y, &c));
    }

    #[test]
    fn members_lie_inside_the_closed_form_bounds(
        d1 in 1usize..5, seed in any::<u64>(), rx in 0.0f64..1.5, ry in 0.0f64..2.0,
        cl in 0.0f64..0.5, cw in 0.0f64..0.5,
        u in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        let nm = random_nm(d1, seed);
        let ch = (cl + cw).min(0.999);
        let unit = |k: usize| {
            let v = DVector::from_iterator(d1, u[4 * k..4 * k + d1].iter().copied());
            if v.norm() < 1e-9 { None } else { Some(v.normalize()) }
        };
        let (Some(ex), Some(ey), Some(ec)) = (unit(0), unit(1), unit(2)) else { return Ok(()) };
        let r_x = ex * rx;
        let r_y = ey * ry;
        let c = ec * (cl + (ch - cl) * 0.5 * (1.0 + u[3]));
        let Some(b) = implied_b(&nm, &r_x, &r_y, &c) else { return Ok(()) };
        if membership(&nm, b, &r_x, &r_y, &c) {
            let outer = bounds_rx_c(&nm, rx, cl, ch).unwrap();
            prop_assert!(widen(&outer).contains(b), "b = {b} outside {outer:?}");
        }
    }

    #[test]
    fn hull_is_inside_the_closed_form_on_random_models(d1 in 1usize..5, seed in any::<u64>(), rx in 0.0f64..1.2) {
        let nm = random_nm(d1, seed);
        let closed = bounds_rx(&nm, rx).unwrap();
        let hull = brute_force_bounds(&nm, &SensitivityBudget::rx_only(rx), 4_000, seed);
        prop_assert!(widen(&closed).contains_interval(&hull));
    }
}

#[test]
fn sampled_members_never_escape_random_budgets() {
    // A denser sweep than the proptest above, on fixed models.
    for seed in 0..5u64 {
        let nm = random_nm(3, 500 + seed);
        let closed = bounds_rx_c(&nm, 0.6, 0.2, 0.6).unwrap();
        let budget = SensitivityBudget { rx_bar: 0.6, ry_bar: None, c_low: 0.2, c_high: 0.6 };
        let hull = brute_force_bounds(&nm, &budget, 30_000, seed);
        assert!(widen(&closed).contains_interval(&hull));
    }
}
