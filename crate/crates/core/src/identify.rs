//! Closed-form identified sets and breakdown points when only selection on
//! unobservables in the treatment equation is restricted (`r_X <= rx_bar`),
//! optionally together with bounds `[c_low, c_high]` on how strongly the
//! omitted variable may be correlated with the calibration covariates.
//!
//! All coefficients are in normalized units (per standard deviation of `X`
//! after partialling out controls); see [`NormalizedModel::x_scale`].

use serde::{Deserialize, Serialize};

use crate::covkernel::NormalizedModel;
use crate::error::{Error, Result};
use crate::Magnitude;

/// Bisection stops when the bracket is narrower than this.
pub const BISECTION_TOLERANCE: f64 = 1e-10;
/// Bisection iteration cap.
pub const BISECTION_MAX_ITER: usize = 200;

/// Sensitivity budget: `r_X <= rx_bar`, `r_Y <= ry_bar` and
/// `R_{W2 ~ W1} in [c_low, c_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBudget {
    pub rx_bar: f64,
    /// `None` means unrestricted.
    pub ry_bar: Option<f64>,
    pub c_low: f64,
    pub c_high: f64,
}

impl SensitivityBudget {
    /// Budget restricting only `r_X`, with arbitrarily endogenous controls.
    pub fn rx_only(rx_bar: f64) -> Self {
        Self { rx_bar, ry_bar: None, c_low: 0.0, c_high: 1.0 }
    }

    /// Validates ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.rx_bar >= 0.0) || !self.rx_bar.is_finite() {
            return Err(Error::Domain(format!("rx_bar must be finite and >= 0, got {}", self.rx_bar)));
        }
        if let Some(ry) = self.ry_bar {
            if !(ry >= 0.0) {
                return Err(Error::Domain(format!("ry_bar must be >= 0, got {ry}")));
            }
        }
        validate_c_range(self.c_low, self.c_high)
    }
}

/// Checks `0 <= c_low <= c_high <= 1` and `c_low < 1`.
pub fn validate_c_range(c_low: f64, c_high: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c_low) || !(0.0..=1.0).contains(&c_high) || c_low > c_high {
        return Err(Error::Domain(format!(
            "need 0 <= c_low <= c_high <= 1, got [{c_low}, {c_high}]"
        )));
    }
    if c_low >= 1.0 {
        return Err(Error::EmptyConstraint { low: c_low, high: c_high });
    }
    Ok(())
}

/// An interval `[center - below, center + above]` whose half-widths may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifiedInterval {
    /// The point estimand without selection on unobservables (`beta_med`).
    pub center: f64,
    /// Distance from the center to the lower endpoint.
    pub below: Magnitude,
    /// Distance from the center to the upper endpoint.
    pub above: Magnitude,
}

impl IdentifiedInterval {
    /// The interval `[center - dev, center + dev]`.
    pub fn symmetric(center: f64, dev: Magnitude) -> Self {
        Self { center, below: dev, above: dev }
    }

    /// The singleton `{center}`.
    pub fn point(center: f64) -> Self {
        Self::symmetric(center, Magnitude::Finite(0.0))
    }

    /// Builds an interval from endpoints; `None` means unbounded on that side.
    pub fn from_endpoints(center: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        Self {
            center,
            below: lower.map_or(Magnitude::Infinite, |l| Magnitude::Finite((center - l).max(0.0))),
            above: upper.map_or(Magnitude::Infinite, |u| Magnitude::Finite((u - center).max(0.0))),
        }
    }

    /// Lower endpoint, `None` when unbounded below.
    pub fn lower(&self) -> Option<f64> {
        self.below.finite().map(|d| self.center - d)
    }

    /// Upper endpoint, `None` when unbounded above.
    pub fn upper(&self) -> Option<f64> {
        self.above.finite().map(|d| self.center + d)
    }

    /// Whether both endpoints are finite.
    pub fn is_finite(&self) -> bool {
        self.below.is_finite() && self.above.is_finite()
    }

    /// The larger half-width.
    pub fn dev(&self) -> Magnitude {
        self.below.max(self.above)
    }

    /// Whether `b` lies in the closed interval.
    pub fn contains(&self, b: f64) -> bool {
        self.lower().is_none_or(|l| b >= l) && self.upper().is_none_or(|u| b <= u)
    }

    /// Whether `other` is a subset of `self`.
    pub fn contains_interval(&self, other: &IdentifiedInterval) -> bool {
        let lower_ok = match (self.lower(), other.lower()) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => a <= b,
        };
        let upper_ok = match (self.upper(), other.upper()) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => a >= b,
        };
        lower_ok && upper_ok
    }

    /// The interval `{-b : b in self}`.
    pub fn negated(&self) -> Self {
        Self { center: -self.center, below: self.above, above: self.below }
    }

    /// The interval multiplied by a positive factor (e.g. a change of units).
    pub fn scaled(&self, factor: f64) -> Self {
        debug_assert!(factor > 0.0);
        let s = |m: Magnitude| match m {
            Magnitude::Finite(v) => Magnitude::Finite(v * factor),
            Magnitude::Infinite => Magnitude::Infinite,
        };
        Self { center: self.center * factor, below: s(self.below), above: s(self.above) }
    }
}

/// Half-width of the identified set when only `r_X <= rx_bar` is imposed.
/// Infinite when `rx_bar^2 >= 1 - R^2_{X~W1}`.
pub fn dev_rx(nm: &NormalizedModel, rx_bar: f64) -> Magnitude {
    let r2 = nm.r2_x_w1();
    let rx2 = rx_bar * rx_bar;
    let room = 1.0 - r2 - rx2;
    if !(room > 0.0) {
        return Magnitude::Infinite;
    }
    Magnitude::Finite((nm.var_y_perp_xw1() / nm.k0() * rx2 * r2 / room).sqrt())
}

/// Identified set for the long-regression coefficient under `r_X <= rx_bar`.
pub fn bounds_rx(nm: &NormalizedModel, rx_bar: f64) -> Result<IdentifiedInterval> {
    check_rx(rx_bar)?;
    nm.check_knife_edge()?;
    Ok(IdentifiedInterval::symmetric(nm.beta_med(), dev_rx(nm, rx_bar)))
}

fn check_rx(rx_bar: f64) -> Result<()> {
    if !(rx_bar >= 0.0) || !rx_bar.is_finite() {
        return Err(Error::Domain(format!("rx_bar must be finite and >= 0, got {rx_bar}")));
    }
    Ok(())
}

/// Largest attainable `|z|` where `z = Cov(X^{⊥W1}, W2)` under `r_X <= rx_bar`
/// and `||c|| in [c_low, c_high]`, given `||Cov(W1, X)||`.
pub fn zbar_x(rx_bar: f64, c_low: f64, c_high: f64, norm_sigma_w1x: f64) -> Magnitude {
    if rx_bar * c_high >= 1.0 {
        return Magnitude::Infinite;
    }
    let m = rx_bar.min(c_high).max(c_low);
    Magnitude::Finite(rx_bar * norm_sigma_w1x * (1.0 - m * m).max(0.0).sqrt() / (1.0 - rx_bar * m))
}

/// Half-width of the identified set corresponding to a bound `zbar` on `|z|`.
pub(crate) fn dev_from_zbar(nm: &NormalizedModel, zbar: Magnitude) -> Magnitude {
    match zbar {
        Magnitude::Infinite => Magnitude::Infinite,
        Magnitude::Finite(z) => {
            let z2 = z * z;
            let room = nm.k0() - z2;
            if room > 0.0 {
                Magnitude::Finite((nm.var_y_perp_xw1() / nm.k0() * z2 / room).sqrt())
            } else {
                Magnitude::Infinite
            }
        }
    }
}

/// Half-width of the identified set under `r_X <= rx_bar` and
/// `||c|| in [c_low, c_high]`.
pub fn dev_rx_c(nm: &NormalizedModel, rx_bar: f64, c_low: f64, c_high: f64) -> Magnitude {
    // When the worst-case ||c|| equals rx_bar the bound reduces to the
    // r_X-only one, whose form is better conditioned near the threshold.
    if (c_low..=c_high).contains(&rx_bar) {
        return dev_rx(nm, rx_bar);
    }
    dev_from_zbar(nm, zbar_x(rx_bar, c_low, c_high, nm.sigma_w1x().norm()))
}

/// Identified set under `r_X <= rx_bar` and `||c|| in [c_low, c_high]`.
pub fn bounds_rx_c(
    nm: &NormalizedModel,
    rx_bar: f64,
    c_low: f64,
    c_high: f64,
) -> Result<IdentifiedInterval> {
    check_rx(rx_bar)?;
    validate_c_range(c_low, c_high)?;
    nm.check_knife_edge()?;
    Ok(IdentifiedInterval::symmetric(nm.beta_med(), dev_rx_c(nm, rx_bar, c_low, c_high)))
}

/// Largest `rx_bar` for which the sign of the long coefficient is identified
/// (with only `r_X` restricted and arbitrarily endogenous controls).
pub fn breakdown_point_rx(nm: &NormalizedModel) -> Result<f64> {
    nm.check_knife_edge()?;
    let r2y = nm.r2_yx_dot_w1();
    if r2y == 0.0 {
        return Ok(0.0);
    }
    let r2x = nm.r2_x_w1();
    Ok((r2y / (r2x / (1.0 - r2x) + r2y)).sqrt())
}

/// Breakdown point for the sign conclusion under `||c|| in [c_low, c_high]`,
/// found by bisection on the monotone predicate `dev(rx) < |beta_med|`.
pub fn breakdown_point_rx_c(nm: &NormalizedModel, c_low: f64, c_high: f64) -> Result<f64> {
    validate_c_range(c_low, c_high)?;
    nm.check_knife_edge()?;
    let target = nm.beta_med().abs();
    if target == 0.0 {
        return Ok(0.0);
    }
    // Beyond `hi` the bound on |z| is infinite or exceeds Var(X^{⊥W1}).
    let norm = nm.sigma_w1x().norm();
    let hi = if c_high > 0.0 { 1.0 / c_high } else { nm.k0().sqrt() / norm };
    let below = |r: f64| matches!(dev_rx_c(nm, r, c_low, c_high), Magnitude::Finite(d) if d < target);
    Ok(bisect_boundary(0.0, hi, below))
}

/// Given `pred(lo) == true` and a monotone predicate, returns the boundary
/// point in `[lo, hi]` to within [`BISECTION_TOLERANCE`] (or float resolution).
pub(crate) fn bisect_boundary(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    if pred(hi) {
        return hi;
    }
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= BISECTION_TOLERANCE {
            break;
        }
        if pred(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
