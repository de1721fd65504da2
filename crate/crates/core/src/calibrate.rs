//! Calibration diagnostics for the sensitivity parameters.
//!
//! * `ρ_k` compares the treatment-equation index contribution of calibration
//!   covariate `k` with that of all other calibration covariates:
//!   `ρ_k = sd(π_k W1k) / sd(π_{−k}'W1,−k)`, where `π` is the coefficient
//!   vector from the projection of `X` on `W1` (after partialling out the
//!   controls). It is the observable analogue of the selection ratio `r_X`
//!   and can be set beside the breakdown point.
//! * `c_k` is the square root of the partial R² of `W1k` on the other
//!   calibration covariates given the controls; the range of `c_k` suggests
//!   bounds on how strongly the omitted variable may correlate with `W1`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::covkernel::{checked_inverse, partial_r2, CovarianceModel, NormalizedModel, Role};
use crate::error::{Error, Result};
use crate::identify::breakdown_point_rx;
use crate::Magnitude;

/// Index variances below this are treated as zero.
pub const DEGENERATE_INDEX_VARIANCE: f64 = 1e-14;

/// Calibration covariates in model order, with their positions.
fn calibration_positions(model: &CovarianceModel) -> Vec<(String, usize)> {
    model
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, _)| model.roles()[i] == Role::Calibration)
        .map(|(i, l)| (l.clone(), i))
        .collect()
}

/// Coefficients and covariance of the calibration covariates in the
/// projection of `X` on `W1`, controls already partialled out.
struct TreatmentIndex {
    labels: Vec<String>,
    pi: DVector<f64>,
    var_w1: DMatrix<f64>,
}

impl TreatmentIndex {
    fn new(nm: &NormalizedModel) -> Result<Self> {
        let model = nm.partialled();
        let w1 = calibration_positions(model);
        if w1.len() < 2 {
            return Err(Error::Domain(format!(
                "calibration diagnostics need at least two calibration covariates, got {}",
                w1.len()
            )));
        }
        let x = (0..model.dim())
            .find(|&i| model.roles()[i] == Role::Treatment)
            .ok_or_else(|| Error::RoleMismatch("no treatment variable".into()))?;
        let s = model.sigma();
        let d = w1.len();
        let var_w1 = DMatrix::from_fn(d, d, |i, j| s[(w1[i].1, w1[j].1)]);
        let cov = DVector::from_fn(d, |i, _| s[(w1[i].1, x)]);
        let pi = checked_inverse(&var_w1)? * cov;
        Ok(Self { labels: w1.into_iter().map(|(l, _)| l).collect(), pi, var_w1 })
    }

    fn index_variance(&self, members: &[usize]) -> f64 {
        members
            .iter()
            .flat_map(|&i| members.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.pi[i] * self.var_w1[(i, j)] * self.pi[j])
            .sum::<f64>()
            .max(0.0)
    }

    fn group_ratio(&self, group: &BTreeSet<usize>) -> Result<Magnitude> {
        let inside: Vec<usize> = group.iter().copied().collect();
        let outside: Vec<usize> = (0..self.labels.len()).filter(|i| !group.contains(i)).collect();
        let num = self.index_variance(&inside);
        let den = self.index_variance(&outside);
        let scale = self.index_variance(&(0..self.labels.len()).collect::<Vec<_>>()).max(1.0);
        if den <= DEGENERATE_INDEX_VARIANCE * scale {
            let names: Vec<&str> = outside.iter().map(|&i| self.labels[i].as_str()).collect();
            if num <= DEGENERATE_INDEX_VARIANCE * scale {
                return Err(Error::DegenerateIndex(format!(
                    "both the group and its complement ({}) have zero index variance",
                    names.join(", ")
                )));
            }
            return Ok(Magnitude::Infinite);
        }
        Ok(Magnitude::Finite((num / den).sqrt()))
    }

    fn position(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

/// `ρ_k` for the calibration covariate `label`. Infinite when the other
/// covariates carry no treatment-index variance.
pub fn rho_k(nm: &NormalizedModel, label: &str) -> Result<Magnitude> {
    rho_group(nm, &[label])
}

/// `ρ` for a group of calibration covariates against all the others; the
/// singleton group is [`rho_k`].
pub fn rho_group(nm: &NormalizedModel, labels: &[&str]) -> Result<Magnitude> {
    let index = TreatmentIndex::new(nm)?;
    let mut group = BTreeSet::new();
    for l in labels {
        group.insert(index.position(l)?);
    }
    if group.is_empty() || group.len() == index.labels.len() {
        return Err(Error::Domain("the group must be a nonempty proper subset of the calibration covariates".into()));
    }
    index.group_ratio(&group)
}

/// `c_k`: square root of the partial R² of `W1k` on the other calibration
/// covariates given the controls.
pub fn c_k(model: &CovarianceModel, label: &str) -> Result<f64> {
    Ok(c_k_squared(model, label)?.sqrt())
}

/// `c_k²`, the partial R² itself.
pub fn c_k_squared(model: &CovarianceModel, label: &str) -> Result<f64> {
    let w1: Vec<String> = model.labels_with_role(Role::Calibration);
    if w1.len() < 2 {
        return Err(Error::Domain(format!(
            "calibration diagnostics need at least two calibration covariates, got {}",
            w1.len()
        )));
    }
    if !w1.iter().any(|l| l == label) {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    let others: Vec<&str> = w1.iter().map(String::as_str).filter(|&l| l != label).collect();
    let controls = model.labels_with_role(Role::Control);
    let controls: Vec<&str> = controls.iter().map(String::as_str).collect();
    partial_r2(model, label, &others, &controls)
}

/// All calibration diagnostics for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub rho: BTreeMap<String, Magnitude>,
    pub c: BTreeMap<String, f64>,
    pub c_sq: BTreeMap<String, f64>,
    /// Breakdown point for the sign of the coefficient under the `r_X`-only
    /// budget, for side-by-side display with `ρ_k`.
    pub breakdown_reference: Option<f64>,
}

impl CalibrationReport {
    /// `[min_k c_k, max_k c_k]`, a suggested range for the control
    /// endogeneity bounds.
    pub fn suggested_c_range(&self) -> (f64, f64) {
        let lo = self.c.values().copied().fold(f64::INFINITY, f64::min);
        let hi = self.c.values().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Computes `ρ_k`, `c_k` and `c_k²` for every calibration covariate.
pub fn calibration_report(model: &CovarianceModel) -> Result<CalibrationReport> {
    let nm = crate::covkernel::normalize(model)?;
    let index = TreatmentIndex::new(&nm)?;
    let mut rho = BTreeMap::new();
    let mut c = BTreeMap::new();
    let mut c_sq = BTreeMap::new();
    for (i, label) in index.labels.iter().enumerate() {
        rho.insert(label.clone(), index.group_ratio(&BTreeSet::from([i]))?);
        let sq = c_k_squared(model, label)?;
        c.insert(label.clone(), sq.sqrt());
        c_sq.insert(label.clone(), sq);
    }
    let breakdown_reference = breakdown_point_rx(&nm).ok();
    Ok(CalibrationReport { rho, c, c_sq, breakdown_reference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covkernel::normalize;
    use approx::assert_relative_eq;

    fn model(sigma: &[f64], roles: &[Role]) -> CovarianceModel {
        let p = roles.len();
        let labels = ["Y", "X", "A", "B", "C", "D"][..p].iter().map(|s| s.to_string()).collect();
        CovarianceModel::new(DMatrix::from_row_slice(p, p, sigma), labels, roles.to_vec()).unwrap()
    }

    const ROLES: [Role; 4] = [Role::Outcome, Role::Treatment, Role::Calibration, Role::Calibration];

    #[test]
    fn symmetric_model_gives_unit_ratios() {
        let m = model(&[1.0, 0.3, 0.2, 0.2, 0.3, 1.0, 0.4, 0.4, 0.2, 0.4, 1.0, 0.0, 0.2, 0.4, 0.0, 1.0], &ROLES);
        let nm = normalize(&m).unwrap();
        assert_relative_eq!(rho_k(&nm, "A").unwrap().to_f64(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rho_k(&nm, "B").unwrap().to_f64(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(c_k(&m, "A").unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn irrelevant_covariate_has_zero_ratio() {
        // X is uncorrelated with B and B is uncorrelated with A: π_B = 0.
        let m = model(&[1.0, 0.3, 0.2, 0.1, 0.3, 1.0, 0.4, 0.0, 0.2, 0.4, 1.0, 0.0, 0.1, 0.0, 0.0, 1.0], &ROLES);
        let nm = normalize(&m).unwrap();
        assert_relative_eq!(rho_k(&nm, "B").unwrap().to_f64(), 0.0, epsilon = 1e-12);
        assert_eq!(rho_k(&nm, "A").unwrap(), Magnitude::Infinite);
    }

    #[test]
    fn needs_two_calibration_covariates() {
        let m = model(&[1.0, 0.3, 0.2, 0.3, 1.0, 0.4, 0.2, 0.4, 1.0], &ROLES[..3]);
        let nm = normalize(&m).unwrap();
        assert!(matches!(rho_k(&nm, "A"), Err(Error::Domain(_))));
        assert!(matches!(c_k(&m, "A"), Err(Error::Domain(_))));
    }
}
