//! Covariance algebra: model container, partialling out (Schur complements),
//! partial R-squared, and the normalized representation used by every
//! identification routine.
//!
//! Everything here works on population (or estimated) covariance matrices only;
//! no raw data is touched.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible eigenvalue relative to the largest one.
pub const PD_RELATIVE_FLOOR: f64 = 1e-12;
/// Largest admissible condition number for any matrix that gets inverted.
pub const CONDITION_CAP: f64 = 1e12;
/// Relative tolerance for symmetry of a user-supplied covariance matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Relative tolerance for the knife-edge checks on the normalized model.
pub const KNIFE_EDGE_TOLERANCE: f64 = 1e-12;
/// Variances at or below this value are treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-14;

/// Role a variable plays in the sensitivity analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// The outcome `Y`.
    Outcome,
    /// The treatment `X`.
    Treatment,
    /// Observed covariates used to calibrate the sensitivity parameters (`W1`).
    Calibration,
    /// Observed covariates that are only partialled out (`W0`).
    Control,
}

/// A positive definite covariance matrix with labelled variables and roles.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    sigma: DMatrix<f64>,
    labels: Vec<String>,
    roles: Vec<Role>,
}

impl CovarianceModel {
    /// Builds a model, checking symmetry, positive definiteness, label
    /// uniqueness and that there is exactly one outcome, exactly one treatment
    /// and at least one calibration covariate.
    pub fn new(sigma: DMatrix<f64>, labels: Vec<String>, roles: Vec<Role>) -> Result<Self> {
        let model = Self::without_role_check(sigma, labels, roles, SYMMETRY_TOLERANCE)?;
        model.check_roles()?;
        Ok(model)
    }

    /// Like [`CovarianceModel::new`] but with roles given as a label → role map.
    /// Every label must be assigned a role.
    pub fn from_role_map(
        sigma: DMatrix<f64>,
        labels: Vec<String>,
        roles: &BTreeMap<String, Role>,
    ) -> Result<Self> {
        let roles = labels
            .iter()
            .map(|l| {
                roles
                    .get(l)
                    .copied()
                    .ok_or_else(|| Error::RoleMismatch(format!("no role assigned to `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sigma, labels, roles)
    }

    /// Matrix-level validation only; role counts are not enforced. Used for
    /// intermediate results such as covariance matrices of residuals.
    pub(crate) fn without_role_check(
        sigma: DMatrix<f64>,
        labels: Vec<String>,
        roles: Vec<Role>,
        symmetry_tolerance: f64,
    ) -> Result<Self> {
        let p = sigma.nrows();
        if p == 0 || sigma.ncols() != p {
            return Err(Error::Dimension(format!(
                "covariance matrix must be square and non-empty, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if labels.len() != p || roles.len() != p {
            return Err(Error::Dimension(format!(
                "{} labels and {} roles for a {p}x{p} matrix",
                labels.len(),
                roles.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::RoleMismatch(format!("duplicate label `{l}`")));
            }
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("covariance matrix has non-finite entries".into()));
        }
        check_symmetric(&sigma, symmetry_tolerance)?;
        let sigma = symmetrize(&sigma);
        check_positive_definite(&sigma)?;
        Ok(Self { sigma, labels, roles })
    }

    fn check_roles(&self) -> Result<()> {
        let count = |r: Role| self.roles.iter().filter(|&&x| x == r).count();
        if count(Role::Outcome) != 1 {
            return Err(Error::RoleMismatch(format!(
                "expected exactly one outcome, found {}",
                count(Role::Outcome)
            )));
        }
        if count(Role::Treatment) != 1 {
            return Err(Error::RoleMismatch(format!(
                "expected exactly one treatment, found {}",
                count(Role::Treatment)
            )));
        }
        if count(Role::Calibration) == 0 {
            return Err(Error::RoleMismatch("at least one calibration covariate is required".into()));
        }
        Ok(())
    }

    /// The covariance matrix.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Variable labels, in matrix order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Roles, aligned with [`CovarianceModel::labels`].
    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    /// Number of variables.
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    /// Position of a label in the matrix.
    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Labels carrying the given role, in matrix order.
    pub fn labels_with_role(&self, role: Role) -> Vec<String> {
        self.labels
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(l, _)| l.clone())
            .collect()
    }

    /// Covariance between two labelled variables.
    pub fn cov(&self, a: &str, b: &str) -> Result<f64> {
        Ok(self.sigma[(self.index_of(a)?, self.index_of(b)?)])
    }

    fn indices(&self, labels: &[&str]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.index_of(l)).collect()
    }
}

/// Checks `|a_ij - a_ji| <= tol * max|a|` for all entries.
pub fn check_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > tol * scale {
                return Err(Error::NotSymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Positive definiteness via the eigenvalue floor
/// `min eigenvalue > PD_RELATIVE_FLOOR * max eigenvalue`.
pub fn check_positive_definite(m: &DMatrix<f64>) -> Result<()> {
    let (min, max) = eigen_range(m);
    if !(max > 0.0) || !(min > PD_RELATIVE_FLOOR * max) {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: min, max_eigenvalue: max });
    }
    Ok(())
}

/// Inverse of a symmetric positive definite block, refusing blocks whose
/// condition number exceeds [`CONDITION_CAP`].
pub(crate) fn checked_inverse(block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(block));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= CONDITION_CAP) {
        return Err(Error::SingularConditionerBlock { condition });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    Ok(symmetrize(&(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())))
}

/// Symmetric inverse square root `A^{-1/2}` of a positive definite matrix.
pub(crate) fn inverse_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min > 0.0) || max / min > CONDITION_CAP {
        return Err(Error::SingularConditionerBlock { condition: if min > 0.0 { max / min } else { f64::INFINITY } });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Covariance matrix of the residuals from projecting every non-conditioner
/// variable on the conditioners: `S_AA - S_AC S_CC^{-1} S_CA`.
pub fn partial_out(model: &CovarianceModel, conditioners: &[&str]) -> Result<CovarianceModel> {
    if conditioners.is_empty() {
        return Ok(model.clone());
    }
    let c = model.indices(conditioners)?;
    let keep: Vec<usize> = (0..model.dim()).filter(|i| !c.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::Dimension("cannot partial out every variable".into()));
    }
    let s = &model.sigma;
    let s_cc_inv = checked_inverse(&submatrix(s, &c, &c))?;
    let s_ac = submatrix(s, &keep, &c);
    let schur = submatrix(s, &keep, &keep) - &s_ac * s_cc_inv * s_ac.transpose();
    CovarianceModel::without_role_check(
        symmetrize(&schur),
        keep.iter().map(|&i| model.labels[i].clone()).collect(),
        keep.iter().map(|&i| model.roles[i]).collect(),
        SYMMETRY_TOLERANCE,
    )
}

/// Variance of variable `target` after projecting out the variables in `on`.
fn residual_variance(s: &DMatrix<f64>, target: usize, on: &[usize]) -> Result<f64> {
    if on.is_empty() {
        return Ok(s[(target, target)]);
    }
    let inv = checked_inverse(&submatrix(s, on, on))?;
    let cross = DVector::from_iterator(on.len(), on.iter().map(|&j| s[(target, j)]));
    Ok(s[(target, target)] - cross.dot(&(inv * &cross)))
}

/// Partial R-squared of `target` on `regressors` after partialling out
/// `conditioners`, computed from covariances only.
pub fn partial_r2(
    model: &CovarianceModel,
    target: &str,
    regressors: &[&str],
    conditioners: &[&str],
) -> Result<f64> {
    let t = model.index_of(target)?;
    let r = model.indices(regressors)?;
    let c = model.indices(conditioners)?;
    let mut seen = vec![t];
    for &i in r.iter().chain(&c) {
        if seen.contains(&i) {
            return Err(Error::Domain(format!(
                "label `{}` appears more than once among target, regressors and conditioners",
                model.labels[i]
            )));
        }
        seen.push(i);
    }
    let var_c = residual_variance(&model.sigma, t, &c)?;
    if var_c <= DEGENERATE_VARIANCE {
        return Err(Error::DegenerateTargetVariance { label: target.to_string(), variance: var_c });
    }
    let all: Vec<usize> = c.iter().chain(&r).copied().collect();
    let var_rc = residual_variance(&model.sigma, t, &all)?;
    Ok((1.0 - var_rc / var_c).clamp(0.0, 1.0))
}

/// The model in the coordinates used by the identification results:
/// controls partialled out, `Var(X) = 1`, `Var(W1) = I`, `Y` unscaled.
///
/// Coefficients on `X` in these coordinates are per standard deviation of
/// `X^{⊥W0}`; [`NormalizedModel::x_scale`] converts back to original units.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedModel {
    base: CovarianceModel,
    partialled: CovarianceModel,
    sigma_w1x: DVector<f64>,
    sigma_w1y: DVector<f64>,
    sigma_xy: f64,
    var_y: f64,
    x_scale: f64,
    k0: f64,
    k1: f64,
    k2: f64,
    beta_med: f64,
    var_y_perp_xw1: f64,
    r2_x_w1: f64,
    r2_yx_dot_w1: f64,
}

/// Normalizes a model. Control covariates, if any, are partialled out first.
pub fn normalize(model: &CovarianceModel) -> Result<NormalizedModel> {
    model.check_roles()?;
    let controls = model.labels_with_role(Role::Control);
    let control_refs: Vec<&str> = controls.iter().map(String::as_str).collect();
    let partialled = partial_out(model, &control_refs)?;

    let pos = |role: Role| -> Vec<usize> {
        (0..partialled.dim()).filter(|&i| partialled.roles[i] == role).collect()
    };
    let y = pos(Role::Outcome)[0];
    let x = pos(Role::Treatment)[0];
    let w1 = pos(Role::Calibration);
    let s = &partialled.sigma;

    let v_inv_half = inverse_sqrt(&submatrix(s, &w1, &w1))?;
    let x_scale = s[(x, x)].sqrt();
    let cov_w1x = DVector::from_iterator(w1.len(), w1.iter().map(|&j| s[(j, x)]));
    let cov_w1y = DVector::from_iterator(w1.len(), w1.iter().map(|&j| s[(j, y)]));
    let sigma_w1x = &v_inv_half * cov_w1x / x_scale;
    let sigma_w1y = &v_inv_half * cov_w1y;
    let sigma_xy = s[(x, y)] / x_scale;
    let var_y = s[(y, y)];

    let mut nm = NormalizedModel::from_normalized_parts(sigma_w1x, sigma_w1y, sigma_xy, var_y)?;
    nm.x_scale = x_scale;
    nm.partialled = partialled.clone();
    // Whitened covariance of (Y, X, W1).
    let w1_labels: Vec<String> = w1.iter().map(|&i| partialled.labels[i].clone()).collect();
    nm.base = whitened_base(&nm, &partialled.labels[y], &partialled.labels[x], &w1_labels)?;
    Ok(nm)
}

fn whitened_base(
    nm: &NormalizedModel,
    y_label: &str,
    x_label: &str,
    w1_labels: &[String],
) -> Result<CovarianceModel> {
    let d1 = nm.d1();
    let p = d1 + 2;
    let mut m = DMatrix::<f64>::identity(p, p);
    m[(0, 0)] = nm.var_y;
    m[(0, 1)] = nm.sigma_xy;
    m[(1, 0)] = nm.sigma_xy;
    for j in 0..d1 {
        m[(0, j + 2)] = nm.sigma_w1y[j];
        m[(j + 2, 0)] = nm.sigma_w1y[j];
        m[(1, j + 2)] = nm.sigma_w1x[j];
        m[(j + 2, 1)] = nm.sigma_w1x[j];
    }
    let mut labels = vec![y_label.to_string(), x_label.to_string()];
    labels.extend(w1_labels.iter().cloned());
    let mut roles = vec![Role::Outcome, Role::Treatment];
    roles.extend(std::iter::repeat_n(Role::Calibration, d1));
    // Whitening is exact only up to rounding; accept a slightly looser symmetry check.
    CovarianceModel::without_role_check(m, labels, roles, 1e-8)
}

impl NormalizedModel {
    /// Builds a model directly from normalized quantities: `Cov(W1, X)` with
    /// `Var(X) = 1` and `Var(W1) = I`, `Cov(W1, Y)`, `Cov(X, Y)` and `Var(Y)`.
    pub fn from_normalized_parts(
        sigma_w1x: DVector<f64>,
        sigma_w1y: DVector<f64>,
        sigma_xy: f64,
        var_y: f64,
    ) -> Result<Self> {
        let d1 = sigma_w1x.len();
        if d1 == 0 || sigma_w1y.len() != d1 {
            return Err(Error::Dimension("Cov(W1,X) and Cov(W1,Y) must be non-empty and of equal length".into()));
        }
        let r2_x_w1 = sigma_w1x.norm_squared();
        let k0 = 1.0 - r2_x_w1;
        let k1 = sigma_xy - sigma_w1x.dot(&sigma_w1y);
        let k2 = var_y - sigma_w1y.norm_squared();
        let scale = var_y.abs().max(1.0);
        if !(k0 > PD_RELATIVE_FLOOR) || !(k2 > PD_RELATIVE_FLOOR * scale) || !(k0 * k2 - k1 * k1 > PD_RELATIVE_FLOOR * scale) {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: (k0 * k2 - k1 * k1).min(k0).min(k2),
                max_eigenvalue: scale,
            });
        }
        let beta_med = k1 / k0;
        let var_y_perp_xw1 = k2 - k1 * k1 / k0;
        let r2_yx_dot_w1 = k1 * k1 / (k0 * k2);

        let mut labels = vec!["Y".to_string(), "X".to_string()];
        labels.extend((1..=d1).map(|j| format!("W1_{j}")));
        let mut roles = vec![Role::Outcome, Role::Treatment];
        roles.extend(std::iter::repeat_n(Role::Calibration, d1));
        let placeholder = CovarianceModel { sigma: DMatrix::identity(d1 + 2, d1 + 2), labels, roles };
        let mut nm = NormalizedModel {
            base: placeholder.clone(),
            partialled: placeholder,
            sigma_w1x,
            sigma_w1y,
            sigma_xy,
            var_y,
            x_scale: 1.0,
            k0,
            k1,
            k2,
            beta_med,
            var_y_perp_xw1,
            r2_x_w1,
            r2_yx_dot_w1,
        };
        let labels = nm.base.labels.clone();
        nm.base = whitened_base(&nm, &labels[0], &labels[1], &labels[2..])?;
        nm.partialled = nm.base.clone();
        Ok(nm)
    }

    /// The same model with the outcome negated (`Y -> -Y`). Identified sets
    /// of the mirrored model are the negated sets of the original.
    pub fn mirrored(&self) -> NormalizedModel {
        let mut m = self.clone();
        m.sigma_w1y = -&self.sigma_w1y;
        m.sigma_xy = -self.sigma_xy;
        m.k1 = -self.k1;
        m.beta_med = -self.beta_med;
        for j in 1..m.base.dim() {
            m.base.sigma[(0, j)] = -m.base.sigma[(0, j)];
            m.base.sigma[(j, 0)] = -m.base.sigma[(j, 0)];
        }
        let y = m.partialled.roles.iter().position(|r| *r == Role::Outcome).unwrap_or(0);
        for j in 0..m.partialled.dim() {
            if j != y {
                m.partialled.sigma[(y, j)] = -m.partialled.sigma[(y, j)];
                m.partialled.sigma[(j, y)] = -m.partialled.sigma[(j, y)];
            }
        }
        m
    }

    /// Whitened covariance model of `(Y, X, W1)`.
    pub fn base(&self) -> &CovarianceModel {
        &self.base
    }
    /// Covariance model after partialling out controls, before whitening.
    pub fn partialled(&self) -> &CovarianceModel {
        &self.partialled
    }
    /// Number of calibration covariates.
    pub fn d1(&self) -> usize {
        self.sigma_w1x.len()
    }
    /// `Cov(W1, X)` in normalized coordinates.
    pub fn sigma_w1x(&self) -> &DVector<f64> {
        &self.sigma_w1x
    }
    /// `Cov(W1, Y)` in normalized coordinates.
    pub fn sigma_w1y(&self) -> &DVector<f64> {
        &self.sigma_w1y
    }
    /// `Cov(X, Y)` in normalized coordinates.
    pub fn sigma_xy(&self) -> f64 {
        self.sigma_xy
    }
    /// `Var(Y)` (after partialling out controls).
    pub fn var_y(&self) -> f64 {
        self.var_y
    }
    /// Standard deviation of `X` (after partialling out controls). A
    /// coefficient `b` in normalized units equals `b / x_scale` in original units.
    pub fn x_scale(&self) -> f64 {
        self.x_scale
    }
    /// `Var(X^{⊥W1})`.
    pub fn k0(&self) -> f64 {
        self.k0
    }
    /// `Cov(Y^{⊥W1}, X^{⊥W1})`.
    pub fn k1(&self) -> f64 {
        self.k1
    }
    /// `Var(Y^{⊥W1})`.
    pub fn k2(&self) -> f64 {
        self.k2
    }
    /// Coefficient on `X` in the regression of `Y` on `(1, X, W1)`, normalized units.
    pub fn beta_med(&self) -> f64 {
        self.beta_med
    }
    /// `Var(Y^{⊥X,W1})`.
    pub fn var_y_perp_xw1(&self) -> f64 {
        self.var_y_perp_xw1
    }
    /// `R^2` of `X` on `W1`.
    pub fn r2_x_w1(&self) -> f64 {
        self.r2_x_w1
    }
    /// Partial `R^2` of `Y` on `X` given `W1`.
    pub fn r2_yx_dot_w1(&self) -> f64 {
        self.r2_yx_dot_w1
    }

    /// Fails when `Cov(W1, X) = 0` or `Cov(W1, Y) = Cov(W1, X) Cov(X, Y)`.
    pub fn check_knife_edge(&self) -> Result<()> {
        let nx = self.sigma_w1x.norm();
        if nx < KNIFE_EDGE_TOLERANCE {
            return Err(Error::KnifeEdgeViolated(format!("‖Cov(W1,X)‖ = {nx:e}")));
        }
        let product = &self.sigma_w1x * self.sigma_xy;
        let gap = (&self.sigma_w1y - &product).norm();
        let scale = self.sigma_w1y.norm().max(product.norm());
        if gap <= KNIFE_EDGE_TOLERANCE * scale || scale == 0.0 {
            return Err(Error::KnifeEdgeViolated(format!(
                "‖Cov(W1,Y) - Cov(W1,X)Cov(X,Y)‖ = {gap:e}"
            )));
        }
        Ok(())
    }
}
