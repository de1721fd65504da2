//! Covariate-sampling distributions of selection ratios.
//!
//! A [`SelectionDgp`] fixes the full covariate vector `W ∈ R^K`, the
//! treatment-equation coefficients `π` and the outcome-equation coefficients
//! `γ`. A [`Design`] picks which `d1` covariates are observed. For each design
//! this module evaluates
//!
//! * `r_X(s) = sqrt(Var(π₂'W₂) / Var(π₁'W₁))`,
//! * the unresidualized coefficient ratio `δ_orig(s)`,
//! * the residualized coefficient ratio `δ_resid(s)`,
//!
//! and summarizes their distribution under uniform random selection, either
//! by exact enumeration of all `C(K, d1)` designs or by Monte Carlo.
//!
//! Covariance matrices of the structured families (MA(1), AR(1),
//! exchangeable, factor) are never formed: quadratic forms and the solves
//! against observed blocks run in `O(K)` (times the factor count).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution as _, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::covkernel::check_positive_definite;
use crate::error::{Error, Result};
use crate::stream_rng;

/// Default maximum number of designs enumerated exactly.
pub const DEFAULT_ENUMERATION_CAP: u128 = 5_000_000;
/// Variances below this are treated as zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-14;
/// Default `D` in the requirement `Var(π'W) ∈ (1/D, D)`.
pub const DEFAULT_VARIANCE_BOUND: f64 = 1e3;
/// Bound on the absolute factor loadings accepted for factor designs.
pub const MAX_FACTOR_LOADING: f64 = 10.0;

/// Covariance matrix of `W`, stored by family.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceStructure {
    /// An arbitrary symmetric positive definite matrix.
    Dense(DMatrix<f64>),
    /// `Cov(W_i, W_j) = 1{i=j} + ρ 1{i≠j}`.
    Exchangeable { k: usize, rho: f64 },
    /// `Cov(W_i, W_j) = 1{i=j} + ρ 1{|i−j|=1}`.
    Ma1 { k: usize, rho: f64 },
    /// `Cov(W_i, W_j) = ρ^{|i−j|}` with `0^0 = 1`.
    Ar1 { k: usize, rho: f64 },
    /// `ΛΛ' + σ²_E I` with `Λ` of size `K × R`.
    Factor { loadings: DMatrix<f64>, sigma_e2: f64 },
}

impl CovarianceStructure {
    /// Number of covariates `K`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(m) => m.nrows(),
            Self::Exchangeable { k, .. } | Self::Ma1 { k, .. } | Self::Ar1 { k, .. } => *k,
            Self::Factor { loadings, .. } => loadings.nrows(),
        }
    }

    /// `V x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let k = x.len();
        match self {
            Self::Dense(m) => (m * DVector::from_column_slice(x)).as_slice().to_vec(),
            Self::Exchangeable { rho, .. } => {
                let total: f64 = x.iter().sum();
                x.iter().map(|&v| (1.0 - rho) * v + rho * total).collect()
            }
            Self::Ma1 { rho, .. } => (0..k)
                .map(|i| {
                    let mut v = x[i];
                    if i > 0 {
                        v += rho * x[i - 1];
                    }
                    if i + 1 < k {
                        v += rho * x[i + 1];
                    }
                    v
                })
                .collect(),
            Self::Ar1 { rho, .. } => {
                // (Vx)_i = Σ_{j≤i} ρ^{i−j} x_j + Σ_{j≥i} ρ^{j−i} x_j − x_i.
                let mut forward = vec![0.0; k];
                let mut acc = 0.0;
                for i in 0..k {
                    acc = x[i] + rho * acc;
                    forward[i] = acc;
                }
                let mut out = vec![0.0; k];
                acc = 0.0;
                for i in (0..k).rev() {
                    acc = x[i] + rho * acc;
                    out[i] = forward[i] + acc - x[i];
                }
                out
            }
            Self::Factor { loadings, sigma_e2 } => {
                let xv = DVector::from_column_slice(x);
                let f = loadings.tr_mul(&xv);
                let lf = loadings * f;
                (0..k).map(|i| lf[i] + sigma_e2 * x[i]).collect()
            }
        }
    }

    /// Bilinear form `a' V b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Exchangeable { rho, .. } => {
                let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
                rho * sa * sb + (1.0 - rho) * dot(a, b)
            }
            Self::Ma1 { rho, .. } => {
                let mut v = dot(a, b);
                for i in 0..a.len().saturating_sub(1) {
                    v += rho * (a[i] * b[i + 1] + a[i + 1] * b[i]);
                }
                v
            }
            _ => dot(a, &self.matvec(b)),
        }
    }

    /// `V[idx, idx]^{-1} rhs` for the sub-block on the (sorted) indices `idx`.
    /// `None` when the block is numerically singular.
    pub fn solve_block(&self, idx: &[usize], rhs: &[f64]) -> Option<Vec<f64>> {
        let m = idx.len();
        if m == 0 {
            return Some(Vec::new());
        }
        match self {
            Self::Dense(v) => {
                let block = DMatrix::from_fn(m, m, |i, j| v[(idx[i], idx[j])]);
                let chol = block.cholesky()?;
                Some(chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
            }
            Self::Exchangeable { rho, .. } => {
                // ((1−ρ)I + ριι')^{-1} = (I − ρ/(1−ρ+mρ) ιι') / (1−ρ).
                let denom = 1.0 - rho + m as f64 * rho;
                if (1.0 - rho).abs() < DEGENERATE_VARIANCE || denom.abs() < DEGENERATE_VARIANCE {
                    return None;
                }
                let total: f64 = rhs.iter().sum();
                Some(rhs.iter().map(|&r| (r - rho * total / denom) / (1.0 - rho)).collect())
            }
            Self::Ma1 { rho, .. } => {
                let off: Vec<f64> = (0..m.saturating_sub(1))
                    .map(|i| if idx[i + 1] == idx[i] + 1 { *rho } else { 0.0 })
                    .collect();
                solve_tridiagonal(&vec![1.0; m], &off, rhs)
            }
            Self::Ar1 { rho, .. } => {
                // The observed coordinates form a Gauss–Markov chain with lag
                // correlations a_k = ρ^{gap}; its precision is tridiagonal.
                let a: Vec<f64> = (0..m.saturating_sub(1))
                    .map(|i| rho.powi((idx[i + 1] - idx[i]) as i32))
                    .collect();
                if a.iter().any(|&ak| 1.0 - ak * ak < DEGENERATE_VARIANCE) {
                    return None;
                }
                let w: Vec<f64> = a.iter().map(|&ak| ak * ak / (1.0 - ak * ak)).collect();
                let out = (0..m)
                    .map(|i| {
                        let mut diag = 1.0;
                        let mut v = 0.0;
                        if i > 0 {
                            diag += w[i - 1];
                            v -= a[i - 1] / (1.0 - a[i - 1] * a[i - 1]) * rhs[i - 1];
                        }
                        if i + 1 < m {
                            diag += w[i];
                            v -= a[i] / (1.0 - a[i] * a[i]) * rhs[i + 1];
                        }
                        v + diag * rhs[i]
                    })
                    .collect();
                Some(out)
            }
            Self::Factor { loadings, sigma_e2 } => {
                // Woodbury: (ΛΛ' + σ²I)^{-1} = (I − Λ(σ²I + Λ'Λ)^{-1}Λ') / σ².
                if *sigma_e2 <= 0.0 {
                    return None;
                }
                let r = loadings.ncols();
                let lam = DMatrix::from_fn(m, r, |i, j| loadings[(idx[i], j)]);
                let inner = DMatrix::identity(r, r) * *sigma_e2 + lam.tr_mul(&lam);
                let chol = inner.cholesky()?;
                let b = DVector::from_column_slice(rhs);
                let t = chol.solve(&lam.tr_mul(&b));
                let out = (b - lam * t) / *sigma_e2;
                Some(out.as_slice().to_vec())
            }
        }
    }

    /// The full `K × K` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense(m) => m.clone(),
            Self::Factor { loadings, sigma_e2 } => {
                loadings * loadings.transpose() + DMatrix::identity(loadings.nrows(), loadings.nrows()) * *sigma_e2
            }
            other => {
                let k = other.dim();
                let mut out = DMatrix::zeros(k, k);
                let mut e = vec![0.0; k];
                for j in 0..k {
                    e[j] = 1.0;
                    let col = other.matvec(&e);
                    out.set_column(j, &DVector::from_vec(col));
                    e[j] = 0.0;
                }
                out
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thomas algorithm for a symmetric tridiagonal system.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut denom = diag[0];
    if denom.abs() < DEGENERATE_VARIANCE {
        return None;
    }
    c[0] = if m > 1 { off[0] / denom } else { 0.0 };
    d[0] = rhs[0] / denom;
    for i in 1..m {
        denom = diag[i] - off[i - 1] * c[i - 1];
        if denom.abs() < DEGENERATE_VARIANCE {
            return None;
        }
        c[i] = if i + 1 < m { off[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..m.saturating_sub(1)).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// Covariance family and generator used to build a [`SelectionDgp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    Ma1,
    Ar1,
    Exchangeable,
    Factor,
    Custom,
    DeltaNonconv,
}

/// Population model for covariate selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDgp {
    pub pi: DVector<f64>,
    pub gamma: DVector<f64>,
    pub var_w: CovarianceStructure,
    pub kind: DgpKind,
    /// `C` in the coefficient bound `sup |π_i| ≤ C/√K` or `C/K`.
    pub coefficient_bound: f64,
}

/// One checked sub-assumption of a generated design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub assumption: &'static str,
    pub holds: bool,
    pub detail: String,
}

impl SelectionDgp {
    /// A model with a user-supplied covariance matrix.
    pub fn custom(pi: DVector<f64>, gamma: DVector<f64>, var_w: DMatrix<f64>) -> Result<Self> {
        let k = pi.len();
        if gamma.len() != k || var_w.nrows() != k || var_w.ncols() != k {
            return Err(Error::Dimension(format!(
                "pi has length {k}, gamma {}, var_w is {}x{}",
                gamma.len(),
                var_w.nrows(),
                var_w.ncols()
            )));
        }
        crate::covkernel::check_symmetric(&var_w, 1e-10)?;
        check_positive_definite(&var_w)?;
        let bound = pi.amax() * (k as f64).sqrt();
        Ok(Self { pi, gamma, var_w: CovarianceStructure::Dense(var_w), kind: DgpKind::Custom, coefficient_bound: bound })
    }

    /// Population model taken from a covariance model: `W` is the set of
    /// calibration covariates (controls partialled out first), `π` the
    /// coefficients from projecting `X` on `W` and `γ` the coefficients on `W`
    /// from projecting `Y` on `(X, W)`.
    pub fn from_model(model: &crate::covkernel::CovarianceModel) -> Result<Self> {
        use crate::covkernel::{partial_out, Role};
        let controls = model.labels_with_role(Role::Control);
        let refs: Vec<&str> = controls.iter().map(String::as_str).collect();
        let m = partial_out(model, &refs)?;
        let find = |role: Role| (0..m.dim()).filter(|&i| m.roles()[i] == role).collect::<Vec<_>>();
        let (y, x, w) = (find(Role::Outcome)[0], find(Role::Treatment)[0], find(Role::Calibration));
        let s = m.sigma();
        let k = w.len();
        let var_w = DMatrix::from_fn(k, k, |i, j| s[(w[i], w[j])]);
        let cov_wx = DVector::from_fn(k, |i, _| s[(w[i], x)]);
        let pi = crate::covkernel::checked_inverse(&var_w)? * cov_wx;
        // Regressors (X, W): coefficients solve Var(X,W) b = Cov((X,W), Y).
        let idx: Vec<usize> = std::iter::once(x).chain(w.iter().copied()).collect();
        let var_xw = DMatrix::from_fn(k + 1, k + 1, |i, j| s[(idx[i], idx[j])]);
        let cov_y = DVector::from_fn(k + 1, |i, _| s[(idx[i], y)]);
        let coef = crate::covkernel::checked_inverse(&var_xw)? * cov_y;
        let gamma = coef.rows(1, k).into_owned();
        let mut dgp = Self::custom(pi, gamma, var_w)?;
        dgp.coefficient_bound = dgp.pi.amax() * (k as f64).sqrt();
        Ok(dgp)
    }

    /// Number of covariates `K`.
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// `Var(π'W)`.
    pub fn index_variance(&self) -> f64 {
        self.var_w.bilinear(self.pi.as_slice(), self.pi.as_slice())
    }

    /// Checks every sub-assumption of the family this model claims
    /// to belong to, with `D` = [`DEFAULT_VARIANCE_BOUND`].
    pub fn assumption_checks(&self) -> Vec<AssumptionCheck> {
        let k = self.k() as f64;
        let sup = self.pi.amax();
        let var = self.index_variance();
        let d = DEFAULT_VARIANCE_BOUND;
        let check = |assumption, holds, detail: String| AssumptionCheck { assumption, holds, detail };
        let variance_check = |label| {
            check(label, var > 1.0 / d && var < d, format!("Var(pi'W) = {var:.6e} must lie in ({:e}, {d:e})", 1.0 / d))
        };
        let coef = |label, rate: f64| {
            let bound = self.coefficient_bound / rate;
            check(label, sup <= bound * (1.0 + 1e-12), format!("max |pi_i| = {sup:.6e}, bound C/rate = {bound:.6e}"))
        };
        match (&self.kind, &self.var_w) {
            (DgpKind::Ma1, CovarianceStructure::Ma1 { rho, .. }) => vec![
                check("ma1.rho", rho.abs() < 0.5, format!("MA(1) requires |rho| < 1/2, got {rho}")),
                coef("ma1.coefficients", k.sqrt()),
                variance_check("ma1.variance"),
            ],
            (DgpKind::Ar1, CovarianceStructure::Ar1 { rho, .. }) => vec![
                check("ar1.rho", rho.abs() < 1.0, format!("AR(1) requires |rho| < 1, got {rho}")),
                coef("ar1.coefficients", k.sqrt()),
                variance_check("ar1.variance"),
            ],
            (DgpKind::Exchangeable | DgpKind::DeltaNonconv, CovarianceStructure::Exchangeable { rho, .. }) => vec![
                check("exchangeable.rho", *rho > 0.0 && *rho < 1.0, format!("exchangeable requires rho in (0, 1), got {rho}")),
                coef("exchangeable.coefficients", k),
                variance_check("exchangeable.variance"),
            ],
            (DgpKind::Factor, CovarianceStructure::Factor { loadings, sigma_e2 }) => vec![
                check(
                    "factor.structure",
                    *sigma_e2 > 0.0 && loadings.amax() <= MAX_FACTOR_LOADING,
                    format!("requires sigma_E^2 > 0 and |loadings| <= {MAX_FACTOR_LOADING}, got {sigma_e2} and {}", loadings.amax()),
                ),
                coef("factor.coefficients", k),
                variance_check("factor.variance"),
            ],
            (DgpKind::Custom, _) => vec![variance_check("custom.variance")],
            _ => vec![check("structure", false, "covariance structure does not match the declared family".into())],
        }
    }

    /// First failing sub-assumption as an error.
    pub fn validate(&self) -> Result<()> {
        match self.assumption_checks().into_iter().find(|c| !c.holds) {
            Some(c) => Err(Error::AssumptionViolated { assumption: c.assumption, detail: c.detail }),
            None => Ok(()),
        }
    }
}

/// Family and parameters for [`make_dgp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DgpFamily {
    Ma1 { rho: f64 },
    Ar1 { rho: f64 },
    Exchangeable { rho: f64 },
    Factor { factors: usize, sigma_e2: f64 },
}

/// Generates a model of the given family with `K` covariates.
///
/// Coefficients are drawn i.i.d. as `C/√K · U(0.5, 1)` (MA, AR) or
/// `C/K · U(0.5, 1)` (exchangeable, factor), separately for `π` and `γ`;
/// factor loadings are `U(0.5, 1)`. The result is validated against its
/// family's assumptions.
pub fn make_dgp(family: DgpFamily, k: usize, scale: f64, seed: u64) -> Result<SelectionDgp> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least two covariates, got K = {k}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("coefficient scale must be positive, got {scale}")));
    }
    // Range checks on the family parameters come first so that the error
    // names the violated sub-assumption even when generation would fail.
    match family {
        DgpFamily::Ma1 { rho } if !(rho.abs() < 0.5) => {
            return Err(Error::AssumptionViolated { assumption: "ma1.rho", detail: format!("MA(1) requires |rho| < 1/2, got {rho}") })
        }
        DgpFamily::Ar1 { rho } if !(rho.abs() < 1.0) => {
            return Err(Error::AssumptionViolated { assumption: "ar1.rho", detail: format!("AR(1) requires |rho| < 1, got {rho}") })
        }
        DgpFamily::Exchangeable { rho } if !(rho > 0.0 && rho < 1.0) => {
            return Err(Error::AssumptionViolated {
                assumption: "exchangeable.rho",
                detail: format!("exchangeable requires rho in (0, 1), got {rho}"),
            })
        }
        DgpFamily::Factor { factors, sigma_e2 } if factors == 0 || !(sigma_e2 > 0.0) => {
            return Err(Error::AssumptionViolated {
                assumption: "factor.structure",
                detail: format!("factor model requires R >= 1 and sigma_E^2 > 0, got R = {factors}, {sigma_e2}"),
            })
        }
        _ => {}
    }
    let mut rng = stream_rng(seed, 0);
    let unit = Uniform::new_inclusive(0.5, 1.0);
    let kf = k as f64;
    let (rate, var_w, kind) = match family {
        DgpFamily::Ma1 { rho } => (kf.sqrt(), CovarianceStructure::Ma1 { k, rho }, DgpKind::Ma1),
        DgpFamily::Ar1 { rho } => (kf.sqrt(), CovarianceStructure::Ar1 { k, rho }, DgpKind::Ar1),
        DgpFamily::Exchangeable { rho } => (kf, CovarianceStructure::Exchangeable { k, rho }, DgpKind::Exchangeable),
        DgpFamily::Factor { factors, sigma_e2 } => {
            let loadings = DMatrix::from_fn(k, factors, |_, _| unit.sample(&mut rng));
            (kf, CovarianceStructure::Factor { loadings, sigma_e2 }, DgpKind::Factor)
        }
    };
    let pi = DVector::from_fn(k, |_, _| scale / rate * unit.sample(&mut rng));
    let gamma = DVector::from_fn(k, |_, _| scale / rate * unit.sample(&mut rng));
    let dgp = SelectionDgp { pi, gamma, var_w, kind, coefficient_bound: scale };
    dgp.validate()?;
    Ok(dgp)
}

/// `C' = (C(r+2) − r)/2`, the coefficient weight in [`make_dgp_delta_nonconv`].
pub fn delta_nonconv_weight(c: f64, r: f64) -> f64 {
    (c * (r + 2.0) - r) / 2.0
}

/// Exchangeable model whose residualized coefficient ratio converges to `c`
/// under any selection proportion `r`: with 1-based indices,
/// `γ_i = (2/K)·1{i even}`, `π_i = 2(1−C')/K` for odd `i` and `2C'/K` for
/// even `i`.
pub fn make_dgp_delta_nonconv(c: f64, r: f64, rho: f64, k: usize) -> Result<SelectionDgp> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::AssumptionViolated { assumption: "exchangeable.rho", detail: format!("exchangeable requires rho in (0, 1), got {rho}") });
    }
    if !(r > 0.0) || k < 2 {
        return Err(Error::Domain(format!("need r > 0 and K >= 2, got r = {r}, K = {k}")));
    }
    let cp = delta_nonconv_weight(c, r);
    let kf = k as f64;
    let even = |i: usize| (i + 1).is_multiple_of(2);
    let gamma = DVector::from_fn(k, |i, _| if even(i) { 2.0 / kf } else { 0.0 });
    let pi = DVector::from_fn(k, |i, _| if even(i) { 2.0 * cp / kf } else { 2.0 * (1.0 - cp) / kf });
    let bound = 2.0 * cp.abs().max((1.0 - cp).abs()).max(1.0);
    Ok(SelectionDgp {
        pi,
        gamma,
        var_w: CovarianceStructure::Exchangeable { k, rho },
        kind: DgpKind::DeltaNonconv,
        coefficient_bound: bound,
    })
}

/// `sqrt(r(r+c)/(1+rc))`: the probability limit of `r_X(S)` when
/// `d2/d1 → r` and the own-variance share of `Var(π'W)` converges to `c`.
pub fn rx_limit(r: f64, c: f64) -> Result<f64> {
    if !(r > 0.0) || !(c >= 0.0) || !r.is_finite() || !c.is_finite() {
        return Err(Error::Domain(format!("rx_limit needs r > 0 and c >= 0, got r = {r}, c = {c}")));
    }
    Ok((r * (r + c) / (1.0 + r * c)).sqrt())
}

/// Which covariates are observed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Design {
    mask: Vec<bool>,
}

impl Design {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    /// Observed set given by (any-order, distinct) indices below `k`.
    pub fn from_indices(k: usize, idx: &[usize]) -> Result<Self> {
        let mut mask = vec![false; k];
        for &i in idx {
            if i >= k || mask[i] {
                return Err(Error::Domain(format!("invalid or repeated index {i} for K = {k}")));
            }
            mask[i] = true;
        }
        Ok(Self { mask })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn k(&self) -> usize {
        self.mask.len()
    }

    /// Number of observed covariates.
    pub fn d1(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Sorted observed indices.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.mask[i]).collect()
    }

    pub fn complement(&self) -> Self {
        Self { mask: self.mask.iter().map(|b| !b).collect() }
    }
}

/// Value of a selection ratio at one design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SelectionValue {
    Finite(f64),
    /// Positive numerator over a vanishing denominator.
    Infinite,
    /// Undefined (for example `0/0`); excluded from summaries.
    Degenerate,
}

impl SelectionValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            _ => None,
        }
    }
}

fn masked(v: &DVector<f64>, mask: &[bool], keep: bool) -> Vec<f64> {
    v.iter().zip(mask).map(|(&x, &m)| if m == keep { x } else { 0.0 }).collect()
}

/// `r_X(s) = sqrt(Var(π₂'W₂) / Var(π₁'W₁))`.
pub fn r_x_of_s(dgp: &SelectionDgp, s: &Design) -> SelectionValue {
    let p1 = masked(&dgp.pi, s.mask(), true);
    let p2 = masked(&dgp.pi, s.mask(), false);
    let num = dgp.var_w.bilinear(&p2, &p2).max(0.0);
    let den = dgp.var_w.bilinear(&p1, &p1).max(0.0);
    if den < DEGENERATE_VARIANCE {
        if num > DEGENERATE_VARIANCE {
            SelectionValue::Infinite
        } else {
            SelectionValue::Degenerate
        }
    } else {
        SelectionValue::Finite((num / den).sqrt())
    }
}

/// `[Cov(X, γ₂'W₂)/Var(γ₂'W₂)] / [Cov(X, γ₁'W₁)/Var(γ₁'W₁)]`.
pub fn delta_orig_of_s(dgp: &SelectionDgp, s: &Design) -> SelectionValue {
    let pi = dgp.pi.as_slice();
    let g1 = masked(&dgp.gamma, s.mask(), true);
    let g2 = masked(&dgp.gamma, s.mask(), false);
    let v = &dgp.var_w;
    let (c2, v2) = (v.bilinear(&g2, pi), v.bilinear(&g2, &g2));
    let (c1, v1) = (v.bilinear(&g1, pi), v.bilinear(&g1, &g1));
    coefficient_ratio(c2, v2, c1, v1)
}

fn coefficient_ratio(c2: f64, v2: f64, c1: f64, v1: f64) -> SelectionValue {
    if v2 <= DEGENERATE_VARIANCE || v1 <= DEGENERATE_VARIANCE {
        return SelectionValue::Degenerate;
    }
    let (num, den) = (c2 / v2, c1 / v1);
    if den.abs() > DEGENERATE_VARIANCE {
        SelectionValue::Finite(num / den)
    } else if num.abs() > DEGENERATE_VARIANCE {
        SelectionValue::Infinite
    } else {
        SelectionValue::Degenerate
    }
}

/// The four components of the residualized ratio at one design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidComponents {
    /// `Cov(X, γ₂'W₂^{⊥W1}) = γ₂'Var(W₂^{⊥W1})π₂`.
    pub cov_unobserved: f64,
    /// `Var(γ₂'W₂^{⊥W1}) = γ₂'Var(W₂^{⊥W1})γ₂`.
    pub var_unobserved: f64,
    /// `Cov(X, (γ₁+ρ)'W₁) = γ'Var(W)π − cov_unobserved`.
    pub cov_observed: f64,
    /// `Var((γ₁+ρ)'W₁) = γ'Var(W)γ − var_unobserved`.
    pub var_observed: f64,
}

/// Components of `δ_resid(s)`. Exchangeable models use the closed form
/// `Var(W₂^{⊥W1}) = ρ(1−ρ)/((d1−1)ρ+1)·ιι' + (1−ρ)I`; other families solve
/// against the observed block.
pub fn resid_components(dgp: &SelectionDgp, s: &Design) -> Option<ResidComponents> {
    let pi = dgp.pi.as_slice();
    let gamma = dgp.gamma.as_slice();
    let mask = s.mask();
    let total_cov = dgp.var_w.bilinear(gamma, pi);
    let total_var = dgp.var_w.bilinear(gamma, gamma);
    let (cov_u, var_u) = match &dgp.var_w {
        CovarianceStructure::Exchangeable { rho, .. } => {
            let d1 = s.d1() as f64;
            let kappa = rho * (1.0 - rho) / ((d1 - 1.0) * rho + 1.0);
            let (mut sg, mut sp, mut sgp, mut sgg) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..mask.len() {
                if !mask[i] {
                    sg += gamma[i];
                    sp += pi[i];
                    sgp += gamma[i] * pi[i];
                    sgg += gamma[i] * gamma[i];
                }
            }
            (kappa * sg * sp + (1.0 - rho) * sgp, kappa * sg * sg + (1.0 - rho) * sgg)
        }
        structure => {
            let g2 = masked(&dgp.gamma, mask, false);
            let p2 = masked(&dgp.pi, mask, false);
            let obs = s.observed();
            let vg = structure.matvec(&g2);
            let vp = structure.matvec(&p2);
            let ug: Vec<f64> = obs.iter().map(|&i| vg[i]).collect();
            let up: Vec<f64> = obs.iter().map(|&i| vp[i]).collect();
            let sol = structure.solve_block(&obs, &ug)?;
            let a = dot(&g2, &vp) - dot(&sol, &up);
            let b = dot(&g2, &vg) - dot(&sol, &ug);
            (a, b)
        }
    };
    Some(ResidComponents {
        cov_unobserved: cov_u,
        var_unobserved: var_u,
        cov_observed: total_cov - cov_u,
        var_observed: total_var - var_u,
    })
}

/// `δ_resid(s)`: the coefficient ratio after residualizing `γ₂'W₂` on `W₁`.
pub fn delta_resid_of_s(dgp: &SelectionDgp, s: &Design) -> SelectionValue {
    match resid_components(dgp, s) {
        Some(r) => coefficient_ratio(r.cov_unobserved, r.var_unobserved, r.cov_observed, r.var_observed),
        None => SelectionValue::Degenerate,
    }
}

/// `C(n, k)` in 128-bit arithmetic (saturating).
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Lexicographic iterator over all `d1`-subsets of `{0, …, K−1}`.
#[derive(Debug, Clone)]
pub struct DesignEnumeration {
    k: usize,
    current: Option<Vec<usize>>,
    remaining: u128,
}

impl DesignEnumeration {
    /// Total number of designs this iterator yields.
    pub fn count_total(k: usize, d1: usize) -> u128 {
        binomial(k, d1)
    }
}

impl Iterator for DesignEnumeration {
    type Item = Design;

    fn next(&mut self) -> Option<Design> {
        if self.remaining == 0 {
            return None;
        }
        let cur = self.current.as_mut()?;
        let design = Design::from_indices(self.k, cur).expect("valid combination");
        self.remaining -= 1;
        if self.remaining > 0 {
            advance_combination(cur, self.k);
        }
        Some(design)
    }
}

fn advance_combination(cur: &mut [usize], k: usize) -> bool {
    let m = cur.len();
    let mut i = m;
    while i > 0 {
        i -= 1;
        if cur[i] < k - m + i {
            cur[i] += 1;
            for j in i + 1..m {
                cur[j] = cur[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// All `C(K, d1)` designs in lexicographic order of observed indices.
pub fn enumerate_designs(k: usize, d1: usize, cap: u128) -> Result<DesignEnumeration> {
    if d1 > k {
        return Err(Error::Domain(format!("d1 = {d1} exceeds K = {k}")));
    }
    let count = binomial(k, d1);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    Ok(DesignEnumeration { k, current: Some((0..d1).collect()), remaining: count })
}

/// The combination of lexicographic rank `rank` (0-based).
pub fn unrank_combination(k: usize, d1: usize, mut rank: u128) -> Vec<usize> {
    let mut out = Vec::with_capacity(d1);
    let mut next = 0;
    for slot in 0..d1 {
        let left = d1 - slot - 1;
        loop {
            let with_next = binomial(k - next - 1, left);
            if rank < with_next {
                out.push(next);
                next += 1;
                break;
            }
            rank -= with_next;
            next += 1;
        }
    }
    out
}

/// Design number `index` of the uniform sample identified by `seed`.
pub fn sample_design(k: usize, d1: usize, seed: u64, index: u64) -> Design {
    let mut rng = stream_rng(seed, index);
    let mut perm: Vec<usize> = (0..k).collect();
    for j in 0..d1.min(k) {
        let pick = rng.gen_range(j..k);
        perm.swap(j, pick);
    }
    Design::from_indices(k, &perm[..d1.min(k)]).expect("distinct indices")
}

/// `n` i.i.d. uniform `d1`-subsets; element `i` depends only on `(seed, i)`.
pub fn sample_designs(k: usize, d1: usize, n: usize, seed: u64) -> impl Iterator<Item = Design> {
    (0..n as u64).map(move |i| sample_design(k, d1, seed, i))
}

/// How a distribution was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Exact,
    MonteCarlo,
}

/// Summary statistics of a covariate-sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingSummary {
    /// Designs evaluated.
    pub n: usize,
    /// Designs with a finite value (used in the statistics below).
    pub n_used: usize,
    pub n_infinite: usize,
    pub n_degenerate: usize,
    pub mode: SamplingMode,
    /// Share of used values `≤ 1` (ties at 1 count as `≤`).
    pub prob_le_1: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub mean: f64,
    /// Standard deviation with denominator `n_used − 1` (0 for one value).
    pub sd: f64,
}

/// Type-7 percentile (linear interpolation) of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes finite values; infinite and degenerate ones are counted only.
pub fn summarize(values: &[SelectionValue], mode: SamplingMode) -> Result<SamplingSummary> {
    let mut finite: Vec<f64> = values.iter().filter_map(|v| v.finite()).collect();
    let n_infinite = values.iter().filter(|v| matches!(v, SelectionValue::Infinite)).count();
    let n_degenerate = values.len() - finite.len() - n_infinite;
    if finite.is_empty() {
        return Err(Error::AllDegenerate);
    }
    finite.sort_by(f64::total_cmp);
    let m = finite.len();
    let mean = finite.iter().sum::<f64>() / m as f64;
    let sd = if m > 1 {
        (finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64).sqrt()
    } else {
        0.0
    };
    let le1 = finite.iter().filter(|&&v| v <= 1.0).count();
    Ok(SamplingSummary {
        n: values.len(),
        n_used: m,
        n_infinite,
        n_degenerate,
        mode,
        prob_le_1: le1 as f64 / m as f64,
        min: finite[0],
        p25: percentile_sorted(&finite, 0.25),
        median: percentile_sorted(&finite, 0.5),
        p75: percentile_sorted(&finite, 0.75),
        max: finite[m - 1],
        mean,
        sd,
    })
}

/// One histogram bin `[lower, upper)` (the last bin is closed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram of the finite values.
pub fn histogram(values: &[SelectionValue], bins: usize) -> Vec<HistogramBin> {
    let finite: Vec<f64> = values.iter().filter_map(|v| v.finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin { lower: lo + i as f64 * width, upper: lo + (i + 1) as f64 * width, count })
        .collect()
}

/// Values of the three selection ratios at every evaluated design, in design
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDistribution {
    pub mode: SamplingMode,
    pub k: usize,
    pub d1: usize,
    pub r_x: Vec<SelectionValue>,
    pub delta_orig: Vec<SelectionValue>,
    pub delta_resid: Vec<SelectionValue>,
}

impl SelectionDistribution {
    pub fn len(&self) -> usize {
        self.r_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_x.is_empty()
    }
}

type Triple = (SelectionValue, SelectionValue, SelectionValue);

fn evaluate(dgp: &SelectionDgp, s: &Design) -> Triple {
    (r_x_of_s(dgp, s), delta_orig_of_s(dgp, s), delta_resid_of_s(dgp, s))
}

fn collect(mode: SamplingMode, k: usize, d1: usize, triples: Vec<Triple>) -> SelectionDistribution {
    let mut out = SelectionDistribution {
        mode,
        k,
        d1,
        r_x: Vec::with_capacity(triples.len()),
        delta_orig: Vec::with_capacity(triples.len()),
        delta_resid: Vec::with_capacity(triples.len()),
    };
    for (a, b, c) in triples {
        out.r_x.push(a);
        out.delta_orig.push(b);
        out.delta_resid.push(c);
    }
    out
}

/// Evaluates every design of size `d1`. Work is split into contiguous
/// lexicographic rank ranges, so the output order never depends on the
/// number of threads.
pub fn exact_distribution(dgp: &SelectionDgp, d1: usize, cap: u128) -> Result<SelectionDistribution> {
    let k = dgp.k();
    let total = enumerate_designs(k, d1, cap)?.remaining;
    const CHUNK: u128 = 4096;
    let chunks = total.div_ceil(CHUNK);
    let parts: Vec<Vec<Triple>> = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let start = c as u128 * CHUNK;
            let len = CHUNK.min(total - start);
            let mut comb = unrank_combination(k, d1, start);
            let mut out = Vec::with_capacity(len as usize);
            for j in 0..len {
                let s = Design::from_indices(k, &comb).expect("valid combination");
                out.push(evaluate(dgp, &s));
                if j + 1 < len {
                    advance_combination(&mut comb, k);
                }
            }
            out
        })
        .collect();
    Ok(collect(SamplingMode::Exact, k, d1, parts.into_iter().flatten().collect()))
}

/// Evaluates `n` uniformly sampled designs of size `d1`.
pub fn sampled_distribution(dgp: &SelectionDgp, d1: usize, n: usize, seed: u64) -> Result<SelectionDistribution> {
    let k = dgp.k();
    if d1 > k {
        return Err(Error::Domain(format!("d1 = {d1} exceeds K = {k}")));
    }
    let triples: Vec<Triple> = (0..n as u64)
        .into_par_iter()
        .map(|i| evaluate(dgp, &sample_design(k, d1, seed, i)))
        .collect();
    Ok(collect(SamplingMode::MonteCarlo, k, d1, triples))
}

/// Exact enumeration when `C(K, d1) ≤ cap`, otherwise `draws` Monte-Carlo
/// designs.
pub fn distribution(dgp: &SelectionDgp, d1: usize, cap: u128, draws: usize, seed: u64) -> Result<SelectionDistribution> {
    match exact_distribution(dgp, d1, cap) {
        Err(Error::CapExceeded { .. }) => sampled_distribution(dgp, d1, draws, seed),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn families(k: usize) -> Vec<CovarianceStructure> {
        let mut rng = stream_rng(3, 0);
        let loadings = DMatrix::from_fn(k, 2, |_, _| rng.gen_range(0.5..1.0));
        vec![
            CovarianceStructure::Exchangeable { k, rho: 0.4 },
            CovarianceStructure::Ma1 { k, rho: -0.3 },
            CovarianceStructure::Ar1 { k, rho: 0.6 },
            CovarianceStructure::Ar1 { k, rho: -0.5 },
            CovarianceStructure::Ar1 { k, rho: 0.0 },
            CovarianceStructure::Factor { loadings, sigma_e2: 0.5 },
        ]
    }

    #[test]
    fn structured_forms_match_dense() {
        let k = 9;
        let a: Vec<f64> = (0..k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k).map(|i| (i as f64 * 1.3).cos()).collect();
        for s in families(k) {
            let dense = CovarianceStructure::Dense(s.to_dense());
            assert_relative_eq!(s.bilinear(&a, &b), dense.bilinear(&a, &b), epsilon = 1e-12);
            let idx = [0, 2, 3, 7];
            let rhs = [0.3, -1.0, 0.5, 2.0];
            let x = s.solve_block(&idx, &rhs).unwrap();
            let y = dense.solve_block(&idx, &rhs).unwrap();
            for (u, v) in x.iter().zip(&y) {
                assert_relative_eq!(u, v, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ar1_at_zero_is_identity() {
        let m = CovarianceStructure::Ar1 { k: 5, rho: 0.0 }.to_dense();
        assert_eq!(m, DMatrix::identity(5, 5));
    }

    #[test]
    fn exchangeable_closed_form_matches_block_solve() {
        let dgp = make_dgp(DgpFamily::Exchangeable { rho: 0.35 }, 10, 1.0, 4).unwrap();
        let dense = SelectionDgp { var_w: CovarianceStructure::Dense(dgp.var_w.to_dense()), ..dgp.clone() };
        for s in enumerate_designs(10, 4, 1000).unwrap().take(50) {
            let a = resid_components(&dgp, &s).unwrap();
            let b = resid_components(&dense, &s).unwrap();
            assert_relative_eq!(a.cov_unobserved, b.cov_unobserved, epsilon = 1e-14);
            assert_relative_eq!(a.var_unobserved, b.var_unobserved, epsilon = 1e-14);
        }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let all: Vec<Vec<usize>> = enumerate_designs(4, 2, 100).unwrap().map(|d| d.observed()).collect();
        assert_eq!(all, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        for (rank, comb) in all.iter().enumerate() {
            assert_eq!(&unrank_combination(4, 2, rank as u128), comb);
        }
        assert_eq!(binomial(22, 11), 705_432);
        assert_eq!(binomial(22, 3), 1_540);
        assert!(matches!(enumerate_designs(40, 20, DEFAULT_ENUMERATION_CAP), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn rx_limit_values() {
        assert_relative_eq!(rx_limit(1.0, 3.7).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(rx_limit(2.0, 0.0).unwrap(), 2.0, epsilon = 1e-15);
        assert!(rx_limit(0.0, 1.0).is_err());
    }

    #[test]
    fn assumption_violations_are_named() {
        match make_dgp(DgpFamily::Ma1 { rho: 0.6 }, 10, 1.0, 1) {
            Err(Error::AssumptionViolated { assumption, .. }) => assert_eq!(assumption, "ma1.rho"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(make_dgp(DgpFamily::Exchangeable { rho: 1.0 }, 10, 1.0, 1).is_err());
        assert!(make_dgp(DgpFamily::Ar1 { rho: -1.0 }, 10, 1.0, 1).is_err());
    }

    #[test]
    fn summary_of_single_value() {
        let s = summarize(&[SelectionValue::Finite(0.7)], SamplingMode::Exact).unwrap();
        assert_eq!((s.min, s.p25, s.median, s.p75, s.max, s.mean, s.sd), (0.7, 0.7, 0.7, 0.7, 0.7, 0.7, 0.0));
        assert!(matches!(summarize(&[SelectionValue::Degenerate], SamplingMode::Exact), Err(Error::AllDegenerate)));
    }

    proptest! {
        #[test]
        fn unrank_inverts_enumeration(k in 2usize..12, frac in 0.0f64..1.0, pick in 0.0f64..1.0) {
            let d1 = ((k as f64 * frac) as usize).min(k);
            let total = binomial(k, d1);
            let rank = ((total as f64 * pick) as u128).min(total - 1);
            let direct = enumerate_designs(k, d1, u128::MAX).unwrap().nth(rank as usize).unwrap();
            prop_assert_eq!(direct.observed(), unrank_combination(k, d1, rank));
        }

        #[test]
        fn sampled_designs_have_right_size(k in 1usize..30, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let d1 = (k as f64 * frac).round() as usize;
            for s in sample_designs(k, d1, 5, seed) {
                prop_assert_eq!(s.d1(), d1);
            }
        }

        #[test]
        fn summary_is_ordered(values in prop::collection::vec(-10.0f64..10.0, 1..50)) {
            let vals: Vec<_> = values.iter().map(|&v| SelectionValue::Finite(v)).collect();
            let s = summarize(&vals, SamplingMode::MonteCarlo).unwrap();
            prop_assert!(s.min <= s.p25 && s.p25 <= s.median && s.median <= s.p75 && s.p75 <= s.max);
        }
    }
}
