//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by model construction, identification and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose by {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64, max_eigenvalue: f64 },
    #[error("conditioner block is numerically singular (condition number {condition:e})")]
    SingularConditionerBlock { condition: f64 },
    #[error("variance of `{label}` after conditioning is degenerate ({variance:e})")]
    DegenerateTargetVariance { label: String, variance: f64 },
    #[error("unknown variable label `{0}`")]
    UnknownLabel(String),
    #[error("role assignment is invalid: {0}")]
    RoleMismatch(String),
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("column `{0}` not found in the header")]
    MissingColumn(String),
    #[error("column `{0}` is constant after dropping incomplete rows")]
    ConstantColumn(String),
    #[error("only {used} complete rows for {variables} variables (need at least {needed})")]
    TooFewRows { used: usize, variables: usize, needed: usize },
    #[error("cannot parse `{value}` at row {row}, column `{column}`")]
    Parse { row: usize, column: String, value: String },
    #[error("I/O error: {0}")]
    Io(String),

    #[error(
        "knife-edge configuration: {0}; the sensitivity formulas require Cov(W1,X) != 0 \
         and Cov(W1,Y) != Cov(W1,X)Cov(X,Y); drop or re-code calibration covariates"
    )]
    KnifeEdgeViolated(String),
    #[error("argument outside its domain: {0}")]
    Domain(String),
    #[error("Cov(W1,Y) and Cov(W1,X) are linearly dependent (normalized Gram determinant {0:e})")]
    LinearDependence(f64),
    #[error("the constraint interval for the control endogeneity bound is empty: [{low}, {high}] ∩ [0, 1)")]
    EmptyConstraint { low: f64, high: f64 },
    #[error("optimizer found no feasible point after {restarts} restarts")]
    SolverFailure { restarts: usize },

    #[error("{count} designs exceed the enumeration cap of {cap}; use sampling instead")]
    CapExceeded { count: u128, cap: u128 },
    #[error("every design was degenerate; no summary available")]
    AllDegenerate,
    #[error("assumption {assumption} violated: {detail}")]
    AssumptionViolated { assumption: &'static str, detail: String },
    #[error("index for calibration group is degenerate: {0}")]
    DegenerateIndex(String),
}

impl Error {
    /// Coarse classification used by the command-line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            MissingColumn(_) | ConstantColumn(_) | TooFewRows { .. } | Parse { .. } | Io(_)
            | NotSymmetric { .. } | RoleMismatch(_) | UnknownLabel(_) | Dimension(_) => ErrorKind::Data,
            _ => ErrorKind::Numeric,
        }
    }
}

/// Broad category of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Problems with the supplied data or labels.
    Data,
    /// Numerical or mathematical failures.
    Numeric,
}

/// Convenience alias.
pub type Result<T> = std::result::Result<T, Error>;
