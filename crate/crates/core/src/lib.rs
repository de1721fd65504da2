//! Sensitivity analysis for omitted variable bias in linear models.
//!
//! The crate computes identified sets and breakdown points for the
//! coefficient on a treatment `X` in a long regression of an outcome `Y` on
//! `X`, observed covariates `W1` and an unobserved covariate `W2`, when the
//! analyst bounds how strongly `W2` may relate to `X` and `Y` relative to
//! `W1`. It also provides covariate-sampling simulations of selection ratios,
//! calibration diagnostics and an independent brute-force checker.
//!
//! Module map:
//! - [`covkernel`]: covariance algebra, partialling out, normalization.
//! - [`ingest`]: covariance models from CSV data or covariance files.
//! - [`identify`]: closed-form identified sets and breakdown points.
//! - [`frontier`]: breakdown frontier, common breakdown point, joint bounds.
//! - [`simsel`]: covariate-sampling distributions of selection ratios.
//! - [`calibrate`]: calibration diagnostics for the sensitivity parameters.
//! - [`oracle`]: brute-force verification of the closed forms.
//! - [`cli`]: the command-line front end.

// Range checks are written as `!(x >= 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod cli;
pub mod covkernel;
pub mod error;
pub mod frontier;
pub mod identify;
pub mod ingest;
pub mod optimize;
pub mod oracle;
pub mod simsel;

pub use covkernel::{normalize, partial_out, partial_r2, CovarianceModel, NormalizedModel, Role};
pub use error::{Error, Result};
pub use identify::{IdentifiedInterval, SensitivityBudget};

use std::cmp::Ordering;

/// A nonnegative quantity that may be infinite.
///
/// Infinite values are carried as an explicit variant so that no floating
/// point infinity ever enters downstream arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Magnitude {
    /// A finite nonnegative value.
    Finite(f64),
    /// Positive infinity.
    Infinite,
}

impl Magnitude {
    /// Whether the value is finite.
    pub fn is_finite(self) -> bool {
        matches!(self, Magnitude::Finite(_))
    }

    /// The finite value, if any.
    pub fn finite(self) -> Option<f64> {
        match self {
            Magnitude::Finite(v) => Some(v),
            Magnitude::Infinite => None,
        }
    }

    /// Lossy conversion for display; `Infinite` becomes `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        self.finite().unwrap_or(f64::INFINITY)
    }

    /// The larger of two magnitudes.
    pub fn max(self, other: Magnitude) -> Magnitude {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl PartialOrd for Magnitude {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Magnitude::Finite(a), Magnitude::Finite(b)) => a.partial_cmp(b),
            (Magnitude::Finite(_), Magnitude::Infinite) => Some(Ordering::Less),
            (Magnitude::Infinite, Magnitude::Finite(_)) => Some(Ordering::Greater),
            (Magnitude::Infinite, Magnitude::Infinite) => Some(Ordering::Equal),
        }
    }
}

/// Deterministic random stream for item `index` of a run seeded with `seed`.
/// Parallel and serial evaluation therefore draw identical numbers.
pub(crate) fn stream_rng(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
