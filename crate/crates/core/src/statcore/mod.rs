//! Random streams, elementary distributions and logistic regression.
//!
//! Everything downstream (propensity models, censoring models, the data
//! generator) draws its randomness from an [`RngStream`] and its binary
//! regressions from [`fit_logistic`].

mod logistic;
mod rng;

pub use logistic::{fit_logistic, LogisticFit, IRLS_MAX_ITER, IRLS_TOLERANCE, SEPARATION_BOUND};
pub use rng::{substream_seed, RngStream};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatError {
    #[error("standard deviation must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("design has {rows} rows but {what} has {len} entries")]
    LengthMismatch {
        what: &'static str,
        rows: usize,
        len: usize,
    },
    #[error("need at least as many observations as coefficients ({rows} < {cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("case weights must be finite and nonnegative")]
    InvalidWeight,
    #[error("design matrix contains a non-finite value")]
    NonFiniteDesign,
    #[error("complete separation: {0}")]
    Separation(String),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("IRLS did not converge after {0} iterations")]
    NoConvergence(usize),
}

/// Logistic function `1 / (1 + e^{-x})`.
///
/// Evaluated on the branch that never exponentiates a positive number, so it
/// neither overflows nor loses the tail for large `|x|`.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`].
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_half_at_zero() {
        assert_eq!(expit(0.0), 0.5);
    }

    #[test]
    fn expit_matches_direct_evaluation() {
        // 1 / (1 + e^{1.1392}) evaluated to 10 digits.
        let direct = 1.0 / (1.0 + 1.1392f64.exp());
        assert!((expit(-1.1392) - 0.2425).abs() < 1e-4);
        assert!((expit(-1.1392) - direct).abs() < 1e-15);
    }

    #[test]
    fn expit_saturates_without_overflow() {
        let hi = expit(700.0);
        assert!((1.0 - hi).abs() < 1e-300);
        let lo = expit(-700.0);
        assert!(lo > 0.0 && lo < 1e-300);
        assert!(expit(-745.0).is_finite());
    }

    #[test]
    fn logit_inverts_expit() {
        for &x in &[-5.0, -0.3, 0.0, 1.7, 9.0] {
            assert!((logit(expit(x)) - x).abs() < 1e-10);
        }
    }
}
