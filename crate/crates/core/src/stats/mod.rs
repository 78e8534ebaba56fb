//! Statistical battery: random-intercept linear mixed-effects model via
//! profiled REML, Friedman test, ICC(3,k) with confidence interval, and
//! Fleiss' kappa.
//!
//! All routines are pure and reentrant. Each one is cross-checked in tests
//! against an independent naive implementation of its definition.

mod friedman;
mod icc;
mod kappa;
mod lmm;

pub use friedman::{friedman_test, FriedmanResult};
pub use icc::{icc3k, IccResult};
pub use kappa::{fleiss_kappa, KappaResult};
pub use lmm::{dense_gls_beta, fit_lmm_random_intercept, reml_loglik_at, Coefficient, LmmData, LmmFit};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient after dummy coding")]
    RankDeficientDesign,
    #[error("optimizer did not converge within the iteration cap")]
    NotConverged,
    #[error("invalid input shape: {0}")]
    ShapeMismatch(String),
    #[error("friedman test needs at least 2 blocks and 2 treatments")]
    DegenerateBlocks,
    #[error("icc needs at least 2 subjects")]
    TooFewSubjects,
    #[error("at least 2 raters are required")]
    TooFewRaters,
    #[error("all entries are identical; the statistic is undefined")]
    ZeroVariance,
    #[error("row {0} does not sum to the rater count")]
    RowSumMismatch(usize),
    #[error("expected agreement is 1; kappa is undefined")]
    PerfectExpectedAgreement,
    #[error("alpha must lie strictly between 0 and 1")]
    InvalidAlpha,
}

/// Two-sided normal tail probability for a Wald z statistic.
pub(crate) fn wald_p_value(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(z.abs()))
}

/// Upper-tail chi-square probability.
pub(crate) fn chi_square_sf(x: f64, df: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let chi = ChiSquared::new(df as f64).expect("positive df");
    (1.0 - chi.cdf(x)).clamp(0.0, 1.0)
}

/// F-distribution quantile at probability `p`.
pub(crate) fn f_quantile(p: f64, df1: f64, df2: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, FisherSnedecor};
    let f = FisherSnedecor::new(df1, df2).expect("positive dfs");
    f.inverse_cdf(p)
}
