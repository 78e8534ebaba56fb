//! ICC(3,k): two-way mixed, consistency, average of k raters, with the
//! standard F-based confidence interval.

use serde::{Deserialize, Serialize};

use super::{f_quantile, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub icc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub n_subjects: usize,
    pub n_raters: usize,
}

/// `matrix` is n subjects × k raters with no missing cells (callers drop
/// incomplete rows beforehand). Consistency ICC ignores rater offsets, so
/// adding a constant per rater leaves the value unchanged.
pub fn icc3k(matrix: &[Vec<f64>], alpha: f64) -> Result<IccResult, StatsError> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha);
    }
    let n = matrix.len();
    if n < 2 {
        return Err(StatsError::TooFewSubjects);
    }
    let k = matrix[0].len();
    if k < 2 {
        return Err(StatsError::TooFewRaters);
    }
    if matrix.iter().any(|row| row.len() != k) {
        return Err(StatsError::ShapeMismatch("ragged rating matrix".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::ShapeMismatch("non-finite rating".into()));
    }

    let nf = n as f64;
    let kf = k as f64;
    let grand: f64 = matrix.iter().flatten().sum::<f64>() / (nf * kf);
    let ss_total: f64 = matrix.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if ss_total <= f64::EPSILON * (nf * kf) {
        return Err(StatsError::ZeroVariance);
    }
    let row_means: Vec<f64> = matrix.iter().map(|row| row.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| matrix.iter().map(|row| row[j]).sum::<f64>() / nf)
        .collect();
    let ss_rows: f64 = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_cols: f64 = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);

    let df_rows = nf - 1.0;
    let df_err = (nf - 1.0) * (kf - 1.0);
    let ms_rows = ss_rows / df_rows;
    let ms_err = ss_err / df_err;
    if ms_rows <= 0.0 {
        return Err(StatsError::ZeroVariance);
    }

    // Perfect consistency: the interval collapses.
    if ms_err <= ms_rows * 1e-12 {
        return Ok(IccResult {
            icc: 1.0,
            ci_low: 1.0,
            ci_high: 1.0,
            alpha,
            n_subjects: n,
            n_raters: k,
        });
    }

    let icc = (ms_rows - ms_err) / ms_rows;
    let f_obs = ms_rows / ms_err;
    let upper_q = 1.0 - alpha / 2.0;
    let f_low = f_obs / f_quantile(upper_q, df_rows, df_err);
    let f_high = f_obs * f_quantile(upper_q, df_err, df_rows);
    Ok(IccResult {
        icc,
        ci_low: 1.0 - 1.0 / f_low,
        ci_high: 1.0 - 1.0 / f_high,
        alpha,
        n_subjects: n,
        n_raters: k,
    })
}
