//! Fleiss' kappa for a fixed number of raters over categorical items.

use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
    pub n_items: usize,
    pub n_raters: usize,
    pub n_categories: usize,
}

/// `counts` is n items × m categories; every row must sum to `raters`.
/// Standard formulation: per-item agreement
/// P_i = (Σ_j n_ij² − k) / (k(k−1)), P̄ its mean, and expected agreement
/// P̄e = Σ_j p_j² over the marginal category proportions.
pub fn fleiss_kappa(counts: &[Vec<usize>], raters: usize) -> Result<KappaResult, StatsError> {
    if raters < 2 {
        return Err(StatsError::TooFewRaters);
    }
    let n = counts.len();
    if n == 0 {
        return Err(StatsError::ShapeMismatch("no items".into()));
    }
    let m = counts[0].len();
    if m < 2 {
        return Err(StatsError::ShapeMismatch("need at least 2 categories".into()));
    }
    for (item, row) in counts.iter().enumerate() {
        if row.len() != m {
            return Err(StatsError::ShapeMismatch(format!("row {item} has wrong width")));
        }
        if row.iter().sum::<usize>() != raters {
            return Err(StatsError::RowSumMismatch(item));
        }
    }

    let k = raters as f64;
    let observed_agreement = counts
        .iter()
        .map(|row| {
            let squares: f64 = row.iter().map(|&c| (c * c) as f64).sum();
            (squares - k) / (k * (k - 1.0))
        })
        .sum::<f64>()
        / n as f64;

    let total = (n * raters) as f64;
    let expected_agreement = (0..m)
        .map(|j| {
            let column: usize = counts.iter().map(|row| row[j]).sum();
            (column as f64 / total).powi(2)
        })
        .sum::<f64>();

    if (1.0 - expected_agreement).abs() < 1e-12 {
        return Err(StatsError::PerfectExpectedAgreement);
    }
    Ok(KappaResult {
        kappa: (observed_agreement - expected_agreement) / (1.0 - expected_agreement),
        observed_agreement,
        expected_agreement,
        n_items: n,
        n_raters: raters,
        n_categories: m,
    })
}
