//! Friedman rank test for k related treatments over n blocks, with mean
//! ranks for ties and the standard tie correction.

use serde::{Deserialize, Serialize};

use super::{chi_square_sf, StatsError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Mean ranks within one block; tied values share the average of the ranks
/// they span.
fn mean_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let k = values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; k];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < k {
        let mut j = i;
        while j + 1 < k && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let tied = (j - i + 1) as f64;
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &index in &order[i..=j] {
            ranks[index] = rank;
        }
        tie_term += tied.powi(3) - tied;
        i = j + 1;
    }
    (ranks, tie_term)
}

/// `matrix` is n blocks × k treatments. Returns Q with k−1 degrees of
/// freedom and the chi-square upper-tail p-value. Blocks that are entirely
/// tied everywhere yield Q = 0, p = 1.
pub fn friedman_test(matrix: &[Vec<f64>]) -> Result<FriedmanResult, StatsError> {
    let n = matrix.len();
    if n < 2 {
        return Err(StatsError::DegenerateBlocks);
    }
    let k = matrix[0].len();
    if k < 2 {
        return Err(StatsError::DegenerateBlocks);
    }
    if matrix.iter().any(|row| row.len() != k) {
        return Err(StatsError::ShapeMismatch("ragged block matrix".into()));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::ShapeMismatch("non-finite value in blocks".into()));
    }

    let mut rank_sums = vec![0.0; k];
    let mut tie_total = 0.0;
    for block in matrix {
        let (ranks, tie_term) = mean_ranks(block);
        for (j, rank) in ranks.iter().enumerate() {
            rank_sums[j] += rank;
        }
        tie_total += tie_term;
    }

    let nf = n as f64;
    let kf = k as f64;
    let ss: f64 = rank_sums.iter().map(|r| r * r).sum();
    let base = 12.0 / (nf * kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0);
    let correction = 1.0 - tie_total / (nf * kf * (kf * kf - 1.0));
    let df = k - 1;
    if correction <= 0.0 {
        // Every block fully tied: no evidence of treatment differences.
        return Ok(FriedmanResult {
            statistic: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let statistic = (base / correction).max(0.0);
    Ok(FriedmanResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df),
    })
}
