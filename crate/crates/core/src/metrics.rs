//! Inclusion-rate and favorability-bias metrics plus mean/std aggregation.
//!
//! Rates are computed in exact rational arithmetic and converted to f64
//! only at the end, so they match naive counting bit for bit. A bias value
//! is undefined (not zero) whenever the favorable or unfavorable class is
//! empty; undefined values are excluded from aggregation and counted.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use crate::pipeline::{Favorability, InclusionVerdict};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("inclusion rate is undefined for an empty verdict set")]
    EmptyVerdictSet,
}

/// Identifies the (case, role, combo) cell a metric value belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub case_id: String,
    pub role: String,
    pub combo_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionStats {
    pub group: GroupKey,
    pub n_total: usize,
    pub n_included: usize,
    pub rate: f64,
}

fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Fraction of elements whose meaning the summary includes.
pub fn inclusion_rate(
    group: GroupKey,
    verdicts: &[InclusionVerdict],
) -> Result<InclusionStats, MetricsError> {
    if verdicts.is_empty() {
        return Err(MetricsError::EmptyVerdictSet);
    }
    let n_total = verdicts.len();
    let n_included = verdicts.iter().filter(|v| v.included).count();
    let rate = Ratio::new(n_included as i64, n_total as i64);
    Ok(InclusionStats {
        group,
        n_total,
        n_included,
        rate: ratio_to_f64(rate),
    })
}

/// Favorable minus unfavorable inclusion rate. Neutral elements never
/// affect the value; verdicts without a label are excluded upstream and
/// ignored here.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FavorabilityBias {
    pub group: GroupKey,
    pub n_favorable: usize,
    pub n_unfavorable: usize,
    pub n_neutral: usize,
    pub fav_rate: Option<f64>,
    pub unfav_rate: Option<f64>,
    pub bias: Option<f64>,
}

pub fn favorability_bias(
    group: GroupKey,
    verdicts: &[InclusionVerdict],
    labels: &BTreeMap<i64, Favorability>,
) -> FavorabilityBias {
    let mut fav = (0i64, 0i64); // (included, total)
    let mut unfav = (0i64, 0i64);
    let mut n_neutral = 0usize;
    for verdict in verdicts {
        match labels.get(&verdict.element_id) {
            Some(Favorability::Favorable) => {
                fav.1 += 1;
                fav.0 += i64::from(verdict.included);
            }
            Some(Favorability::Unfavorable) => {
                unfav.1 += 1;
                unfav.0 += i64::from(verdict.included);
            }
            Some(Favorability::Neutral) => n_neutral += 1,
            None => {}
        }
    }
    let fav_rate = (fav.1 > 0).then(|| ratio_to_f64(Ratio::new(fav.0, fav.1)));
    let unfav_rate = (unfav.1 > 0).then(|| ratio_to_f64(Ratio::new(unfav.0, unfav.1)));
    // The bias is defined as the difference of the two reported rates, so
    // it is computed on exactly those values.
    let bias = match (fav_rate, unfav_rate) {
        (Some(f), Some(u)) => Some(f - u),
        _ => None,
    };
    FavorabilityBias {
        group,
        n_favorable: fav.1 as usize,
        n_unfavorable: unfav.1 as usize,
        n_neutral,
        fav_rate,
        unfav_rate,
        bias,
    }
}

/// A labeled scalar observation feeding [`aggregate`]. `value: None`
/// represents an undefined metric (excluded, but counted).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueRow {
    pub labels: BTreeMap<String, String>,
    pub value: Option<f64>,
}

/// One mean ± std cell. `std` uses the sample (n-1) convention for n >= 2
/// and is 0 for singleton cells, which stay flagged via `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateCell {
    pub labels: BTreeMap<String, String>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub n_excluded: usize,
}

/// Groups rows by the given label names and reports mean ± sample std per
/// cell, in sorted label order.
pub fn aggregate(rows: &[ValueRow], group_by: &[String]) -> Vec<AggregateCell> {
    type Cell = (Vec<f64>, usize);
    let mut cells: BTreeMap<Vec<(String, String)>, Cell> = BTreeMap::new();
    for row in rows {
        let key: Vec<(String, String)> = group_by
            .iter()
            .map(|label| {
                (
                    label.clone(),
                    row.labels.get(label).cloned().unwrap_or_default(),
                )
            })
            .collect();
        let entry = cells.entry(key).or_default();
        match row.value {
            Some(v) => entry.0.push(v),
            None => entry.1 += 1,
        }
    }
    cells
        .into_iter()
        .filter(|(_, (values, _))| !values.is_empty())
        .map(|(key, (values, n_excluded))| {
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n >= 2 {
                let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                (ss / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregateCell {
                labels: key.into_iter().collect(),
                mean,
                std,
                n,
                n_excluded,
            }
        })
        .collect()
}
