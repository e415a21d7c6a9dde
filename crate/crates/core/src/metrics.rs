//! Agreement between predicted and true errors across a collection of targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub target_id: String,
    pub predicted: f64,
    pub true_error: f64,
}

impl EvaluationRecord {
    pub fn new(target_id: impl Into<String>, predicted: f64, true_error: f64) -> Self {
        Self {
            target_id: target_id.into(),
            predicted,
            true_error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub method: Method,
    pub r_squared: f64,
    pub spearman_rho: f64,
    /// Percentage points; absent for methods that are not error estimates.
    pub mae: Option<f64>,
    pub n_points: usize,
}

fn schema_version() -> u32 {
    1
}

impl EvaluationReport {
    /// Computes all metrics for `method` over `records`.
    pub fn compute(method: Method, records: &[EvaluationRecord]) -> Result<Self> {
        Ok(Self {
            schema_version: 1,
            method,
            r_squared: r_squared(records)?,
            spearman_rho: spearman_rho(records)?,
            mae: if method.is_direct() {
                Some(mean_absolute_error(records)?)
            } else {
                None
            },
            n_points: records.len(),
        })
    }
}

fn validate(records: &[EvaluationRecord], min: usize) -> Result<()> {
    if records.len() < min {
        return Err(Error::UndefinedFit(format!(
            "need at least {min} points, got {}",
            records.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.predicted.is_finite() || !r.true_error.is_finite()) {
        return Err(Error::validation(format!("target {} has a non-finite value", r.target_id)));
    }
    Ok(())
}

/// Pearson correlation with centered sums; `None` if either side is constant.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        // horizontal target: the OLS line explains nothing
        return Some(0.0);
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// R^2 of the least-squares line of true error on predicted value.
pub fn r_squared(records: &[EvaluationRecord]) -> Result<f64> {
    validate(records, 2)?;
    let x: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let y: Vec<f64> = records.iter().map(|r| r.true_error).collect();
    let r = pearson(&x, &y)
        .ok_or_else(|| Error::UndefinedFit("predicted values have zero variance".into()))?;
    Ok(r * r)
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(records: &[EvaluationRecord]) -> Result<f64> {
    validate(records, 2)?;
    let px = average_ranks(&records.iter().map(|r| r.predicted).collect::<Vec<_>>());
    let py = average_ranks(&records.iter().map(|r| r.true_error).collect::<Vec<_>>());
    match pearson(&px, &py) {
        Some(rho) if py.iter().any(|&v| v != py[0]) => Ok(rho),
        _ => Err(Error::UndefinedFit("ranks have zero variance".into())),
    }
}

/// Mean absolute error in percentage points.
pub fn mean_absolute_error(records: &[EvaluationRecord]) -> Result<f64> {
    validate(records, 1)?;
    let total: f64 = records.iter().map(|r| (r.predicted - r.true_error).abs()).sum();
    Ok(100.0 * total / records.len() as f64)
}
