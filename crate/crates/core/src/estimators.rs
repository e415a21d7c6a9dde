//! Error estimators over target softmax outputs.
//!
//! COT is the only one that needs an optimal transport solve; the others are
//! closed-form statistics of the softmax rows.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::solve_emd;
use crate::types::{argmax, one_hot_measure, synthesize_labels, LabelDistribution, SoftmaxMatrix};

/// Default COT batch size.
pub const DEFAULT_BATCH_SIZE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Cot,
    Ac,
    Entropy,
    AtcMc,
    AtcNe,
    Gde,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Cot,
        Method::Ac,
        Method::Entropy,
        Method::AtcMc,
        Method::AtcNe,
        Method::Gde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cot => "COT",
            Method::Ac => "AC",
            Method::Entropy => "ENTROPY",
            Method::AtcMc => "ATC_MC",
            Method::AtcNe => "ATC_NE",
            Method::Gde => "GDE",
        }
    }

    /// Whether the method's output is itself an error rate.
    pub fn is_direct(self) -> bool {
        self != Method::Entropy
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == upper)
            .ok_or_else(|| Error::validation(format!("unknown method {s:?}")))
    }
}

/// Score function thresholded by ATC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Score {
    /// Maximum class probability.
    #[default]
    Mc,
    /// Negative entropy normalized by `ln K`.
    Ne,
}

impl Score {
    pub fn method(self) -> Method {
        match self {
            Score::Mc => Method::AtcMc,
            Score::Ne => Method::AtcNe,
        }
    }

    pub fn eval(self, row: &[f64]) -> f64 {
        match self {
            Score::Mc => row.iter().copied().fold(0.0, f64::max),
            Score::Ne => -normalized_entropy(row),
        }
    }
}

impl FromStr for Score {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MC" => Ok(Score::Mc),
            "NE" => Ok(Score::Ne),
            _ => Err(Error::validation(format!("unknown ATC score {s:?}, expected MC or NE"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchValue {
    pub size: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub num_target_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_source_labels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature_used: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// ATC threshold; infinite sentinels serialize as null.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub method: Method,
    pub estimate: f64,
    pub direct: bool,
    #[serde(default)]
    pub batches: Vec<BatchValue>,
    pub meta: ReportMeta,
}

fn schema_version() -> u32 {
    1
}

impl EstimateReport {
    fn new(method: Method, estimate: f64, num_target_samples: usize) -> Self {
        Self {
            schema_version: 1,
            method,
            estimate: estimate.clamp(0.0, 1.0),
            direct: method.is_direct(),
            batches: Vec::new(),
            meta: ReportMeta {
                num_target_samples,
                ..ReportMeta::default()
            },
        }
    }

    /// Records the temperature applied to the target logits.
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.meta.temperature_used = Some(temperature);
        self
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::validation("source labels are empty"));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
        return Err(Error::validation(format!(
            "source label {y} at position {i} is outside [0, {num_classes})"
        )));
    }
    Ok(())
}

/// Half the EMD between the rows of `probs` and the one-hot `labels`.
fn half_emd(probs: &SoftmaxMatrix, labels: &[usize]) -> Result<f64> {
    let target = probs.to_measure();
    let source = one_hot_measure(labels, probs.num_classes())?;
    let plan = solve_emd(&target, &source)?;
    Ok((0.5 * plan.total_cost).clamp(0.0, 1.0))
}

/// COT estimate over the whole target against all source labels.
pub fn cot_estimate(target: &SoftmaxMatrix, labels: &[usize]) -> Result<EstimateReport> {
    check_labels(labels, target.num_classes())?;
    let value = half_emd(target, labels)?;
    let mut report = EstimateReport::new(Method::Cot, value, target.len());
    report.meta.num_source_labels = Some(labels.len());
    Ok(report)
}

/// Batched COT with labels synthesized from the empirical label distribution.
pub fn cot_estimate_batched(
    target: &SoftmaxMatrix,
    labels: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<EstimateReport> {
    check_labels(labels, target.num_classes())?;
    let dist = LabelDistribution::empirical(labels, target.num_classes())?;
    let mut report = cot_estimate_batched_with_distribution(target, &dist, batch_size, seed)?;
    report.meta.num_source_labels = Some(labels.len());
    Ok(report)
}

/// Batched COT against a known label distribution.
///
/// Target rows are shuffled with a ChaCha8 permutation seeded by `seed`
/// (skipped when a single batch covers the target) and cut into consecutive
/// batches of `batch_size`. A trailing batch smaller than `K` is dropped.
/// Each batch is compared with labels synthesized at its own size, and the
/// estimate is the size-weighted mean of the batch values.
pub fn cot_estimate_batched_with_distribution(
    target: &SoftmaxMatrix,
    dist: &LabelDistribution,
    batch_size: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let k = target.num_classes();
    if dist.num_classes() != k {
        return Err(Error::validation(format!(
            "label distribution has {} classes, target has {k}",
            dist.num_classes()
        )));
    }
    if batch_size < k {
        return Err(Error::validation(format!(
            "batch size {batch_size} is smaller than the number of classes {k}"
        )));
    }
    let n = target.len();
    let effective = batch_size.min(n);
    if effective < 10 * k {
        log::warn!(
            "COT batches of {effective} rows average fewer than 10 samples per class (K = {k})"
        );
    }

    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<&[usize]> = order.chunks(batch_size).filter(|c| c.len() >= k).collect();
    if chunks.is_empty() {
        return Err(Error::validation(format!(
            "no batch of at least {k} rows can be formed from {n} target rows"
        )));
    }

    let batches = chunks
        .par_iter()
        .map(|idx| {
            let rows = target.select(idx);
            let labels = synthesize_labels(dist, idx.len())?;
            Ok(BatchValue {
                size: idx.len(),
                value: half_emd(&rows, &labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let used: usize = batches.iter().map(|b| b.size).sum();
    let weighted: f64 = batches.iter().map(|b| b.size as f64 * b.value).sum();
    let mut report = EstimateReport::new(Method::Cot, weighted / used as f64, n);
    report.batches = batches;
    report.meta.batch_size = Some(batch_size);
    report.meta.seed = Some(seed);
    Ok(report)
}

/// Averaged confidence: one minus the mean maximum probability.
pub fn ac_estimate(target: &SoftmaxMatrix) -> EstimateReport {
    let mean_conf = mean(target.confidences().into_iter());
    EstimateReport::new(Method::Ac, 1.0 - mean_conf, target.len())
}

/// Shannon entropy of `row` divided by `ln K`; zero when `K = 1`.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / (row.len() as f64).ln()
}

/// Mean normalized entropy. A correlate of error, not an error estimate.
pub fn entropy_score(target: &SoftmaxMatrix) -> EstimateReport {
    let value = mean(target.rows().map(normalized_entropy));
    EstimateReport::new(Method::Entropy, value, target.len())
}

/// Threshold `t` such that the validation rows scoring strictly below `t`
/// number exactly the misclassified rows (when scores are distinct).
///
/// Returns `-inf` for a perfectly accurate validation set and `+inf` when
/// every row is misclassified.
pub fn atc_fit_threshold(val: &SoftmaxMatrix, labels: &[usize], score: Score) -> Result<f64> {
    check_labels(labels, val.num_classes())?;
    if labels.len() != val.len() {
        return Err(Error::validation(format!(
            "{} validation rows but {} labels",
            val.len(),
            labels.len()
        )));
    }
    let wrong = val.rows().zip(labels).filter(|(r, &y)| argmax(r) != y).count();
    if wrong == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    if wrong == labels.len() {
        return Ok(f64::INFINITY);
    }
    let mut scores: Vec<f64> = val.rows().map(|r| score.eval(r)).collect();
    scores.sort_by(f64::total_cmp);
    Ok(scores[wrong])
}

/// Fraction of target rows whose score falls strictly below `threshold`.
pub fn atc_estimate(target: &SoftmaxMatrix, threshold: f64, score: Score) -> EstimateReport {
    let below = target.rows().filter(|r| score.eval(r) < threshold).count();
    let mut report = EstimateReport::new(score.method(), below as f64 / target.len() as f64, target.len());
    report.meta.threshold = Some(threshold);
    report
}

/// Argmax disagreement rate between two models on the same target rows.
pub fn gde_estimate(a: &SoftmaxMatrix, b: &SoftmaxMatrix) -> Result<EstimateReport> {
    if a.len() != b.len() || a.num_classes() != b.num_classes() {
        return Err(Error::validation(format!(
            "GDE needs matching shapes, got {}x{} and {}x{}",
            a.len(),
            a.num_classes(),
            b.len(),
            b.num_classes()
        )));
    }
    let disagree = a.rows().zip(b.rows()).filter(|(x, y)| argmax(x) != argmax(y)).count();
    Ok(EstimateReport::new(Method::Gde, disagree as f64 / a.len() as f64, a.len()))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}
