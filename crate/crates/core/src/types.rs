//! Validated containers shared by every other module: raw logits, softmax
//! rows, label distributions and weighted point clouds.

use crate::error::{Error, Result};

/// Absolute tolerance on probability and weight sums.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Label value used for unlabeled rows in the logits CSV format.
pub const UNLABELED: i64 = -1;

/// Rows of raw logit vectors, each with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsDataset {
    num_classes: usize,
    labels: Vec<Option<usize>>,
    logits: Vec<f64>,
}

impl LogitsDataset {
    pub fn new(num_classes: usize, rows: Vec<(Option<usize>, Vec<f64>)>) -> Result<Self> {
        let mut labels = Vec::with_capacity(rows.len());
        let mut logits = Vec::with_capacity(rows.len() * num_classes);
        for (i, (label, row)) in rows.into_iter().enumerate() {
            if row.len() != num_classes {
                return Err(Error::validation(format!(
                    "row {i} has {} logits, expected {num_classes}",
                    row.len()
                )));
            }
            labels.push(label);
            logits.extend(row);
        }
        Self::from_flat(num_classes, labels, logits)
    }

    /// Builds a dataset from a row-major `labels.len() x num_classes` buffer.
    pub fn from_flat(num_classes: usize, labels: Vec<Option<usize>>, logits: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("number of classes must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::validation("dataset has no rows"));
        }
        if logits.len() != labels.len() * num_classes {
            return Err(Error::validation(format!(
                "logits buffer has {} entries, expected {} rows x {num_classes} classes",
                logits.len(),
                labels.len()
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            if let Some(l) = label {
                if *l >= num_classes {
                    return Err(Error::validation(format!(
                        "row {i}: label {l} out of range for {num_classes} classes"
                    )));
                }
            }
        }
        if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "row {}: logit {} is not finite",
                pos / num_classes,
                pos % num_classes
            )));
        }
        Ok(Self {
            num_classes,
            labels,
            logits,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.chunks_exact(self.num_classes)
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    /// All labels, or an error naming the first unlabeled row.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    Error::validation(format!("row {i} (data line {}) is unlabeled", i + 2))
                })
            })
            .collect()
    }

    /// Fraction of labeled rows whose argmax prediction differs from the label.
    pub fn argmax_error(&self) -> Result<f64> {
        let labels = self.require_labels()?;
        let wrong = self
            .rows()
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) != y)
            .count();
        Ok(wrong as f64 / labels.len() as f64)
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(indices.len());
        let mut logits = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::validation(format!("row index {i} out of range")));
            }
            labels.push(self.labels[i]);
            logits.extend_from_slice(self.row(i));
        }
        Self::from_flat(self.num_classes, labels, logits)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `exp(z / T) / sum(exp(z / T))`.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::validation("softmax of an empty vector"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::validation(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("softmax input contains non-finite values"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log(sum(exp(z / T)))` computed with the max shift.
pub(crate) fn log_sum_exp(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| ((z - max) / temperature).exp()).sum();
    max / temperature + sum.ln()
}

/// Divides by `sum` unless it is already 1 up to rounding, so that
/// constructing from already-normalized values leaves them bit-identical.
fn renormalize(values: &mut [f64], sum: f64) {
    if (sum - 1.0).abs() > 1e-14 {
        for v in values {
            *v /= sum;
        }
    }
}

/// Row-major matrix of probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMatrix {
    num_classes: usize,
    data: Vec<f64>,
}

impl SoftmaxMatrix {
    /// Validates each row and renormalizes rows that sum to 1 within tolerance.
    pub fn new(num_classes: usize, mut data: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("number of classes must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(num_classes) {
            return Err(Error::validation(format!(
                "probability buffer of length {} is not a non-empty multiple of {num_classes}",
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact_mut(num_classes).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::validation(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::validation(format!("row {i} sums to {sum}, not 1")));
            }
            renormalize(row, sum);
        }
        Ok(Self { num_classes, data })
    }

    /// Softmax of every row of `data` at temperature `temperature`.
    pub fn from_logits(data: &LogitsDataset, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let k = data.num_classes();
        let mut out = vec![0.0; data.logits().len()];
        for (row, dst) in data.rows().zip(out.chunks_exact_mut(k)) {
            softmax_into(row, temperature, dst);
        }
        Ok(Self {
            num_classes: k,
            data: out,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            num_classes: self.num_classes,
            data,
        }
    }

    /// Uniformly weighted measure with one atom per row.
    pub fn to_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.num_classes, self.data.clone())
            .expect("softmax matrix is non-empty")
    }
}

/// Class prior over `K` classes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "LabelDistributionRepr", into = "LabelDistributionRepr")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LabelDistributionRepr {
    probs: Vec<f64>,
}

impl TryFrom<LabelDistributionRepr> for LabelDistribution {
    type Error = Error;

    fn try_from(r: LabelDistributionRepr) -> Result<Self> {
        LabelDistribution::new(r.probs)
    }
}

impl From<LabelDistribution> for LabelDistributionRepr {
    fn from(d: LabelDistribution) -> Self {
        Self { probs: d.probs }
    }
}

impl LabelDistribution {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("label distribution has no classes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation(
                "label probabilities must be finite and non-negative",
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!(
                "label probabilities sum to {sum}, not 1"
            )));
        }
        renormalize(&mut probs, sum);
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("number of classes must be positive"));
        }
        Ok(Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        })
    }

    /// Normalized unnormalized weights, e.g. a geometric tail `ratio^k`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::validation("label weights must have a positive finite sum"));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    /// Class frequencies of `labels`.
    pub fn empirical(labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("cannot take the distribution of no labels"));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::validation(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            counts[l] += 1;
        }
        let n = labels.len() as f64;
        Ok(Self {
            probs: counts.into_iter().map(|c| c as f64 / n).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Weighted point cloud in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("point dimension must be positive"));
        }
        if weights.is_empty() {
            return Err(Error::validation("measure has no atoms"));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::validation(format!(
                "{} weights but {} coordinates for dimension {dim}",
                weights.len(),
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("measure points must be finite"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::validation("measure weights must be positive and finite"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!("measure weights sum to {sum}, not 1")));
        }
        renormalize(&mut weights, sum);
        let uniform = weights.iter().all(|&w| w == weights[0]);
        Ok(Self {
            dim,
            points,
            weights,
            uniform,
        })
    }

    /// Equal weight `1/n` on each of the `points.len() / dim` atoms.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::validation(
                "uniform measure needs a non-empty multiple of the dimension",
            ));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("measure points must be finite"));
        }
        let n = points.len() / dim;
        Ok(Self {
            dim,
            points,
            weights: vec![1.0 / n as f64; n],
            uniform: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when every atom carries exactly the same weight.
    pub fn is_uniform(&self) -> bool {
        self.uniform
    }
}

/// Uniform measure on the one-hot encodings of `labels`.
pub fn one_hot_measure(labels: &[usize], num_classes: usize) -> Result<EmpiricalMeasure> {
    if labels.is_empty() {
        return Err(Error::validation("no labels given"));
    }
    let mut points = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::validation(format!(
                "label {l} at position {i} out of range for {num_classes} classes"
            )));
        }
        points[i * num_classes + l] = 1.0;
    }
    EmpiricalMeasure::uniform(num_classes, points)
}

/// Class counts for `n` labels by largest-remainder apportionment of `n * probs`.
///
/// Remainder ties go to the lower class index.
pub fn apportion(dist: &LabelDistribution, n: usize) -> Vec<usize> {
    largest_remainder(dist.probs(), n as u64)
        .into_iter()
        .map(|c| c as usize)
        .collect()
}

/// Splits `total` integer units in proportion to `shares` (summing to 1).
pub(crate) fn largest_remainder(shares: &[f64], total: u64) -> Vec<u64> {
    let quotas: Vec<f64> = shares
        .iter()
        .map(|p| {
            let q = p * total as f64;
            // quotas that should be integral but picked up rounding error
            if (q - q.round()).abs() <= 1e-9 * q.abs().max(1.0) {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(assigned);
    // more than one pass only when rounding pushed several quotas down at once
    while missing > 0 {
        for &k in &order {
            if missing == 0 {
                break;
            }
            counts[k] += 1;
            missing -= 1;
        }
    }
    // and the converse: floors can overshoot by rounding up to the next integer
    let mut excess = counts.iter().sum::<u64>().saturating_sub(total);
    for &k in order.iter().rev() {
        while excess > 0 && counts[k] > 0 {
            counts[k] -= 1;
            excess -= 1;
        }
    }
    counts
}

/// `n` labels whose class counts apportion `n * probs`, sorted ascending.
pub fn synthesize_labels(dist: &LabelDistribution, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::validation("cannot synthesize zero labels"));
    }
    Ok(apportion(dist, n)
        .into_iter()
        .enumerate()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c))
        .collect())
}
