//! Temperature scaling fitted on labeled source validation logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, log_sum_exp, LogitsDataset, SoftmaxMatrix};

pub const MIN_TEMPERATURE: f64 = 1e-2;
pub const MAX_TEMPERATURE: f64 = 1e2;
/// Golden-section stopping width in `log T`.
pub const LOG_TEMPERATURE_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_ECE_BINS: usize = 15;

fn schema_version() -> u32 {
    1
}

/// Fitted temperature plus before/after diagnostics on the fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub temperature: f64,
    pub num_classes: usize,
    pub nll_before: f64,
    pub nll_after: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    pub accuracy: f64,
    #[serde(default)]
    pub mean_confidence_after: f64,
}

impl CalibrationModel {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.temperature) {
            return Err(Error::validation(format!(
                "temperature {} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]",
                self.temperature
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("calibration has zero classes"));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `softmax(z / T)` at the true labels.
pub fn negative_log_likelihood(data: &LogitsDataset, labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = data
        .rows()
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z, temperature) - z[y] / temperature)
        .sum();
    total / labels.len() as f64
}

/// Minimizes `f` over `[lo, hi]` by golden-section search.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Fits the temperature minimizing validation NLL over `[1e-2, 1e2]`.
pub fn fit_temperature(val: &LogitsDataset) -> Result<CalibrationModel> {
    let labels = val.require_labels()?;
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::validation(
            "validation set contains a single class; temperature is not identifiable",
        ));
    }

    let nll = |log_t: f64| negative_log_likelihood(val, &labels, log_t.exp());
    let log_t = golden_section(
        nll,
        MIN_TEMPERATURE.ln(),
        MAX_TEMPERATURE.ln(),
        LOG_TEMPERATURE_TOLERANCE,
    );
    let nll_before = negative_log_likelihood(val, &labels, 1.0);
    let mut temperature = log_t.exp().clamp(MIN_TEMPERATURE, MAX_TEMPERATURE);
    let mut nll_after = negative_log_likelihood(val, &labels, temperature);
    if nll_after > nll_before {
        temperature = 1.0;
        nll_after = nll_before;
    }

    let before = SoftmaxMatrix::from_logits(val, 1.0)?;
    let after = SoftmaxMatrix::from_logits(val, temperature)?;
    let correct = val
        .rows()
        .zip(&labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    let confidences = after.confidences();

    Ok(CalibrationModel {
        schema_version: schema_version(),
        temperature,
        num_classes: val.num_classes(),
        nll_before,
        nll_after,
        ece_before: expected_calibration_error(&before, &labels, DEFAULT_ECE_BINS)?,
        ece_after: expected_calibration_error(&after, &labels, DEFAULT_ECE_BINS)?,
        accuracy: correct as f64 / labels.len() as f64,
        mean_confidence_after: confidences.iter().sum::<f64>() / confidences.len() as f64,
    })
}

/// Equal-width binned ECE over max-confidence. Bin `b` holds confidences in
/// `(b / B, (b + 1) / B]`.
pub fn expected_calibration_error(
    probs: &SoftmaxMatrix,
    labels: &[usize],
    num_bins: usize,
) -> Result<f64> {
    if probs.is_empty() || labels.is_empty() {
        return Err(Error::validation("ECE of an empty set"));
    }
    if labels.len() != probs.len() {
        return Err(Error::validation(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.len()
        )));
    }
    if num_bins == 0 {
        return Err(Error::validation("ECE needs at least one bin"));
    }
    let k = probs.num_classes();
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
    }

    let mut count = vec![0usize; num_bins];
    let mut correct = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    for (row, &y) in probs.rows().zip(labels) {
        let pred = argmax(row);
        let conf = row[pred];
        let bin = ((conf * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        count[bin] += 1;
        conf_sum[bin] += conf;
        if pred == y {
            correct[bin] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..num_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let size = count[b] as f64;
            (size / n) * (correct[b] as f64 / size - conf_sum[b] / size).abs()
        })
        .sum())
}

/// `softmax(z / T)` for every row using the fitted temperature.
pub fn apply_temperature(data: &LogitsDataset, model: &CalibrationModel) -> Result<SoftmaxMatrix> {
    if data.num_classes() != model.num_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes, calibration was fitted on {}",
            data.num_classes(),
            model.num_classes
        )));
    }
    SoftmaxMatrix::from_logits(data, model.temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rows `z = log p` with labels drawn from `p`, so `T = 1` is the
    /// population NLL minimizer.
    fn calibrated_logits(n: usize, k: usize, seed: u64) -> LogitsDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    y = i;
                    break;
                }
            }
            rows.push((Some(y), p.iter().map(|v| v.ln()).collect()));
        }
        LogitsDataset::new(k, rows).unwrap()
    }

    fn scaled(data: &LogitsDataset, c: f64) -> LogitsDataset {
        LogitsDataset::from_flat(
            data.num_classes(),
            data.labels().to_vec(),
            data.logits().iter().map(|v| v * c).collect(),
        )
        .unwrap()
    }

    #[test]
    fn calibrated_logits_fit_unit_temperature() {
        let data = calibrated_logits(40_000, 4, 7);
        let labels = data.require_labels().unwrap();
        let model = fit_temperature(&data).unwrap();

        // grid search oracle over [0.5, 2] in steps of 1e-3
        let grid_best = (0..=1500)
            .map(|i| 0.5 + i as f64 * 1e-3)
            .min_by(|a, b| {
                negative_log_likelihood(&data, &labels, *a)
                    .total_cmp(&negative_log_likelihood(&data, &labels, *b))
            })
            .unwrap();
        assert!((model.temperature - grid_best).abs() < 2e-3, "{} vs {grid_best}", model.temperature);
        assert!((model.temperature - 1.0).abs() < 1e-2, "T = {}", model.temperature);
    }

    #[test]
    fn temperature_scales_with_logits() {
        let data = calibrated_logits(3000, 5, 11);
        let base = fit_temperature(&data).unwrap().temperature;
        for c in [0.5, 2.0] {
            let t = fit_temperature(&scaled(&data, c)).unwrap().temperature;
            assert!(((t - c * base) / (c * base)).abs() < 1e-3, "c={c}: {t} vs {}", c * base);
        }
    }

    #[test]
    fn fitting_never_increases_nll() {
        let data = scaled(&calibrated_logits(2000, 3, 3), 4.0);
        let model = fit_temperature(&data).unwrap();
        assert!(model.nll_after <= model.nll_before + 1e-12);
        assert!(model.temperature > 1.0);
        model.validate().unwrap();
    }

    #[test]
    fn fit_is_deterministic() {
        let data = calibrated_logits(500, 3, 5);
        let a = fit_temperature(&data).unwrap();
        let b = fit_temperature(&data).unwrap();
        assert_eq!(a.temperature.to_bits(), b.temperature.to_bits());
    }

    #[test]
    fn fit_rejects_unlabeled_and_single_class() {
        let unlabeled = LogitsDataset::new(2, vec![(Some(0), vec![1.0, 0.0]), (None, vec![0.0, 1.0])]).unwrap();
        assert!(matches!(fit_temperature(&unlabeled), Err(Error::Validation(_))));
        let single = LogitsDataset::new(2, vec![(Some(1), vec![1.0, 0.0]), (Some(1), vec![0.0, 1.0])]).unwrap();
        assert!(matches!(fit_temperature(&single), Err(Error::Validation(_))));
    }

    #[test]
    fn ece_extremes() {
        let one_hot = SoftmaxMatrix::new(3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(expected_calibration_error(&one_hot, &[0, 2], 15).unwrap(), 0.0);
        assert_eq!(expected_calibration_error(&one_hot, &[1, 0], 15).unwrap(), 1.0);
        assert!(expected_calibration_error(&one_hot, &[0], 15).is_err());
    }

    #[test]
    fn ece_mixed_case_matches_hand_computation() {
        // per-bin |acc - conf| by hand:
        // .38 .45 .49 | {.66,.64}: 2 x .15 | .28 .85 .09 | {.95,.99}: 2 x .03
        let conf = [0.95, 0.91, 0.85, 0.72, 0.66, 0.64, 0.51, 0.45, 0.99, 0.38];
        let ok = [true, true, false, true, false, true, true, false, true, false];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (c, o) in conf.iter().zip(ok) {
            data.extend([*c, (1.0 - c) / 2.0, (1.0 - c) / 2.0]);
            labels.push(if o { 0 } else { 1 });
        }
        let probs = SoftmaxMatrix::new(3, data).unwrap();
        let ece = expected_calibration_error(&probs, &labels, 15).unwrap();
        assert_abs_diff_eq!(ece, 0.29, epsilon = 1e-12);
    }

    #[test]
    fn apply_temperature_limits() {
        let data = LogitsDataset::new(3, vec![(None, vec![1.0, 2.0, 3.0]), (None, vec![-1.0, 0.5, 1.0])]).unwrap();
        let mut model = CalibrationModel {
            schema_version: 1,
            temperature: 1.0,
            num_classes: 3,
            nll_before: 0.0,
            nll_after: 0.0,
            ece_before: 0.0,
            ece_after: 0.0,
            accuracy: 0.0,
            mean_confidence_after: 0.0,
        };
        let plain = SoftmaxMatrix::from_logits(&data, 1.0).unwrap();
        assert_eq!(apply_temperature(&data, &model).unwrap(), plain);

        model.temperature = 2.0;
        let p = apply_temperature(&data, &model).unwrap();
        let expected = [
            0.186_323_723_225_847_577_023_800_7,
            0.307_195_885_718_498_397_073_157_1,
            0.506_480_391_055_654_025_903_042_1,
        ];
        for (a, b) in p.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        model.temperature = 1e2;
        let bounded = LogitsDataset::new(3, vec![(None, vec![-1.0, 0.3, 1.0])]).unwrap();
        let p = apply_temperature(&bounded, &model).unwrap();
        assert!(p.row(0).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-2));

        model.num_classes = 4;
        assert!(apply_temperature(&data, &model).is_err());
    }

    proptest! {
        #[test]
        fn temperature_preserves_argmax_and_lowers_confidence(
            logits in prop::collection::vec(-20.0f64..20.0, 2..8),
            t1 in 0.05f64..10.0,
            factor in 1.01f64..5.0,
        ) {
            let data = LogitsDataset::new(logits.len(), vec![(None, logits.clone())]).unwrap();
            let p1 = SoftmaxMatrix::from_logits(&data, t1).unwrap();
            let p2 = SoftmaxMatrix::from_logits(&data, t1 * factor).unwrap();
            prop_assert_eq!(argmax(p1.row(0)), argmax(&logits));
            prop_assert_eq!(argmax(p2.row(0)), argmax(&logits));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let unique = logits.iter().filter(|&&v| v == max).count() == 1;
            let spread = logits.iter().any(|&v| v != max);
            if unique && spread && p1.confidences()[0] < 1.0 {
                prop_assert!(p2.confidences()[0] < p1.confidences()[0]);
            }
        }
    }
}
