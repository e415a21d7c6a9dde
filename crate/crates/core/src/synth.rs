//! Synthetic classifier outputs with known error and controllable confidence.
//!
//! Each row is drawn from a ChaCha8 stream seeded with `seed_from_u64`, in this
//! order:
//!
//! 1. one `f64` uniform in [0, 1) picks the true label by inverse CDF of the
//!    label distribution;
//! 2. one `f64` uniform decides whether the row is correct (`u < accuracy`);
//! 3. for incorrect rows only, one `random_range(0..K-1)` picks the intended
//!    class among the other `K - 1` classes (values at or above the label are
//!    shifted up by one);
//! 4. `K` standard normal draws (`rand_distr::StandardNormal`) form the noise.
//!
//! Logits are `(margin * [k == intended] + noise * g_k) / extra_temperature`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelDistribution, LogitsDataset};

/// Added per target index to derive sweep seeds from the base seed.
pub const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_samples: usize,
    pub label_dist: LabelDistribution,
    pub accuracy: f64,
    pub logit_margin: f64,
    pub logit_noise: f64,
    #[serde(default = "one")]
    pub extra_temperature: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::validation("synthetic data needs at least 2 classes"));
        }
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be positive"));
        }
        if self.label_dist.num_classes() != k {
            return Err(Error::validation(format!(
                "label_dist has {} classes, expected {k}",
                self.label_dist.num_classes()
            )));
        }
        if !(self.accuracy > 0.0 && self.accuracy <= 1.0) {
            return Err(Error::validation(format!("accuracy {} outside (0, 1]", self.accuracy)));
        }
        for (name, v) in [("logit_margin", self.logit_margin), ("logit_noise", self.logit_noise)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.extra_temperature.is_finite() && self.extra_temperature >= 1.0) {
            return Err(Error::validation(format!(
                "extra_temperature must be at least 1, got {}",
                self.extra_temperature
            )));
        }
        Ok(())
    }
}

/// Draws a labeled logits dataset.
pub fn generate(config: &SynthConfig) -> Result<LogitsDataset> {
    config.validate()?;
    let k = config.num_classes;
    let mut cdf: Vec<f64> = config
        .label_dist
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    // guard against the total falling just short of 1
    cdf[k - 1] = f64::INFINITY;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels = Vec::with_capacity(config.n_samples);
    let mut logits = Vec::with_capacity(config.n_samples * k);
    for _ in 0..config.n_samples {
        let u: f64 = rng.random();
        let y = cdf.iter().position(|&c| u < c).expect("cdf ends at infinity");
        let intended = if rng.random::<f64>() < config.accuracy {
            y
        } else {
            let other = rng.random_range(0..k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        };
        for c in 0..k {
            let g: f64 = rng.sample(StandardNormal);
            let mean = if c == intended { config.logit_margin } else { 0.0 };
            logits.push((mean + config.logit_noise * g) / config.extra_temperature);
        }
        labels.push(Some(y));
    }
    LogitsDataset::from_flat(k, labels, logits)
}

/// A target's accuracy and confidence degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Severity {
    pub accuracy: f64,
    pub extra_temperature: f64,
}

/// Seed of the `index`-th sweep target.
pub fn sweep_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64 + 1).wrapping_mul(SEED_STRIDE))
}

/// One dataset per severity, paired with its argmax error.
pub fn shift_sweep(base: &SynthConfig, severities: &[Severity]) -> Result<Vec<(LogitsDataset, f64)>> {
    severities
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let config = SynthConfig {
                accuracy: s.accuracy,
                extra_temperature: s.extra_temperature,
                seed: sweep_seed(base.seed, i),
                ..base.clone()
            };
            let data = generate(&config)?;
            let err = data.argmax_error()?;
            Ok((data, err))
        })
        .collect()
}

/// Source split plus a sweep of shifted targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Labeled source validation split.
    pub source: SynthConfig,
    /// Rows per target; the other knobs come from `source` and the severity.
    pub target_samples: usize,
    pub severities: Vec<Severity>,
}

fn schema_version() -> u32 {
    1
}

impl SimulationConfig {
    /// 15 targets: 5 accuracy levels crossed with 3 rates of confidence loss.
    ///
    /// K = 10 with a geometric label prior `p_k ~ 0.6^k`, margin 10, noise 1,
    /// source accuracy 0.9 on 10000 rows, 2000 rows per target. The extra
    /// temperature grows with the accuracy drop, `1 + r * (0.9 - a)` for
    /// `r` in {0.5, 0.75, 1.0}, so harder targets are also less confident.
    pub fn default_sweep() -> Self {
        let weights: Vec<f64> = (0..10).map(|k| 0.6f64.powi(k)).collect();
        let label_dist = LabelDistribution::from_weights(&weights).expect("positive weights");
        let source_accuracy = 0.9;
        let mut severities = Vec::new();
        for accuracy in [0.85, 0.75, 0.65, 0.55, 0.45] {
            for rate in [0.5, 0.75, 1.0] {
                severities.push(Severity {
                    accuracy,
                    extra_temperature: 1.0 + rate * (source_accuracy - accuracy),
                });
            }
        }
        Self {
            schema_version: 1,
            source: SynthConfig {
                num_classes: 10,
                n_samples: 10_000,
                label_dist,
                accuracy: source_accuracy,
                logit_margin: 10.0,
                logit_noise: 1.0,
                extra_temperature: 1.0,
                seed: 20_240_601,
            },
            target_samples: 2000,
            severities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        if self.target_samples == 0 {
            return Err(Error::validation("target_samples must be positive"));
        }
        for s in &self.severities {
            SynthConfig {
                accuracy: s.accuracy,
                extra_temperature: s.extra_temperature,
                ..self.source.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn target_base(&self) -> SynthConfig {
        SynthConfig {
            n_samples: self.target_samples,
            ..self.source.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedTarget {
    pub target_id: String,
    pub severity: Severity,
    pub data: LogitsDataset,
    pub true_error: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub source: LogitsDataset,
    pub targets: Vec<SimulatedTarget>,
}

/// Generates the source split and every target of `config`.
pub fn simulate(config: &SimulationConfig) -> Result<Simulation> {
    config.validate()?;
    let source = generate(&config.source)?;
    let targets = shift_sweep(&config.target_base(), &config.severities)?
        .into_iter()
        .zip(&config.severities)
        .enumerate()
        .map(|(i, ((data, true_error), &severity))| SimulatedTarget {
            target_id: format!("target_{i:02}"),
            severity,
            data,
            true_error,
        })
        .collect();
    Ok(Simulation { source, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::argmax;

    fn config(k: usize, n: usize, accuracy: f64, margin: f64) -> SynthConfig {
        SynthConfig {
            num_classes: k,
            n_samples: n,
            label_dist: LabelDistribution::uniform(k).unwrap(),
            accuracy,
            logit_margin: margin,
            logit_noise: 1.0,
            extra_temperature: 1.0,
            seed: 1234,
        }
    }

    #[test]
    fn noiseless_limit_is_always_correct() {
        let mut c = config(5, 500, 1.0, 4.0);
        c.logit_noise = 1e-6;
        let d = generate(&c).unwrap();
        assert_eq!(d.argmax_error().unwrap(), 0.0);
    }

    #[test]
    fn same_seed_same_data() {
        let c = config(4, 300, 0.7, 4.0);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn accuracy_is_reproduced() {
        // flip rate of the noise alone (accuracy 1) is what separates the
        // empirical accuracy from the nominal one
        let flips = generate(&config(10, 10_000, 1.0, 5.0)).unwrap().argmax_error().unwrap();
        assert!(flips < 0.005, "flip rate {flips}");
        let err = generate(&config(10, 10_000, 0.8, 5.0)).unwrap().argmax_error().unwrap();
        assert!((1.0 - err - 0.8).abs() <= 0.02, "accuracy {}", 1.0 - err);
    }

    #[test]
    fn label_marginals_within_three_sigma() {
        let weights: Vec<f64> = (0..6).map(|k| 0.6f64.powi(k)).collect();
        let mut c = config(6, 10_000, 0.8, 5.0);
        c.label_dist = LabelDistribution::from_weights(&weights).unwrap();
        let d = generate(&c).unwrap();
        let n = d.len() as f64;
        for (k, &p) in c.label_dist.probs().iter().enumerate() {
            let count = d.labels().iter().filter(|&&y| y == Some(k)).count() as f64;
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!((count - n * p).abs() <= 3.0 * sigma, "class {k}: {count} vs {}", n * p);
        }
    }

    #[test]
    fn extra_temperature_only_rescales() {
        let base = config(6, 2000, 0.7, 4.0);
        let cold = generate(&base).unwrap();
        for tau in [1.5, 2.0, 3.0] {
            let warm = generate(&SynthConfig {
                extra_temperature: tau,
                ..base.clone()
            })
            .unwrap();
            assert_eq!(warm.labels(), cold.labels());
            for (a, b) in warm.rows().zip(cold.rows()) {
                assert_eq!(argmax(a), argmax(b));
            }
            assert_eq!(warm.argmax_error().unwrap(), cold.argmax_error().unwrap());
        }
    }

    #[test]
    fn sweep_errors_follow_accuracy() {
        let base = config(10, 10_000, 0.9, 5.0);
        assert!(shift_sweep(&base, &[]).unwrap().is_empty());
        let severities: Vec<Severity> = [0.9, 0.8, 0.7, 0.6, 0.5]
            .iter()
            .map(|&accuracy| Severity {
                accuracy,
                extra_temperature: 1.0,
            })
            .collect();
        let out = shift_sweep(&base, &severities).unwrap();
        let errors: Vec<f64> = out.iter().map(|(_, e)| *e).collect();
        assert!(errors.windows(2).all(|w| w[0] <= w[1]), "{errors:?}");
        assert_eq!(out[0].1, out[0].0.argmax_error().unwrap());
    }

    #[test]
    fn rejects_invalid_configs() {
        let good = config(3, 10, 0.5, 2.0);
        for bad in [
            SynthConfig { num_classes: 1, ..good.clone() },
            SynthConfig { n_samples: 0, ..good.clone() },
            SynthConfig { accuracy: 0.0, ..good.clone() },
            SynthConfig { accuracy: 1.5, ..good.clone() },
            SynthConfig { logit_noise: 0.0, ..good.clone() },
            SynthConfig { extra_temperature: 0.5, ..good.clone() },
            SynthConfig { num_classes: 4, ..good.clone() },
        ] {
            assert!(generate(&bad).is_err());
        }
    }

    #[test]
    fn default_sweep_shape() {
        let c = SimulationConfig::default_sweep();
        c.validate().unwrap();
        assert_eq!(c.severities.len(), 15);
        assert_eq!(c.target_base().n_samples, 2000);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<SimulationConfig>(&json).unwrap(), c);
    }
}
