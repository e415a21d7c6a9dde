//! End-to-end estimation and evaluation over logits datasets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_temperature, CalibrationModel};
use crate::error::{Error, Result};
use crate::estimators::{
    ac_estimate, atc_estimate, atc_fit_threshold, cot_estimate_batched,
    cot_estimate_batched_with_distribution, entropy_score, gde_estimate, EstimateReport, Method, Score,
    DEFAULT_BATCH_SIZE,
};
use crate::metrics::{EvaluationRecord, EvaluationReport};
use crate::types::{LabelDistribution, LogitsDataset, SoftmaxMatrix};

/// Options shared by every target of a run.
#[derive(Debug, Clone)]
pub struct EstimationOptions {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Everything derived once from the source side: temperature, validation
/// softmax and labels, label distribution and ATC thresholds.
#[derive(Debug, Clone)]
pub struct EstimationContext {
    temperature: f64,
    num_classes: usize,
    val_labels: Option<Vec<usize>>,
    label_dist: Option<LabelDistribution>,
    thresholds: Option<[f64; 2]>,
    options: EstimationOptions,
}

impl EstimationContext {
    /// Temperature comes from `calibration` when given, else is fitted on a
    /// fully labeled `val`, else is 1. `label_dist`, when given, replaces the
    /// validation labels as the source side of COT.
    pub fn new(
        calibration: Option<&CalibrationModel>,
        val: Option<&LogitsDataset>,
        label_dist: Option<LabelDistribution>,
        options: EstimationOptions,
    ) -> Result<Self> {
        let num_classes = calibration
            .map(|c| c.num_classes)
            .or(val.map(LogitsDataset::num_classes))
            .or(label_dist.as_ref().map(LabelDistribution::num_classes))
            .ok_or_else(|| {
                Error::validation("need a calibration, a validation set or a label distribution")
            })?;
        let mismatch = |what: &str, k: usize| {
            Error::validation(format!("{what} has {k} classes, expected {num_classes}"))
        };
        if let Some(v) = val {
            if v.num_classes() != num_classes {
                return Err(mismatch("validation set", v.num_classes()));
            }
        }
        if let Some(d) = &label_dist {
            if d.num_classes() != num_classes {
                return Err(mismatch("label distribution", d.num_classes()));
            }
        }

        let temperature = match (calibration, val) {
            (Some(c), _) => {
                c.validate()?;
                c.temperature
            }
            (None, Some(v)) if v.is_fully_labeled() => fit_temperature(v)?.temperature,
            _ => 1.0,
        };

        let (val_labels, thresholds) = match val {
            Some(v) => {
                let labels = v.require_labels()?;
                let probs = SoftmaxMatrix::from_logits(v, temperature)?;
                let thresholds = [
                    atc_fit_threshold(&probs, &labels, Score::Mc)?,
                    atc_fit_threshold(&probs, &labels, Score::Ne)?,
                ];
                (Some(labels), Some(thresholds))
            }
            None => (None, None),
        };

        Ok(Self {
            temperature,
            num_classes,
            val_labels,
            label_dist,
            thresholds,
            options,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// ATC threshold fitted on the calibrated validation softmax.
    pub fn threshold(&self, score: Score) -> Option<f64> {
        self.thresholds.map(|t| t[score as usize])
    }

    /// Methods this context can run, given whether a second model is available.
    pub fn available_methods(&self, with_second: bool) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| match m {
                Method::Cot => self.val_labels.is_some() || self.label_dist.is_some(),
                Method::AtcMc | Method::AtcNe => self.thresholds.is_some(),
                Method::Gde => with_second,
                Method::Ac | Method::Entropy => true,
            })
            .collect()
    }

    pub fn estimate(
        &self,
        method: Method,
        target: &LogitsDataset,
        second: Option<&LogitsDataset>,
    ) -> Result<EstimateReport> {
        if target.num_classes() != self.num_classes {
            return Err(Error::validation(format!(
                "target has {} classes, expected {}",
                target.num_classes(),
                self.num_classes
            )));
        }
        let probs = || SoftmaxMatrix::from_logits(target, self.temperature);
        let report = match method {
            Method::Cot => {
                let (batch, seed) = (self.options.batch_size, self.options.seed);
                match (&self.label_dist, &self.val_labels) {
                    (Some(dist), _) => cot_estimate_batched_with_distribution(&probs()?, dist, batch, seed)?,
                    (None, Some(labels)) => cot_estimate_batched(&probs()?, labels, batch, seed)?,
                    (None, None) => {
                        return Err(Error::validation(
                            "COT needs source labels: pass a validation set or a label distribution",
                        ))
                    }
                }
            }
            Method::Ac => ac_estimate(&probs()?),
            Method::Entropy => entropy_score(&probs()?),
            Method::AtcMc | Method::AtcNe => {
                let score = if method == Method::AtcMc { Score::Mc } else { Score::Ne };
                let t = self
                    .threshold(score)
                    .ok_or_else(|| Error::validation("ATC needs a labeled validation set"))?;
                atc_estimate(&probs()?, t, score)
            }
            Method::Gde => {
                let second = second.ok_or_else(|| {
                    Error::validation("GDE needs logits from a second model on the same target")
                })?;
                // only argmaxes matter, so the temperature is irrelevant here
                gde_estimate(
                    &SoftmaxMatrix::from_logits(target, 1.0)?,
                    &SoftmaxMatrix::from_logits(second, 1.0)?,
                )?
            }
        };
        Ok(report.with_temperature(self.temperature))
    }
}

/// One target to evaluate.
#[derive(Debug, Clone)]
pub struct EvaluationTarget {
    pub target_id: String,
    pub data: LogitsDataset,
    pub second: Option<LogitsDataset>,
    pub true_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetEstimates {
    pub target_id: String,
    pub true_error: f64,
    pub reports: Vec<EstimateReport>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub per_target: Vec<TargetEstimates>,
    pub reports: Vec<EvaluationReport>,
    pub records: Vec<(Method, Vec<EvaluationRecord>)>,
}

/// Runs every method on every target (targets in parallel) and scores each
/// method across targets. Results are in target and method order.
pub fn evaluate(
    ctx: &EstimationContext,
    methods: &[Method],
    targets: &[EvaluationTarget],
) -> Result<Evaluation> {
    if targets.len() < 2 {
        return Err(Error::UndefinedFit(format!(
            "evaluation needs at least 2 targets, got {}",
            targets.len()
        )));
    }
    let per_target = targets
        .par_iter()
        .map(|t| {
            let reports = methods
                .iter()
                .map(|&m| ctx.estimate(m, &t.data, t.second.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            Ok(TargetEstimates {
                target_id: t.target_id.clone(),
                true_error: t.true_error,
                reports,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (mi, &method) in methods.iter().enumerate() {
        let recs: Vec<EvaluationRecord> = per_target
            .iter()
            .map(|t| EvaluationRecord::new(&t.target_id, t.reports[mi].estimate, t.true_error))
            .collect();
        reports.push(EvaluationReport::compute(method, &recs)?);
        records.push((method, recs));
    }
    Ok(Evaluation {
        per_target,
        reports,
        records,
    })
}
