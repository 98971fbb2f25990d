//! Confusion counts, the binary metric suite, and aggregation across seeds.
//!
//! Positive class is 1. Undecodable predictions are counted separately and
//! scored as wrong: against recall when the truth is 1, against specificity
//! when it is 0. Any ratio with a zero denominator is reported as undefined
//! (`None`), never as 0 or 1.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::PredictionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction for `{0}` has no matching truth label")]
    IdMismatch(String),
    #[error("truth label for `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("no reports to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub undecodable_pos: usize,
    pub undecodable_neg: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        ConfusionMatrix {
            tp,
            fp,
            tn,
            fn_,
            ..Default::default()
        }
    }

    pub fn undecodable(&self) -> usize {
        self.undecodable_pos + self.undecodable_neg
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_ + self.undecodable()
    }

    pub fn add(&mut self, predicted: Option<u8>, truth: u8) {
        match (predicted, truth) {
            (Some(1), 1) => self.tp += 1,
            (Some(1), _) => self.fp += 1,
            (Some(_), 1) => self.fn_ += 1,
            (Some(_), _) => self.tn += 1,
            (None, 1) => self.undecodable_pos += 1,
            (None, _) => self.undecodable_neg += 1,
        }
    }

    pub fn from_pairs<I: IntoIterator<Item = (Option<u8>, u8)>>(pairs: I) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (p, t) in pairs {
            cm.add(p, t);
        }
        cm
    }
}

/// Builds the matrix from records and a truth map keyed by target id.
pub fn confusion(
    preds: &[PredictionRecord],
    truth: &HashMap<String, u8>,
) -> Result<ConfusionMatrix, MetricsError> {
    let mut cm = ConfusionMatrix::default();
    for p in preds {
        let t = truth
            .get(&p.target_id)
            .ok_or_else(|| MetricsError::IdMismatch(p.target_id.clone()))?;
        cm.add(p.label, *t);
    }
    if preds.len() != truth.len() {
        let have: std::collections::HashSet<&str> = preds.iter().map(|p| p.target_id.as_str()).collect();
        let mut missing: Vec<&String> = truth.keys().filter(|k| !have.contains(k.as_str())).collect();
        missing.sort();
        if let Some(id) = missing.first() {
            return Err(MetricsError::MissingPrediction((*id).clone()));
        }
    }
    Ok(cm)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n: usize,
    pub undecodable: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const METRIC_NAMES: [&str; 4] = ["f1", "balanced_accuracy", "precision", "recall"];

impl MetricsReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "f1" => self.f1,
            "balanced_accuracy" => self.balanced_accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            _ => None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// F1 is `2tp / (2tp + fp + fn')` and is undefined whenever precision or
/// recall is undefined.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let positives = cm.tp + cm.fn_ + cm.undecodable_pos;
    let negatives = cm.tn + cm.fp + cm.undecodable_neg;
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, positives);
    let specificity = ratio(cm.tn, negatives);
    let f1 = match (precision, recall) {
        (Some(_), Some(_)) => ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_ + cm.undecodable_pos),
        _ => None,
    };
    let balanced_accuracy = match (recall, specificity) {
        (Some(r), Some(s)) => Some((r + s) / 2.0),
        _ => None,
    };
    MetricsReport {
        f1,
        balanced_accuracy,
        precision,
        recall,
        n: cm.total(),
        undecodable: cm.undecodable(),
        seed: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 when only one value is defined.
    pub sd: Option<f64>,
    pub n_defined: usize,
    pub n_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub metrics: BTreeMap<String, MetricSummary>,
    pub seeds: Vec<u64>,
    pub n_reports: usize,
}

/// Mean and sample SD of each metric over the defined values. The result does
/// not depend on report order: values are summed in sorted order.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SummaryStats, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut out = BTreeMap::new();
    for name in METRIC_NAMES {
        let mut vals: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
        let n = vals.len();
        // Shift by the smallest value so equal inputs give an exact zero SD.
        let base = vals.first().copied().unwrap_or(0.0);
        let shifted: Vec<f64> = vals.iter().map(|v| v - base).collect();
        let shift_mean = (n > 0).then(|| shifted.iter().sum::<f64>() / n as f64);
        let mean = shift_mean.map(|m| base + m);
        let sd = shift_mean.map(|m| {
            if n < 2 {
                0.0
            } else {
                (shifted.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        });
        out.insert(
            name.to_string(),
            MetricSummary {
                mean,
                sd,
                n_defined: n,
                n_undefined: reports.len() - n,
            },
        );
    }
    let mut seeds: Vec<u64> = reports.iter().filter_map(|r| r.seed).collect();
    seeds.sort_unstable();
    Ok(SummaryStats {
        metrics: out,
        seeds,
        n_reports: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PromptFormat, Shots, Structure, Variant};

    fn rec(id: &str, label: Option<u8>) -> PredictionRecord {
        PredictionRecord {
            target_id: id.into(),
            label,
            confidence: None,
            reasoning: None,
            raw_text: String::new(),
            seed: 0,
            format: PromptFormat::new(Structure::Tabular, Shots::Few, Variant::Standard),
            endpoint: "mock".into(),
            round: 1,
        }
    }

    fn cohort() -> HashMap<String, u8> {
        (0..30).map(|i| (format!("s{i}"), (i < 10) as u8)).collect()
    }

    #[test]
    fn confusion_all_correct_and_all_positive() {
        let truth = cohort();
        let preds: Vec<_> = truth.iter().map(|(id, y)| rec(id, Some(*y))).collect();
        assert_eq!(confusion(&preds, &truth).unwrap(), ConfusionMatrix::new(10, 0, 20, 0));
        let preds: Vec<_> = truth.keys().map(|id| rec(id, Some(1))).collect();
        assert_eq!(confusion(&preds, &truth).unwrap(), ConfusionMatrix::new(10, 20, 0, 0));
    }

    #[test]
    fn confusion_counts_undecodable() {
        let truth = cohort();
        let preds: Vec<_> = truth
            .iter()
            .map(|(id, y)| rec(id, if id == "s3" { None } else { Some(*y) }))
            .collect();
        let cm = confusion(&preds, &truth).unwrap();
        assert_eq!(cm.total(), 30);
        assert_eq!(cm.undecodable(), 1);
        assert_eq!(cm.undecodable_pos, 1);
    }

    #[test]
    fn confusion_id_errors() {
        let truth = cohort();
        assert_eq!(
            confusion(&[rec("zz", Some(1))], &truth).unwrap_err(),
            MetricsError::IdMismatch("zz".into())
        );
        assert!(matches!(
            confusion(&[rec("s0", Some(1))], &truth),
            Err(MetricsError::MissingPrediction(_))
        ));
    }

    #[test]
    fn perfect_and_all_positive_metrics() {
        let m = metrics(&ConfusionMatrix::new(10, 0, 20, 0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.balanced_accuracy, Some(1.0));
        let m = metrics(&ConfusionMatrix::new(10, 20, 0, 0));
        assert_eq!(m.precision, Some(1.0 / 3.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(0.5));
        assert_eq!(m.balanced_accuracy, Some(0.5));
    }

    #[test]
    fn zero_over_zero_is_undefined() {
        let m = metrics(&ConfusionMatrix::new(0, 0, 20, 0));
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.balanced_accuracy, None);
        let m = metrics(&ConfusionMatrix::new(0, 0, 15, 5));
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
        assert_eq!(m.balanced_accuracy, Some(0.5));
    }

    #[test]
    fn undecodable_counts_against_recall_and_specificity() {
        let mut cm = ConfusionMatrix::new(4, 1, 4, 0);
        cm.undecodable_pos = 1;
        cm.undecodable_neg = 1;
        let m = metrics(&cm);
        assert_eq!(m.recall, Some(0.8));
        assert_eq!(m.balanced_accuracy, Some((0.8 + 4.0 / 6.0) / 2.0));
        assert_eq!(m.n, 11);
    }

    fn report(f1: f64) -> MetricsReport {
        MetricsReport {
            f1: Some(f1),
            balanced_accuracy: Some(f1),
            precision: None,
            recall: Some(1.0),
            n: 10,
            undecodable: 0,
            seed: None,
        }
    }

    #[test]
    fn aggregate_two_values() {
        let s = aggregate_seeds(&[report(0.8), report(0.9)]).unwrap();
        let f1 = &s.metrics["f1"];
        assert!((f1.mean.unwrap() - 0.85).abs() < 1e-15);
        assert!((f1.sd.unwrap() - 0.005f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.metrics["precision"].mean, None);
        assert_eq!(s.metrics["precision"].n_undefined, 2);
    }

    #[test]
    fn aggregate_single_and_identical() {
        let s = aggregate_seeds(&[report(0.7)]).unwrap();
        assert_eq!(s.metrics["f1"].mean, Some(0.7));
        assert_eq!(s.metrics["f1"].sd, Some(0.0));
        assert_eq!(s.metrics["f1"].n_defined, 1);
        let ten = vec![report(0.6); 10];
        assert_eq!(aggregate_seeds(&ten).unwrap().metrics["f1"].sd, Some(0.0));
        assert_eq!(aggregate_seeds(&[]).unwrap_err(), MetricsError::EmptyInput);
    }
}
