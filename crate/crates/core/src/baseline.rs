//! L2-regularized logistic regression baseline and the external model adapter.

use std::collections::BTreeSet;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::split::ContextSet;
use crate::table::{Cell, ColumnKind, FeatureTable, SubjectRow};

pub const MAX_ITERATIONS: usize = 50_000;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const DEFAULT_L2: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("training labels contain a single class ({0})")]
    SingleClass(u8),
    #[error("no training samples")]
    NoSamples,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("subject `{0}` has missing cells; baselines need complete rows")]
    IncompleteRow(String),
    #[error("unknown subject `{0}`")]
    UnknownSubject(String),
    #[error("external model failed: {0}")]
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    /// One weight per feature, then the bias.
    pub weights: Vec<f64>,
    pub l2: f64,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub iterations: usize,
    pub grad_inf_norm: f64,
}

impl LogRegModel {
    pub fn dim(&self) -> usize {
        self.weights.len() - 1
    }

    /// Unfitted model with identity standardization.
    pub fn zeros(dim: usize, l2: f64) -> Self {
        LogRegModel {
            weights: vec![0.0; dim + 1],
            l2,
            means: vec![0.0; dim],
            scales: vec![1.0; dim],
            iterations: 0,
            grad_inf_norm: f64::NAN,
        }
    }

    fn margin(&self, xs: &[f64]) -> f64 {
        let d = self.dim();
        self.weights[..d].iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() + self.weights[d]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_shapes(model: &LogRegModel, x: &[Vec<f64>], y: &[u8]) -> Result<(), BaselineError> {
    if x.len() != y.len() {
        return Err(BaselineError::DimMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let d = model.dim();
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(BaselineError::DimMismatch {
            expected: d,
            found: row.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(BaselineError::BadLabel(bad));
    }
    Ok(())
}

/// Mean logistic loss plus `(l2/2)‖w‖²` (bias unpenalized) on standardized `x`.
pub fn logreg_objective(model: &LogRegModel, x: &[Vec<f64>], y: &[u8]) -> Result<f64, BaselineError> {
    check_shapes(model, x, y)?;
    Ok(objective(&model.weights, model.l2, x, y))
}

/// Analytic gradient of [`logreg_objective`] in the model's weights.
pub fn logreg_gradient(model: &LogRegModel, x: &[Vec<f64>], y: &[u8]) -> Result<Vec<f64>, BaselineError> {
    check_shapes(model, x, y)?;
    Ok(gradient(&model.weights, model.l2, x, y))
}

fn margin(w: &[f64], xs: &[f64]) -> f64 {
    let d = w.len() - 1;
    w[..d].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

fn objective(w: &[f64], l2: f64, x: &[Vec<f64>], y: &[u8]) -> f64 {
    let n = x.len() as f64;
    let d = w.len() - 1;
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(xs, &yi)| {
            let z = margin(w, xs);
            softplus(z) - yi as f64 * z
        })
        .sum();
    loss / n + 0.5 * l2 * w[..d].iter().map(|v| v * v).sum::<f64>()
}

fn gradient(w: &[f64], l2: f64, x: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let n = x.len() as f64;
    let d = w.len() - 1;
    let mut g = vec![0.0; d + 1];
    for (xs, &yi) in x.iter().zip(y) {
        let r = sigmoid(margin(w, xs)) - yi as f64;
        for (gj, xj) in g[..d].iter_mut().zip(xs) {
            *gj += r * xj;
        }
        g[d] += r;
    }
    for (j, gj) in g.iter_mut().enumerate() {
        *gj /= n;
        if j < d {
            *gj += l2 * w[j];
        }
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fits on already standardized rows. Returns the model and the objective
/// after every accepted step.
pub fn fit_logreg_traced(x: &[Vec<f64>], y: &[u8], l2: f64) -> Result<(LogRegModel, Vec<f64>), BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::NoSamples);
    }
    let mut model = LogRegModel::zeros(x[0].len(), l2);
    check_shapes(&model, x, y)?;
    if y.iter().all(|&v| v == y[0]) {
        return Err(BaselineError::SingleClass(y[0]));
    }
    let mut w = model.weights.clone();
    let mut f = objective(&w, l2, x, y);
    let mut trace = vec![f];
    let mut step: f64 = 1.0;
    let mut g = gradient(&w, l2, x, y);
    let mut iterations = 0;
    while inf_norm(&g) >= GRADIENT_TOL && iterations < MAX_ITERATIONS {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        step = (step * 2.0).min(1e6);
        let (next, f_next) = loop {
            let cand: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let fc = objective(&cand, l2, x, y);
            if fc <= f - 0.5 * step * gg || step < 1e-16 {
                break (cand, fc);
            }
            step *= 0.5;
        };
        if f_next > f {
            break;
        }
        w = next;
        f = f_next;
        trace.push(f);
        g = gradient(&w, l2, x, y);
        iterations += 1;
    }
    model.weights = w;
    model.iterations = iterations;
    model.grad_inf_norm = inf_norm(&g);
    Ok((model, trace))
}

/// Minimizes the regularized mean logistic loss on standardized rows.
pub fn fit_logreg(x: &[Vec<f64>], y: &[u8], l2: f64) -> Result<LogRegModel, BaselineError> {
    fit_logreg_traced(x, y, l2).map(|(m, _)| m)
}

/// Standardizes raw rows with their own mean and population SD (constant
/// columns keep scale 1), fits, and stores the statistics in the model.
pub fn fit_logreg_raw(x: &[Vec<f64>], y: &[u8], l2: f64) -> Result<LogRegModel, BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::NoSamples);
    }
    let d = x[0].len();
    let n = x.len() as f64;
    let means: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scales: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - means[j]) / scales[j]).collect())
        .collect();
    let mut model = fit_logreg(&z, y, l2)?;
    model.means = means;
    model.scales = scales;
    Ok(model)
}

/// Probability and label (`p >= 0.5` is positive) for a raw feature vector.
pub fn predict_logreg(model: &LogRegModel, x: &[f64]) -> Result<(f64, u8), BaselineError> {
    if x.len() != model.dim() {
        return Err(BaselineError::DimMismatch {
            expected: model.dim(),
            found: x.len(),
        });
    }
    let z: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(j, v)| (v - model.means[j]) / model.scales[j])
        .collect();
    let p = sigmoid(model.margin(&z));
    Ok((p, (p >= 0.5) as u8))
}

/// Numeric encoding of covariate and feature cells. Categorical values map to
/// their index among the declared levels, or among the column's sorted
/// distinct values when no levels are declared.
#[derive(Debug, Clone)]
pub struct RowEncoder {
    columns: Vec<usize>,
    levels: Vec<Option<Vec<String>>>,
}

impl RowEncoder {
    pub fn new(table: &FeatureTable) -> Self {
        let columns: Vec<usize> = table.feature_indices().collect();
        let levels = columns
            .iter()
            .map(|&j| match &table.columns()[j].kind {
                ColumnKind::Categorical { levels } if !levels.is_empty() => Some(levels.clone()),
                ColumnKind::Categorical { .. } => {
                    let seen: BTreeSet<String> = table
                        .rows()
                        .iter()
                        .filter_map(|r| match &r.cells[j] {
                            Cell::Present(v) => Some(v.raw.clone()),
                            Cell::Missing => None,
                        })
                        .collect();
                    Some(seen.into_iter().collect())
                }
                _ => None,
            })
            .collect();
        RowEncoder { columns, levels }
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn encode(&self, row: &SubjectRow) -> Result<Vec<f64>, BaselineError> {
        let incomplete = || BaselineError::IncompleteRow(row.subject_id.clone());
        self.columns
            .iter()
            .zip(&self.levels)
            .map(|(&j, levels)| match (&row.cells[j], levels) {
                (Cell::Missing, _) => Err(incomplete()),
                (Cell::Present(v), Some(levels)) => levels
                    .iter()
                    .position(|l| *l == v.raw)
                    .map(|i| i as f64)
                    .ok_or_else(incomplete),
                (Cell::Present(v), None) => v.number.ok_or_else(incomplete),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    pub label: u8,
    pub probability: f64,
    /// True when the context had one class and the majority label was used.
    pub fallback: bool,
}

/// Fits one model on the target's context examples and predicts the target.
pub fn predict_from_context(
    table: &FeatureTable,
    encoder: &RowEncoder,
    context: &ContextSet,
    l2: f64,
) -> Result<BaselinePrediction, BaselineError> {
    let row = |id: &str| table.row(id).ok_or_else(|| BaselineError::UnknownSubject(id.to_string()));
    let target = encoder.encode(row(&context.target_id)?)?;
    let mut x = Vec::with_capacity(context.examples.len());
    let mut y = Vec::with_capacity(context.examples.len());
    for ex in &context.examples {
        x.push(encoder.encode(row(&ex.subject_id)?)?);
        y.push(ex.label);
    }
    match fit_logreg_raw(&x, &y, l2) {
        Ok(model) => {
            let (probability, label) = predict_logreg(&model, &target)?;
            Ok(BaselinePrediction {
                label,
                probability,
                fallback: false,
            })
        }
        Err(BaselineError::SingleClass(c)) => Ok(BaselinePrediction {
            label: c,
            probability: c as f64,
            fallback: true,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSample {
    pub x: Vec<f64>,
    pub y: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterQuery {
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub train: Vec<AdapterSample>,
    pub test: AdapterQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub label: u8,
    pub probability: f64,
}

/// Any executable that reads an [`AdapterRequest`] on stdin and writes an
/// [`AdapterResponse`] on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAdapter {
    pub name: String,
    pub command: Vec<String>,
}

impl ExternalAdapter {
    pub fn predict(&self, request: &AdapterRequest) -> Result<AdapterResponse, BaselineError> {
        let err = |m: String| BaselineError::External(format!("{}: {m}", self.name));
        let (program, args) = self.command.split_first().ok_or_else(|| err("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| err(e.to_string()))?;
        let payload = serde_json::to_vec(request).expect("request serializes");
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(&payload)
            .map_err(|e| err(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| err(e.to_string()))?;
        if !out.status.success() {
            return Err(err(format!(
                "exit {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let resp: AdapterResponse =
            serde_json::from_slice(&out.stdout).map_err(|e| err(format!("bad response: {e}")))?;
        if resp.label > 1 {
            return Err(BaselineError::BadLabel(resp.label));
        }
        Ok(resp)
    }

    pub fn predict_from_context(
        &self,
        table: &FeatureTable,
        encoder: &RowEncoder,
        context: &ContextSet,
    ) -> Result<AdapterResponse, BaselineError> {
        let row = |id: &str| table.row(id).ok_or_else(|| BaselineError::UnknownSubject(id.to_string()));
        let train = context
            .examples
            .iter()
            .map(|ex| {
                Ok(AdapterSample {
                    x: encoder.encode(row(&ex.subject_id)?)?,
                    y: ex.label,
                })
            })
            .collect::<Result<Vec<_>, BaselineError>>()?;
        let test = AdapterQuery {
            x: encoder.encode(row(&context.target_id)?)?,
        };
        self.predict(&AdapterRequest { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_optimum() {
        let x = vec![vec![-1.0], vec![1.0]];
        let y = [0, 1];
        let m = fit_logreg(&x, &y, 1.0).unwrap();
        assert!(m.weights[0] > 0.0);
        assert!(m.grad_inf_norm < GRADIENT_TOL);
        // Stationarity for w (bias is 0 by symmetry): w = 1 - sigmoid(w).
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - (1.0 - sigmoid(mid)) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((m.weights[0] - lo).abs() < 1e-7);
        assert!(m.weights[1].abs() < 1e-7);
    }

    #[test]
    fn zero_weights_predict_half() {
        let m = LogRegModel::zeros(2, 0.0);
        assert_eq!(predict_logreg(&m, &[3.0, -1.0]).unwrap(), (0.5, 1));
        assert!(matches!(predict_logreg(&m, &[1.0]), Err(BaselineError::DimMismatch { .. })));
    }

    #[test]
    fn flip_symmetry_and_saturation() {
        let mut m = LogRegModel::zeros(2, 0.0);
        m.weights = vec![0.7, -1.3, 0.0];
        let (p, _) = predict_logreg(&m, &[0.4, 0.9]).unwrap();
        let (q, _) = predict_logreg(&m, &[-0.4, -0.9]).unwrap();
        assert!((p + q - 1.0).abs() < 1e-15);
        m.weights = vec![10.0, 0.0, 0.0];
        assert!(predict_logreg(&m, &[5.0, 0.0]).unwrap().0 > 0.999);
    }

    #[test]
    fn gradient_at_zero() {
        let x = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let y = [1, 1, 1];
        let m = LogRegModel::zeros(2, 0.0);
        let g = logreg_gradient(&m, &x, &y).unwrap();
        let expect = [-(1.0 + 3.0 + 0.5) / 6.0, -(2.0 - 1.0 + 0.5) / 6.0, -0.5];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_refused() {
        let x = vec![vec![1.0], vec![2.0]];
        assert_eq!(fit_logreg(&x, &[1, 1], 1.0).unwrap_err(), BaselineError::SingleClass(1));
        assert_eq!(fit_logreg(&[], &[], 1.0).unwrap_err(), BaselineError::NoSamples);
    }

    #[test]
    fn loss_never_increases() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.1).cos()]).collect();
        let y: Vec<u8> = (0..20).map(|i| (i % 3 == 0) as u8).collect();
        let (_, trace) = fit_logreg_traced(&x, &y, 0.1).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
}
