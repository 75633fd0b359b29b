//! Core domain types and the softmax / top-label primitives shared by every
//! calibrator and metric.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// One sample's raw logits together with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRecord {
    label: usize,
    logits: Vec<f64>,
}

impl LogitRecord {
    pub fn new(label: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 {
            return Err(CalibError::input(format!(
                "a record needs at least 2 logits, got {}",
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(CalibError::input(format!("logit {i} is not finite")));
        }
        if label >= logits.len() {
            return Err(CalibError::input(format!(
                "label {label} out of range for {} classes",
                logits.len()
            )));
        }
        Ok(Self { label, logits })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    /// Class predicted by the uncalibrated logits.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_class() == self.label
    }
}

/// A nonempty collection of records sharing one class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<LogitRecord>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(records: Vec<LogitRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| CalibError::input("dataset is empty"))?;
        let num_classes = first.num_classes();
        if let Some(i) = records.iter().position(|r| r.num_classes() != num_classes) {
            return Err(CalibError::input(format!(
                "record {i} has {} classes, expected {num_classes}",
                records[i].num_classes()
            )));
        }
        Ok(Self {
            records,
            num_classes,
        })
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subset by record indices. Fails if `indices` is empty.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Predictions of the uncalibrated model (plain softmax).
    pub fn base_predictions(&self) -> Vec<PredictionRecord> {
        self.records
            .iter()
            .map(|r| PredictionRecord::from_probs(&softmax_unchecked(r.logits()), r.label()))
            .collect()
    }
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates the simplex constraint to within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CalibError::input("empty probability vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CalibError::input("probabilities must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CalibError::input(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top_label(&self) -> (usize, f64) {
        top_label(self)
    }
}

/// Top-label view of one (calibrated or uncalibrated) prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub predicted_class: usize,
    pub confidence: f64,
    pub correct: bool,
}

impl PredictionRecord {
    pub fn new(predicted_class: usize, confidence: f64, correct: bool) -> Self {
        Self {
            predicted_class,
            confidence,
            correct,
        }
    }

    pub fn from_probs(probs: &ProbVector, label: usize) -> Self {
        let (class, confidence) = probs.top_label();
        Self::new(class, confidence, class == label)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(CalibError::input("softmax of an empty sequence"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(CalibError::input("softmax input is not finite"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> ProbVector {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut out);
    ProbVector::from_vec_unchecked(out)
}

/// `out = softmax(logits / temperature)`.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits[argmax(logits)];
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index and value of the maximum probability; ties go to the lowest index.
pub fn top_label(p: &ProbVector) -> (usize, f64) {
    let i = argmax(p.as_slice());
    (i, p.as_slice()[i])
}

/// The `min(k, C)` largest logits in decreasing order, padded to length `k`
/// by repeating the smallest selected value.
pub fn sorted_topk(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(CalibError::argument("sorted_topk needs k >= 1"));
    }
    if logits.is_empty() {
        return Err(CalibError::input("sorted_topk of an empty sequence"));
    }
    let mut out = vec![0.0; k];
    sorted_topk_into(logits, &mut out);
    Ok(out)
}

pub(crate) fn sorted_topk_into(logits: &[f64], out: &mut [f64]) {
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = sorted.len().min(out.len());
    out[..take].copy_from_slice(&sorted[..take]);
    let pad = sorted[take - 1];
    for o in &mut out[take..] {
        *o = pad;
    }
}
