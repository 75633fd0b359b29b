use serde::{Deserialize, Serialize};

use super::replace_top;
use crate::error::{CalibError, Result};
use crate::metrics::equal_mass_groups;
use crate::types::{PredictionRecord, ProbVector};

/// Equal-mass histogram binning of the top-label confidence.
///
/// `edges` are the inner boundaries, placed halfway between the last
/// confidence of one fitted bin and the first of the next. A confidence `c`
/// falls into bin `m` when `edges[m - 1] < c <= edges[m]`. Bins left empty
/// by tied confidences are dropped, so there can be fewer than `M` scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBinModel {
    pub edges: Vec<f64>,
    pub scores: Vec<f64>,
}

impl HistBinModel {
    pub fn new(edges: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || edges.len() + 1 != scores.len() {
            return Err(CalibError::argument("histogram binning needs one more score than inner edges"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CalibError::argument("histogram bin edges must be strictly increasing"));
        }
        if scores.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(CalibError::argument("histogram bin scores must lie in [0, 1]"));
        }
        Ok(Self { edges, scores })
    }

    pub fn bin_of(&self, confidence: f64) -> usize {
        self.edges.partition_point(|&e| e < confidence)
    }

    pub fn apply_confidence(&self, confidence: f64) -> f64 {
        self.scores[self.bin_of(confidence)]
    }

    pub fn apply(&self, probs: &ProbVector) -> ProbVector {
        let (_, conf) = probs.top_label();
        replace_top(probs.as_slice(), self.apply_confidence(conf))
    }
}

pub fn fit_hist_binning(preds: &[PredictionRecord], m: usize) -> Result<HistBinModel> {
    if preds.is_empty() {
        return Err(CalibError::input("histogram binning needs at least one prediction"));
    }
    let confidences: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    let (order, ends) = equal_mass_groups(&confidences, m)?;

    let mut edges = Vec::new();
    let mut scores = Vec::new();
    let mut start = 0;
    let mut prev_last: Option<f64> = None;
    for end in ends {
        if end == start {
            continue;
        }
        let members = &order[start..end];
        if let Some(last) = prev_last {
            edges.push(0.5 * (last + confidences[members[0]]));
        }
        let correct = members.iter().filter(|&&i| preds[i].correct).count();
        scores.push(correct as f64 / members.len() as f64);
        prev_last = Some(confidences[members[members.len() - 1]]);
        start = end;
    }
    HistBinModel::new(edges, scores)
}
