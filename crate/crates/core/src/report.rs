//! Evaluation reports: every metric for one or more calibrators on a test set.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::metrics::{accuracy, ece, ece_equal_mass, ece_kde, nll, reliability_data, BinStats};
use crate::types::{softmax_unchecked, Dataset, PredictionRecord, ProbVector};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedEce {
    pub bins: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeEce {
    pub value: f64,
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub accuracy: f64,
    pub nll: f64,
    pub ece_equal_width: Vec<BinnedEce>,
    pub ece_equal_mass: BinnedEce,
    /// Absent when the test set has fewer than 10 records.
    pub ece_kde: Option<KdeEce>,
    pub reliability: Vec<BinStats>,
    /// Wall-clock fit time; only recorded on request, because it would make
    /// otherwise identical runs differ.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fit_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub num_classes: usize,
    pub num_samples: usize,
    pub methods: Vec<MethodReport>,
}

impl Report {
    pub fn new(dataset: &Dataset, methods: Vec<MethodReport>) -> Self {
        Self {
            version: REPORT_FORMAT_VERSION,
            num_classes: dataset.num_classes(),
            num_samples: dataset.len(),
            methods,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// All metrics of `probs` against the labels of `dataset`. `bins` lists the
/// equal-width bin counts; the first one also sets the equal-mass bin count
/// and the reliability table.
pub fn evaluate(name: &str, dataset: &Dataset, probs: &[ProbVector], bins: &[usize]) -> Result<MethodReport> {
    if probs.len() != dataset.len() {
        return Err(CalibError::argument("one probability vector per record is required"));
    }
    let &first = bins
        .first()
        .ok_or_else(|| CalibError::argument("at least one bin count is required"))?;
    let preds: Vec<PredictionRecord> = probs
        .iter()
        .zip(dataset.records())
        .map(|(p, r)| PredictionRecord::from_probs(p, r.label()))
        .collect();

    let ece_equal_width = bins
        .iter()
        .map(|&m| Ok(BinnedEce { bins: m, value: ece(&preds, m, 1)?.value }))
        .collect::<Result<Vec<_>>>()?;
    let mass_bins = first.min(preds.len());
    let ece_kde = if preds.len() >= 10 {
        let r = ece_kde(&preds)?;
        Some(KdeEce {
            value: r.value,
            bandwidth: r.bandwidth,
        })
    } else {
        None
    };
    Ok(MethodReport {
        method: name.to_string(),
        accuracy: accuracy(&preds)?,
        nll: nll(dataset, probs)?,
        ece_equal_width,
        ece_equal_mass: BinnedEce {
            bins: mass_bins,
            value: ece_equal_mass(&preds, mass_bins)?.value,
        },
        ece_kde,
        reliability: reliability_data(&preds, first)?,
        fit_seconds: None,
    })
}

/// Metrics of the uncalibrated softmax.
pub fn evaluate_base(dataset: &Dataset, bins: &[usize]) -> Result<MethodReport> {
    let probs: Vec<ProbVector> = dataset.records().iter().map(|r| softmax_unchecked(r.logits())).collect();
    evaluate("base", dataset, &probs, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LogitRecord;

    #[test]
    fn base_report_fields() {
        let recs = (0..20)
            .map(|i| LogitRecord::new(i % 2, vec![(i % 3) as f64, 0.5]).unwrap())
            .collect();
        let ds = Dataset::new(recs).unwrap();
        let r = evaluate_base(&ds, &[10, 5]).unwrap();
        assert_eq!(r.method, "base");
        assert_eq!(r.ece_equal_width.len(), 2);
        assert_eq!(r.ece_equal_width[1].bins, 5);
        assert_eq!(r.reliability.len(), 10);
        assert!(r.ece_kde.is_some());
        assert!(r.nll > 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("fit_seconds"));
        assert!(evaluate_base(&ds, &[]).is_err());
    }
}
