use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::optim::golden_section_minimize;
use crate::types::{argmax, softmax_into, Dataset, ProbVector};

const LOG_T_RANGE: (f64, f64) = (-4.605_170_185_988_091, 4.605_170_185_988_091); // ln 1e-2, ln 1e2
const LOG_T_TOL: f64 = 1e-4;

/// A single global temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsModel {
    pub temperature: f64,
}

impl TsModel {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(CalibError::argument(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { temperature })
    }

    pub fn apply(&self, logits: &[f64]) -> ProbVector {
        let mut out = vec![0.0; logits.len()];
        softmax_into(logits, self.temperature, &mut out);
        ProbVector::from_vec_unchecked(out)
    }
}

/// `softmax(logits / temperature)`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    let model = TsModel::new(temperature)?;
    if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
        return Err(CalibError::input("logits must be nonempty and finite"));
    }
    Ok(model.apply(logits))
}

/// Mean negative log-likelihood of the labels under `softmax(z / t)`.
pub fn mean_nll_at(dataset: &Dataset, temperature: f64) -> f64 {
    let total: f64 = dataset
        .records()
        .iter()
        .map(|r| {
            let z = r.logits();
            let max = z[argmax(z)];
            let log_sum: f64 = z.iter().map(|&v| ((v - max) / temperature).exp()).sum::<f64>().ln();
            log_sum - (z[r.label()] - max) / temperature
        })
        .sum();
    total / dataset.len() as f64
}

/// Temperature minimizing the mean NLL, by golden-section search on
/// `ln T` over `[ln 0.01, ln 100]`.
pub fn fit_ts(dataset: &Dataset) -> Result<TsModel> {
    let first = dataset.records()[0].label();
    if dataset.records().iter().all(|r| r.label() == first) {
        warn!("all {} records share label {first}; the fitted temperature is degenerate", dataset.len());
    }
    let (log_t, nll) = golden_section_minimize(
        |log_t| mean_nll_at(dataset, log_t.exp()),
        LOG_T_RANGE.0,
        LOG_T_RANGE.1,
        LOG_T_TOL,
    );
    if !nll.is_finite() {
        return Err(CalibError::Numerical(format!("NLL is {nll} at T = {}", log_t.exp())));
    }
    TsModel::new(log_t.exp())
}
