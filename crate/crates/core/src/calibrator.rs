//! A single tagged type over every fitted calibrator.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{
    fit_hist_binning, fit_irm, fit_irova, fit_irova_ts, fit_pbmc_with, HistBinModel, IrmModel, IrovaModel, IrovaTsModel,
    PbmcModel,
};
use crate::error::{CalibError, Result};
use crate::scaling::{fit_ets, fit_pts, fit_ts, EtsModel, LossKind, PtsModel, PtsTrainConfig, TsModel};
use crate::types::{softmax_unchecked, Dataset, PredictionRecord, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ts,
    Ets,
    Pts,
    Histbin,
    Irova,
    Irm,
    IrovaTs,
    Pbmc,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ts,
        Method::Ets,
        Method::Pts,
        Method::Histbin,
        Method::Irova,
        Method::Irm,
        Method::IrovaTs,
        Method::Pbmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ts => "ts",
            Method::Ets => "ets",
            Method::Pts => "pts",
            Method::Histbin => "histbin",
            Method::Irova => "irova",
            Method::Irm => "irm",
            Method::IrovaTs => "irova_ts",
            Method::Pbmc => "pbmc",
        }
    }

    /// Whether the calibrator provably never changes the predicted class.
    pub fn preserves_accuracy(self) -> bool {
        matches!(self, Method::Ts | Method::Ets | Method::Pts | Method::Irm | Method::Pbmc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CalibError::argument(format!("unknown calibrator kind '{s}'")))
    }
}

/// Hyperparameters for [`fit`]. Each method reads only the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub pts: PtsTrainConfig,
    pub ets_loss: LossKind,
    /// Bin count for histogram binning and scaling-binning.
    pub bins: usize,
    /// Seed for the scaling-binning fold split; PTS uses `pts.seed`.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pts: PtsTrainConfig::default(),
            ets_loss: LossKind::Mse,
            bins: 10,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ts(TsModel),
    Ets(EtsModel),
    Pts(PtsModel),
    Histbin(HistBinModel),
    Irova(IrovaModel),
    Irm(IrmModel),
    IrovaTs(IrovaTsModel),
    Pbmc(PbmcModel),
}

impl Model {
    pub fn method(&self) -> Method {
        match self {
            Model::Ts(_) => Method::Ts,
            Model::Ets(_) => Method::Ets,
            Model::Pts(_) => Method::Pts,
            Model::Histbin(_) => Method::Histbin,
            Model::Irova(_) => Method::Irova,
            Model::Irm(_) => Method::Irm,
            Model::IrovaTs(_) => Method::IrovaTs,
            Model::Pbmc(_) => Method::Pbmc,
        }
    }

    fn apply_unchecked(&self, logits: &[f64]) -> ProbVector {
        match self {
            Model::Ts(m) => m.apply(logits),
            Model::Ets(m) => m.apply(logits),
            Model::Pts(m) => m.apply(logits),
            Model::Histbin(m) => m.apply(&softmax_unchecked(logits)),
            Model::Irova(m) => m.apply(&softmax_unchecked(logits)),
            Model::Irm(m) => m.apply(&softmax_unchecked(logits)),
            Model::IrovaTs(m) => m.apply(logits),
            Model::Pbmc(m) => m.apply(logits),
        }
    }
}

/// A fitted model together with the class count it was fitted for.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator {
    num_classes: usize,
    model: Model,
}

impl Calibrator {
    pub fn new(num_classes: usize, model: Model) -> Result<Self> {
        if num_classes < 2 {
            return Err(CalibError::argument("a calibrator needs at least 2 classes"));
        }
        let consistent = match &model {
            Model::Pts(m) => m.num_classes() == num_classes,
            Model::Irova(m) => m.num_classes() == num_classes,
            Model::IrovaTs(m) => m.irova.num_classes() == num_classes,
            _ => true,
        };
        if !consistent {
            return Err(CalibError::argument(format!("model does not match {num_classes} classes")));
        }
        Ok(Self { num_classes, model })
    }

    pub fn method(&self) -> Method {
        self.model.method()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Number of fitted real-valued parameters.
    pub fn num_params(&self) -> usize {
        let step = |f: &crate::binning::StepFunction| 2 * f.knots.len();
        match &self.model {
            Model::Ts(_) => 1,
            Model::Ets(_) => 4,
            Model::Pts(m) => m.mlp().num_params(),
            Model::Histbin(m) => m.edges.len() + m.scores.len(),
            Model::Irova(m) => m.maps.iter().map(step).sum(),
            Model::Irm(m) => step(&m.map) + 1,
            Model::IrovaTs(m) => 1 + m.irova.maps.iter().map(step).sum::<usize>(),
            Model::Pbmc(m) => 1 + m.edges.len() + m.bin_means.len(),
        }
    }

    pub fn apply(&self, logits: &[f64]) -> Result<ProbVector> {
        if logits.len() != self.num_classes {
            return Err(CalibError::input(format!(
                "expected {} logits, got {}",
                self.num_classes,
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(CalibError::input("logits must be finite"));
        }
        Ok(self.model.apply_unchecked(logits))
    }

    /// Calibrated probabilities for every record, in order.
    pub fn calibrate(&self, dataset: &Dataset) -> Result<Vec<ProbVector>> {
        if dataset.num_classes() != self.num_classes {
            return Err(CalibError::input(format!(
                "calibrator expects {} classes, dataset has {}",
                self.num_classes,
                dataset.num_classes()
            )));
        }
        Ok(dataset
            .records()
            .par_iter()
            .map(|r| self.model.apply_unchecked(r.logits()))
            .collect())
    }

    pub fn predictions(&self, dataset: &Dataset) -> Result<Vec<PredictionRecord>> {
        Ok(self
            .calibrate(dataset)?
            .iter()
            .zip(dataset.records())
            .map(|(p, r)| PredictionRecord::from_probs(p, r.label()))
            .collect())
    }
}

pub fn fit(method: Method, dataset: &Dataset, options: &FitOptions) -> Result<Calibrator> {
    let model = match method {
        Method::Ts => Model::Ts(fit_ts(dataset)?),
        Method::Ets => Model::Ets(fit_ets(dataset, options.ets_loss)?),
        Method::Pts => Model::Pts(fit_pts(dataset, &options.pts)?),
        Method::Histbin => Model::Histbin(fit_hist_binning(&dataset.base_predictions(), options.bins)?),
        Method::Irova => Model::Irova(fit_irova(dataset)?),
        Method::Irm => Model::Irm(fit_irm(dataset)?),
        Method::IrovaTs => Model::IrovaTs(fit_irova_ts(dataset)?),
        Method::Pbmc => Model::Pbmc(fit_pbmc_with(dataset, options.bins, options.seed)?),
    };
    Calibrator::new(dataset.num_classes(), model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LogitRecord;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("platt".parse::<Method>().is_err());
    }

    #[test]
    fn apply_checks_width() {
        let cal = Calibrator::new(3, Model::Ts(TsModel::new(2.0).unwrap())).unwrap();
        assert!(cal.apply(&[1.0, 2.0]).is_err());
        assert!(cal.apply(&[1.0, f64::NAN, 0.0]).is_err());
        let p = cal.apply(&[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.top_label().0, 0);
        let ds = Dataset::new(vec![LogitRecord::new(0, vec![1.0, 0.0]).unwrap()]).unwrap();
        assert!(cal.calibrate(&ds).is_err());
    }
}
