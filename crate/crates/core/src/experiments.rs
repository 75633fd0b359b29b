//! Seeded sweeps over calibrator settings on synthetic oracles (or on
//! user-supplied validation/test files).
//!
//! * `capacity`: PTS test ECE for each hidden width, against TS.
//! * `bins`: test ECE of each method for each equal-width bin count.
//! * `data_efficiency`: test ECE when fitting on nested validation subsets.
//! * `loss_ablation`: ETS and PTS fitted with each training loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{fit, Calibrator, FitOptions, Method};
use crate::error::{CalibError, Result};
use crate::metrics::{accuracy, ece, ece_equal_mass};
use crate::scaling::LossKind;
use crate::synth::{generate, split_indices, Regime, SynthConfig};
use crate::types::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Capacity,
    Bins,
    DataEfficiency,
    LossAblation,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Capacity,
        Experiment::Bins,
        Experiment::DataEfficiency,
        Experiment::LossAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Capacity => "capacity",
            Experiment::Bins => "bins",
            Experiment::DataEfficiency => "data_efficiency",
            Experiment::LossAblation => "loss_ablation",
        }
    }

    /// Oracle used when no input files are given.
    pub fn default_regime(self) -> Regime {
        match self {
            Experiment::DataEfficiency => Regime::GlobalTemp { scale: 2.5 },
            _ => Regime::Heteroscedastic { base: 1.0, slope: 0.5 },
        }
    }

    pub fn default_methods(self) -> Vec<Method> {
        match self {
            Experiment::Capacity => vec![Method::Ts, Method::Pts],
            Experiment::Bins => vec![Method::Ts, Method::Ets, Method::Pts],
            Experiment::DataEfficiency => vec![Method::Ts, Method::Ets, Method::Pts, Method::Irova],
            Experiment::LossAblation => vec![Method::Ets, Method::Pts],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| CalibError::argument(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fit: FitOptions,
    /// Equal-width bin count of the reported ECE.
    pub eval_bins: usize,
    pub widths: Vec<usize>,
    pub bins: Vec<usize>,
    pub fractions: Vec<f64>,
    pub losses: Vec<LossKind>,
    /// Overrides the experiment's default method list.
    pub methods: Option<Vec<Method>>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            eval_bins: 10,
            widths: vec![1, 2, 5, 10, 20],
            bins: (5..=19).step_by(2).collect(),
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            losses: vec![LossKind::Mse, LossKind::Ece],
            methods: None,
            seed: 17,
        }
    }
}

/// Validation and test sets of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub val: Dataset,
    pub test: Dataset,
    pub regime: Option<Regime>,
}

impl ExperimentData {
    /// `num_val + num_test` oracle records (10 classes), split at random.
    pub fn synthetic(regime: Regime, num_val: usize, num_test: usize, seed: u64) -> Result<Self> {
        let n = num_val + num_test;
        let all = generate(&SynthConfig::new(10, n, regime, seed))?.dataset;
        let parts = split_indices(n, &[num_val as f64 / n as f64, num_test as f64 / n as f64], seed)?;
        Ok(Self {
            val: all.select(&parts[0])?,
            test: all.select(&parts[1])?,
            regime: Some(regime),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub method: String,
    /// Name of the swept setting (`width`, `bins`, `fraction`, `loss`).
    pub setting: String,
    pub value: String,
    pub num_params: usize,
    pub num_val: usize,
    pub ece: f64,
    pub ece_equal_mass: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub seed: u64,
    pub regime: Option<Regime>,
    pub num_val: usize,
    pub num_test: usize,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.into_inner().map_err(|e| CalibError::Io(e.into_error()))
    }
}

struct Job {
    method: Method,
    setting: &'static str,
    value: String,
    options: FitOptions,
    subset: Option<Vec<usize>>,
}

fn metrics_row(job: &Job, cal: &Calibrator, num_val: usize, test: &Dataset, bins: usize) -> Result<ExperimentRow> {
    let preds = cal.predictions(test)?;
    Ok(ExperimentRow {
        method: job.method.name().to_string(),
        setting: job.setting.to_string(),
        value: job.value.clone(),
        num_params: cal.num_params(),
        num_val,
        ece: ece(&preds, bins, 1)?.value,
        ece_equal_mass: ece_equal_mass(&preds, bins.min(preds.len()))?.value,
        accuracy: accuracy(&preds)?,
    })
}

fn run_jobs(jobs: Vec<Job>, data: &ExperimentData, bins: usize) -> Result<Vec<ExperimentRow>> {
    jobs.par_iter()
        .map(|job| {
            let subset;
            let val = match &job.subset {
                Some(idx) => {
                    subset = data.val.select(idx)?;
                    &subset
                }
                None => &data.val,
            };
            let cal = fit(job.method, val, &job.options)?;
            metrics_row(job, &cal, val.len(), &data.test, bins)
        })
        .collect()
}

fn losses_label(method: Method, options: &FitOptions) -> String {
    match method {
        Method::Ets => options.ets_loss.to_string(),
        Method::Pts => options.pts.loss.to_string(),
        _ => "-".to_string(),
    }
}

pub fn run_experiment(experiment: Experiment, data: &ExperimentData, config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.eval_bins == 0 {
        return Err(CalibError::argument("number of bins must be >= 1"));
    }
    let methods = config.methods.clone().unwrap_or_else(|| experiment.default_methods());
    if methods.is_empty() {
        return Err(CalibError::argument("no methods selected"));
    }
    let mut options = config.fit.clone();
    options.seed = config.seed;
    options.pts.seed = config.seed;

    let rows = match experiment {
        Experiment::Capacity => {
            if config.widths.is_empty() || config.widths.contains(&0) {
                return Err(CalibError::argument("capacity sweep needs positive widths"));
            }
            let mut jobs = Vec::new();
            for &method in &methods {
                if method == Method::Pts {
                    for &w in &config.widths {
                        let mut o = options.clone();
                        o.pts.hidden = vec![w; o.pts.hidden.len().max(1)];
                        jobs.push(Job {
                            method,
                            setting: "width",
                            value: w.to_string(),
                            options: o,
                            subset: None,
                        });
                    }
                } else {
                    jobs.push(Job {
                        method,
                        setting: "width",
                        value: "0".to_string(),
                        options: options.clone(),
                        subset: None,
                    });
                }
            }
            run_jobs(jobs, data, config.eval_bins)?
        }
        Experiment::Bins => {
            if config.bins.is_empty() || config.bins.contains(&0) {
                return Err(CalibError::argument("bin sweep needs positive bin counts"));
            }
            let fitted = methods
                .par_iter()
                .map(|&m| fit(m, &data.val, &options))
                .collect::<Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for cal in &fitted {
                for &m in &config.bins {
                    let job = Job {
                        method: cal.method(),
                        setting: "bins",
                        value: m.to_string(),
                        options: options.clone(),
                        subset: None,
                    };
                    rows.push(metrics_row(&job, cal, data.val.len(), &data.test, m)?);
                }
            }
            rows
        }
        Experiment::DataEfficiency => {
            if config.fractions.is_empty() || config.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(CalibError::argument("fractions must lie in (0, 1]"));
            }
            let n = data.val.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
            let mut jobs = Vec::new();
            for &method in &methods {
                for &f in &config.fractions {
                    let take = ((f * n as f64).round() as usize).clamp(1, n);
                    jobs.push(Job {
                        method,
                        setting: "fraction",
                        value: format!("{f}"),
                        options: options.clone(),
                        // Nested subsets: every fraction extends the smaller ones.
                        subset: Some(order[..take].to_vec()),
                    });
                }
            }
            run_jobs(jobs, data, config.eval_bins)?
        }
        Experiment::LossAblation => {
            if config.losses.is_empty() {
                return Err(CalibError::argument("loss ablation needs at least one loss"));
            }
            let mut jobs = Vec::new();
            for &method in &methods {
                for &loss in &config.losses {
                    let mut o = options.clone();
                    o.ets_loss = loss;
                    o.pts.loss = loss;
                    jobs.push(Job {
                        method,
                        setting: "loss",
                        value: losses_label(method, &o),
                        options: o,
                        subset: None,
                    });
                }
            }
            run_jobs(jobs, data, config.eval_bins)?
        }
    };

    Ok(ExperimentReport {
        experiment,
        seed: config.seed,
        regime: data.regime,
        num_val: data.val.len(),
        num_test: data.test.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.fit.pts.steps = 50;
        c.fit.pts.batch_size = 100;
        c.fit.pts.eval_every = 25;
        c
    }

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("sweep".parse::<Experiment>().is_err());
    }

    #[test]
    fn row_shapes() {
        let data = ExperimentData::synthetic(Regime::GlobalTemp { scale: 2.0 }, 600, 400, 3).unwrap();
        let mut cfg = small_config();
        cfg.widths = vec![1, 3];
        let cap = run_experiment(Experiment::Capacity, &data, &cfg).unwrap();
        assert_eq!(cap.rows.len(), 3);
        assert_eq!(cap.rows[0].method, "ts");
        assert_eq!(cap.rows[2].value, "3");

        let bins = run_experiment(Experiment::Bins, &data, &cfg).unwrap();
        assert_eq!(bins.rows.len(), 3 * 8);

        cfg.fractions = vec![0.5, 1.0];
        let eff = run_experiment(Experiment::DataEfficiency, &data, &cfg).unwrap();
        assert_eq!(eff.rows.len(), 4 * 2);
        assert_eq!(eff.rows[0].num_val, 300);
        assert_eq!(eff.rows[1].num_val, 600);

        let abl = run_experiment(Experiment::LossAblation, &data, &cfg).unwrap();
        let labels: Vec<_> = abl.rows.iter().map(|r| (r.method.as_str(), r.value.as_str())).collect();
        assert_eq!(labels, vec![("ets", "mse"), ("ets", "ece"), ("pts", "mse"), ("pts", "ece")]);

        let again = run_experiment(Experiment::LossAblation, &data, &cfg).unwrap();
        assert_eq!(abl, again);
        let csv = String::from_utf8(abl.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("method,setting,value,num_params,num_val,ece,ece_equal_mass,accuracy\n"));
    }
}
