//! Post-hoc calibration of classifier logits.

pub mod binning;
pub mod calibrator;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod report;
pub mod scaling;
pub mod synth;
pub mod types;

pub use calibrator::{fit, Calibrator, FitOptions, Method, Model};
pub use error::{CalibError, Result};
pub use types::{argmax, softmax, sorted_topk, top_label, Dataset, LogitRecord, PredictionRecord, ProbVector};
