//! Logit CSV files, model JSON files and atomic writes.
//!
//! Logit files have the header `label,z0,...,z{C-1}` and one record per row.
//! Reals are written in scientific notation with 17 significant digits so a
//! write/read/write cycle is byte-identical. Model files are JSON objects with
//! keys in sorted order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::binning::{HistBinModel, IrmModel, IrovaModel, IrovaTsModel, PbmcModel, StepFunction};
use crate::calibrator::{Calibrator, Method, Model};
use crate::error::{CalibError, Result};
use crate::nn::Mlp;
use crate::scaling::{EtsModel, PtsModel, PtsTrainConfig, TsModel};
use crate::types::{Dataset, LogitRecord, ProbVector};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Formats a real with 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CalibError::Io(e.error))?;
    Ok(())
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> CalibError {
    CalibError::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

pub fn read_logits(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let num_classes = header.len().saturating_sub(1);
    if header.get(0) != Some("label") || num_classes < 2 {
        return Err(parse_error(path, 1, "header must be label,z0,z1,... with at least two logit columns"));
    }
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("z{j}") {
            return Err(parse_error(path, 1, format!("column {} should be named z{j}, found '{name}'", j + 1)));
        }
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != num_classes + 1 {
            return Err(parse_error(
                path,
                line,
                format!("expected {} fields, found {}", num_classes + 1, row.len()),
            ));
        }
        let label: usize = row[0]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, line, format!("label '{}' is not a class index", &row[0])))?;
        if label >= num_classes {
            return Err(parse_error(path, line, format!("label {label} is not below {num_classes}")));
        }
        let mut logits = Vec::with_capacity(num_classes);
        for field in row.iter().skip(1) {
            let z: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(path, line, format!("'{field}' is not a number")))?;
            if !z.is_finite() {
                return Err(parse_error(path, line, format!("logit '{field}' is not finite")));
            }
            logits.push(z);
        }
        records.push(LogitRecord::new(label, logits).map_err(|e| parse_error(path, line, e.to_string()))?);
    }
    if records.is_empty() {
        return Err(parse_error(path, 1, "file holds no records"));
    }
    Dataset::new(records)
}

fn csv_bytes(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    writer.into_inner().map_err(|e| CalibError::Io(e.into_error()))
}

pub fn logits_to_csv(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.num_classes()).map(|j| format!("z{j}")));
    let rows = dataset.records().iter().map(|r| {
        let mut row = vec![r.label().to_string()];
        row.extend(r.logits().iter().map(|&z| format_real(z)));
        row
    });
    csv_bytes(header, rows)
}

pub fn write_logits(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &logits_to_csv(dataset)?)
}

/// Calibrated output table: `label,predicted_class,confidence,p0,...`.
pub fn probabilities_to_csv(dataset: &Dataset, probs: &[ProbVector]) -> Result<Vec<u8>> {
    let mut header = vec!["label".to_string(), "predicted_class".to_string(), "confidence".to_string()];
    header.extend((0..dataset.num_classes()).map(|j| format!("p{j}")));
    let rows = dataset.records().iter().zip(probs).map(|(r, p)| {
        let (class, conf) = p.top_label();
        let mut row = vec![r.label().to_string(), class.to_string(), format_real(conf)];
        row.extend(p.as_slice().iter().map(|&v| format_real(v)));
        row
    });
    csv_bytes(header, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: Method,
    pub version: u32,
    pub num_classes: usize,
    pub params: Value,
}

#[derive(Serialize, Deserialize)]
struct PtsParams {
    widths: Vec<usize>,
    weights: Vec<f64>,
    t_min: f64,
    config: PtsTrainConfig,
}

impl ModelFile {
    pub fn from_calibrator(cal: &Calibrator) -> Result<Self> {
        let params = match cal.model() {
            Model::Ts(m) => serde_json::to_value(m)?,
            Model::Ets(m) => serde_json::to_value(m)?,
            Model::Pts(m) => serde_json::to_value(PtsParams {
                widths: m.mlp().widths().to_vec(),
                weights: m.mlp().params().to_vec(),
                t_min: m.t_min(),
                config: m.config().clone(),
            })?,
            Model::Histbin(m) => serde_json::to_value(m)?,
            Model::Irova(m) => serde_json::to_value(m)?,
            Model::Irm(m) => serde_json::to_value(m)?,
            Model::IrovaTs(m) => serde_json::to_value(m)?,
            Model::Pbmc(m) => serde_json::to_value(m)?,
        };
        Ok(Self {
            kind: cal.method(),
            version: MODEL_FORMAT_VERSION,
            num_classes: cal.num_classes(),
            params,
        })
    }

    /// Rebuilds the calibrator, re-checking every model invariant.
    pub fn to_calibrator(&self) -> Result<Calibrator> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(CalibError::input(format!(
                "unsupported model version {} (expected {MODEL_FORMAT_VERSION})",
                self.version
            )));
        }
        let p = self.params.clone();
        let model = match self.kind {
            Method::Ts => Model::Ts(checked_ts(serde_json::from_value(p)?)?),
            Method::Ets => {
                let m: EtsModel = serde_json::from_value(p)?;
                Model::Ets(EtsModel::new(m.temperature, m.weights)?)
            }
            Method::Pts => {
                let pp: PtsParams = serde_json::from_value(p)?;
                pp.config.validate()?;
                let mlp = Mlp::from_parts(pp.widths, pp.weights)?;
                Model::Pts(PtsModel::new(mlp, self.num_classes, pp.t_min, pp.config)?)
            }
            Method::Histbin => {
                let m: HistBinModel = serde_json::from_value(p)?;
                Model::Histbin(HistBinModel::new(m.edges, m.scores)?)
            }
            Method::Irova => Model::Irova(checked_irova(serde_json::from_value(p)?)?),
            Method::Irm => {
                let m: IrmModel = serde_json::from_value(p)?;
                if !(m.strictness > 0.0) {
                    return Err(CalibError::input("IRM strictness must be positive"));
                }
                Model::Irm(IrmModel {
                    map: checked_step(m.map)?,
                    strictness: m.strictness,
                })
            }
            Method::IrovaTs => {
                let m: IrovaTsModel = serde_json::from_value(p)?;
                Model::IrovaTs(IrovaTsModel {
                    ts: checked_ts(m.ts)?,
                    irova: checked_irova(m.irova)?,
                })
            }
            Method::Pbmc => {
                let m: PbmcModel = serde_json::from_value(p)?;
                // Same shape rules as a histogram model.
                HistBinModel::new(m.edges.clone(), m.bin_means.clone())?;
                Model::Pbmc(PbmcModel {
                    ts: checked_ts(m.ts)?,
                    ..m
                })
            }
        };
        Calibrator::new(self.num_classes, model)
    }

    pub fn to_json(&self) -> Result<String> {
        // Going through `Value` sorts every object's keys.
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn checked_ts(m: TsModel) -> Result<TsModel> {
    TsModel::new(m.temperature)
}

fn checked_step(f: StepFunction) -> Result<StepFunction> {
    StepFunction::new(f.knots, f.values)
}

fn checked_irova(m: IrovaModel) -> Result<IrovaModel> {
    Ok(IrovaModel {
        maps: m.maps.into_iter().map(checked_step).collect::<Result<_>>()?,
    })
}

pub fn save_model(cal: &Calibrator, path: &Path) -> Result<()> {
    write_atomic(path, ModelFile::from_calibrator(cal)?.to_json()?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<Calibrator> {
    let text = std::fs::read_to_string(path)?;
    ModelFile::from_json(&text)?.to_calibrator()
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&serde_json::to_value(value)?)?;
    s.push('\n');
    Ok(s)
}
