use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{keep_top, StepFunction};
use crate::error::{CalibError, Result};
use crate::scaling::{fit_ts, TsModel};
use crate::types::{argmax, softmax_unchecked, Dataset, ProbVector};

/// Slope added to the shared isotonic map so it becomes strictly increasing.
pub const IRM_STRICTNESS: f64 = 1e-6;

/// One isotonic map per class, fitted one-vs-all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrovaModel {
    pub maps: Vec<StepFunction>,
}

impl IrovaModel {
    pub fn num_classes(&self) -> usize {
        self.maps.len()
    }

    pub fn apply(&self, probs: &ProbVector) -> ProbVector {
        let scores: Vec<f64> = self.maps.iter().zip(probs.as_slice()).map(|(f, &p)| f.eval(p)).collect();
        let sum: f64 = scores.iter().sum();
        let c = scores.len() as f64;
        let out = if sum > 0.0 {
            scores.into_iter().map(|s| s / sum).collect()
        } else {
            vec![1.0 / c; scores.len()]
        };
        ProbVector::from_vec_unchecked(out)
    }
}

fn fit_irova_on(probs: &[ProbVector], labels: &[usize], num_classes: usize) -> Result<IrovaModel> {
    if probs.is_empty() {
        return Err(CalibError::input("isotonic calibration needs at least one record"));
    }
    let maps = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            let xs: Vec<f64> = probs.iter().map(|p| p.as_slice()[c]).collect();
            let ys: Vec<f64> = labels.iter().map(|&y| (y == c) as u8 as f64).collect();
            StepFunction::fit_isotonic(&xs, &ys)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IrovaModel { maps })
}

fn softmax_all(dataset: &Dataset) -> (Vec<ProbVector>, Vec<usize>) {
    dataset
        .records()
        .iter()
        .map(|r| (softmax_unchecked(r.logits()), r.label()))
        .unzip()
}

pub fn fit_irova(dataset: &Dataset) -> Result<IrovaModel> {
    let (probs, labels) = softmax_all(dataset);
    fit_irova_on(&probs, &labels, dataset.num_classes())
}

/// A single isotonic map shared by all classes plus a small linear term,
/// which keeps the within-sample ranking of class scores intact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrmModel {
    pub map: StepFunction,
    pub strictness: f64,
}

impl IrmModel {
    pub fn apply(&self, probs: &ProbVector) -> ProbVector {
        let p = probs.as_slice();
        let mut out: Vec<f64> = p.iter().map(|&v| self.map.eval(v) + self.strictness * v).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        keep_top(&mut out, argmax(p));
        ProbVector::from_vec_unchecked(out)
    }
}

pub fn fit_irm(dataset: &Dataset) -> Result<IrmModel> {
    if dataset.is_empty() {
        return Err(CalibError::input("isotonic calibration needs at least one record"));
    }
    let c = dataset.num_classes();
    let mut xs = Vec::with_capacity(dataset.len() * c);
    let mut ys = Vec::with_capacity(dataset.len() * c);
    for r in dataset.records() {
        let p = softmax_unchecked(r.logits());
        for (j, &v) in p.as_slice().iter().enumerate() {
            xs.push(v);
            ys.push((j == r.label()) as u8 as f64);
        }
    }
    Ok(IrmModel {
        map: StepFunction::fit_isotonic(&xs, &ys)?,
        strictness: IRM_STRICTNESS,
    })
}

/// Temperature scaling followed by one-vs-all isotonic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrovaTsModel {
    pub ts: TsModel,
    pub irova: IrovaModel,
}

impl IrovaTsModel {
    pub fn apply(&self, logits: &[f64]) -> ProbVector {
        self.irova.apply(&self.ts.apply(logits))
    }
}

pub fn fit_irova_ts(dataset: &Dataset) -> Result<IrovaTsModel> {
    let ts = fit_ts(dataset)?;
    let (probs, labels): (Vec<_>, Vec<_>) = dataset.records().iter().map(|r| (ts.apply(r.logits()), r.label())).unzip();
    let irova = fit_irova_on(&probs, &labels, dataset.num_classes())?;
    Ok(IrovaTsModel { ts, irova })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LogitRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(rows: &[(usize, [f64; 3])]) -> Dataset {
        Dataset::new(rows.iter().map(|(y, z)| LogitRecord::new(*y, z.to_vec()).unwrap()).collect()).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Dataset {
        let recs = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
                LogitRecord::new(rng.gen_range(0..c), z).unwrap()
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn irova_can_change_predictions() {
        // Class 0 wins at moderate scores but is almost never the label, while
        // class 1 at the same scores usually is.
        let mut rows = Vec::new();
        for _ in 0..20 {
            rows.push((1, [1.0, 0.6, 0.0]));
            rows.push((2, [1.0, 0.6, 0.0]));
        }
        for _ in 0..5 {
            rows.push((0, [3.0, 0.0, 0.0]));
        }
        let ds = dataset(&rows);
        let model = fit_irova(&ds).unwrap();
        let changed = ds
            .records()
            .iter()
            .filter(|r| {
                let q = model.apply(&softmax_unchecked(r.logits()));
                argmax(q.as_slice()) != r.predicted_class()
            })
            .count();
        assert!(changed > 0);
        let before = ds.records().iter().filter(|r| r.is_correct()).count();
        let after = ds
            .records()
            .iter()
            .filter(|r| argmax(model.apply(&softmax_unchecked(r.logits())).as_slice()) == r.label())
            .count();
        assert_ne!(before, after);
    }

    #[test]
    fn irova_uniform_fallback() {
        // No record of class 2 is ever the label, and classes 0 and 1 only
        // appear with high scores, so low scores map to zero everywhere.
        let ds = dataset(&[(0, [5.0, 0.0, 0.0]), (1, [0.0, 5.0, 0.0])]);
        let model = fit_irova(&ds).unwrap();
        let q = model.apply(&ProbVector::new(vec![0.0, 0.0, 1.0]).unwrap());
        assert_eq!(q.as_slice(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn irm_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ds = random_dataset(&mut rng, 2000, 5);
        let model = fit_irm(&ds).unwrap();
        assert!(model.map.values.windows(2).all(|w| w[0] <= w[1]));
        for _ in 0..100_000 {
            let c = rng.gen_range(2..8);
            let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let p = softmax_unchecked(&z);
            let q = model.apply(&p);
            assert_eq!(argmax(q.as_slice()), argmax(&z));
            assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn irova_ts_chains_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let ds = random_dataset(&mut rng, 500, 4);
        let model = fit_irova_ts(&ds).unwrap();
        for r in ds.records() {
            let a = model.apply(r.logits());
            let b = model.irova.apply(&model.ts.apply(r.logits()));
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }

        // An identity isotonic stage reduces the composite to TS.
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let ident = IrovaTsModel {
            ts: model.ts,
            irova: IrovaModel {
                maps: vec![StepFunction::identity(grid).unwrap(); 4],
            },
        };
        let z = [0.25, 0.5, 0.75, 1.0];
        let ts_probs = model.ts.apply(&z);
        let composite = ident.apply(&z);
        for (x, y) in composite.as_slice().iter().zip(ts_probs.as_slice()) {
            // The grid identity is exact only at the knots.
            assert!((x - y).abs() <= 2e-3);
        }
        let on_grid = ProbVector::new(vec![0.125, 0.25, 0.125, 0.5]).unwrap();
        assert_eq!(ident.irova.apply(&on_grid), on_grid);
    }

    #[test]
    fn errors_on_empty_probs() {
        assert!(fit_irova_on(&[], &[], 3).is_err());
    }
}
