use serde::{Deserialize, Serialize};

use super::ts::{fit_ts, TsModel};
use super::LossKind;
use crate::error::{CalibError, Result};
use crate::metrics::{binned_gap, GapNorm};
use crate::types::{argmax, softmax_into, Dataset, ProbVector};

const GRID_STEPS: usize = 100;
const REFINE_STEP: f64 = 1e-3;
const REFINE_MAX_ITERS: usize = 10_000;
const DEFAULT_LOSS_BINS: usize = 10;

/// Simplex-weighted mix of `softmax(z / T)`, `softmax(z)` and the uniform
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtsModel {
    pub temperature: f64,
    pub weights: [f64; 3],
}

impl EtsModel {
    pub fn new(temperature: f64, weights: [f64; 3]) -> Result<Self> {
        TsModel::new(temperature)?;
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(CalibError::argument(format!("ensemble weights must be >= 0, got {weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CalibError::argument(format!("ensemble weights sum to {sum}")));
        }
        Ok(Self { temperature, weights })
    }

    pub fn apply(&self, logits: &[f64]) -> ProbVector {
        let c = logits.len();
        let mut scaled = vec![0.0; c];
        let mut plain = vec![0.0; c];
        softmax_into(logits, self.temperature, &mut scaled);
        softmax_into(logits, 1.0, &mut plain);
        let [w1, w2, w3] = self.weights;
        let uniform = 1.0 / c as f64;
        let out = scaled
            .iter()
            .zip(&plain)
            .map(|(a, b)| w1 * a + w2 * b + w3 * uniform)
            .collect();
        ProbVector::from_vec_unchecked(out)
    }
}

pub fn apply_ets(logits: &[f64], model: &EtsModel) -> ProbVector {
    model.apply(logits)
}

/// Loss over the weight simplex, evaluated from per-sample summaries.
enum WeightLoss {
    /// Quadratic form `(w' G w - 2 h' w + n) / n` of the one-hot squared error.
    Mse { gram: [[f64; 3]; 3], linear: [f64; 3], n: f64 },
    /// Binned squared gap on the top-label confidence.
    Ece {
        tops: Vec<[f64; 3]>,
        correct: Vec<bool>,
        bins: usize,
        scratch: std::cell::RefCell<Vec<f64>>,
    },
}

impl WeightLoss {
    fn build(dataset: &Dataset, temperature: f64, loss: LossKind, bins: usize) -> Self {
        let c = dataset.num_classes();
        let uniform = 1.0 / c as f64;
        let mut scaled = vec![0.0; c];
        let mut plain = vec![0.0; c];
        match loss {
            LossKind::Mse => {
                let mut gram = [[0.0; 3]; 3];
                let mut linear = [0.0; 3];
                for r in dataset.records() {
                    softmax_into(r.logits(), temperature, &mut scaled);
                    softmax_into(r.logits(), 1.0, &mut plain);
                    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                    let (aa, ab, bb) = (dot(&scaled, &scaled), dot(&scaled, &plain), dot(&plain, &plain));
                    // Any probability vector dotted with the uniform one gives 1/C.
                    let (au, bu, uu) = (uniform, uniform, uniform);
                    gram[0][0] += aa;
                    gram[0][1] += ab;
                    gram[0][2] += au;
                    gram[1][1] += bb;
                    gram[1][2] += bu;
                    gram[2][2] += uu;
                    let y = r.label();
                    linear[0] += scaled[y];
                    linear[1] += plain[y];
                    linear[2] += uniform;
                }
                gram[1][0] = gram[0][1];
                gram[2][0] = gram[0][2];
                gram[2][1] = gram[1][2];
                WeightLoss::Mse {
                    gram,
                    linear,
                    n: dataset.len() as f64,
                }
            }
            LossKind::Ece => {
                let mut tops = Vec::with_capacity(dataset.len());
                let mut correct = Vec::with_capacity(dataset.len());
                for r in dataset.records() {
                    softmax_into(r.logits(), temperature, &mut scaled);
                    softmax_into(r.logits(), 1.0, &mut plain);
                    let top = argmax(r.logits());
                    tops.push([scaled[top], plain[top], uniform]);
                    correct.push(top == r.label());
                }
                let n = tops.len();
                WeightLoss::Ece {
                    tops,
                    correct,
                    bins,
                    scratch: std::cell::RefCell::new(vec![0.0; n]),
                }
            }
        }
    }

    fn eval(&self, w: [f64; 3]) -> f64 {
        match self {
            WeightLoss::Mse { gram, linear, n } => {
                let mut quad = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        quad += w[i] * gram[i][j] * w[j];
                    }
                }
                let lin: f64 = (0..3).map(|i| linear[i] * w[i]).sum();
                (quad - 2.0 * lin + n) / n
            }
            WeightLoss::Ece {
                tops,
                correct,
                bins,
                scratch,
            } => {
                let mut confs = scratch.borrow_mut();
                for (c, t) in confs.iter_mut().zip(tops) {
                    *c = w[0] * t[0] + w[1] * t[1] + w[2] * t[2];
                }
                binned_gap(&confs, correct, *bins, GapNorm::Squared)
            }
        }
    }
}

fn normalize(w: [f64; 3]) -> [f64; 3] {
    let w = w.map(|v| v.max(0.0));
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Grid search over the 2-simplex at resolution 0.01, then pairwise
/// mass transfers of 0.001 until no move improves the loss.
fn minimize_on_simplex(loss: &WeightLoss) -> [f64; 3] {
    let mut best_w = [1.0, 0.0, 0.0];
    let mut best = loss.eval(best_w);
    for i in 0..=GRID_STEPS {
        for j in 0..=(GRID_STEPS - i) {
            let k = GRID_STEPS - i - j;
            let g = GRID_STEPS as f64;
            let w = [i as f64 / g, j as f64 / g, k as f64 / g];
            let v = loss.eval(w);
            if v < best {
                best = v;
                best_w = w;
            }
        }
    }

    const MOVES: [(usize, usize); 6] = [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)];
    for _ in 0..REFINE_MAX_ITERS {
        let mut improved = false;
        for &(from, to) in &MOVES {
            if best_w[from] < REFINE_STEP {
                continue;
            }
            let mut w = best_w;
            w[from] -= REFINE_STEP;
            w[to] += REFINE_STEP;
            let v = loss.eval(w);
            if v < best {
                best = v;
                best_w = w;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    normalize(best_w)
}

/// Temperature by NLL, then simplex weights minimizing `loss` (one-hot MSE
/// or the binned squared gap with 10 bins).
pub fn fit_ets(dataset: &Dataset, loss: LossKind) -> Result<EtsModel> {
    fit_ets_with_bins(dataset, loss, DEFAULT_LOSS_BINS)
}

pub fn fit_ets_with_bins(dataset: &Dataset, loss: LossKind, bins: usize) -> Result<EtsModel> {
    if bins == 0 {
        return Err(CalibError::argument("number of bins must be >= 1"));
    }
    let ts = fit_ts(dataset)?;
    let objective = WeightLoss::build(dataset, ts.temperature, loss, bins);
    let weights = minimize_on_simplex(&objective);
    EtsModel::new(ts.temperature, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::apply_temperature;
    use crate::types::LogitRecord;
    use approx::assert_abs_diff_eq;

    #[test]
    fn collapses_to_temperature_scaling() {
        let m = EtsModel::new(1.7, [1.0, 0.0, 0.0]).unwrap();
        for z in [[2.0, 0.0, -1.0], [0.3, 0.3, 5.0], [-4.0, 1.0, 1.5]] {
            let a = apply_ets(&z, &m);
            let b = apply_temperature(&z, 1.7).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_component() {
        let m = EtsModel::new(2.0, [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(apply_ets(&[3.0, 1.0, 0.0, -2.0], &m).as_slice(), &[0.25; 4]);
    }

    #[test]
    fn half_and_half_mixture() {
        let m = EtsModel::new(2.0, [0.5, 0.5, 0.0]).unwrap();
        let e = 1f64.exp();
        let e2 = 2f64.exp();
        let expected = 0.5 * (e / (e + 1.0)) + 0.5 * (e2 / (e2 + 1.0));
        let p = apply_ets(&[2.0, 0.0], &m);
        assert_abs_diff_eq!(p.as_slice()[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[0], 0.8059, epsilon = 1e-4);
        assert_abs_diff_eq!(p.as_slice()[1], 0.1941, epsilon = 1e-4);
    }

    #[test]
    fn rejects_off_simplex_weights() {
        assert!(EtsModel::new(1.0, [0.5, 0.6, 0.0]).is_err());
        assert!(EtsModel::new(1.0, [1.5, -0.5, 0.0]).is_err());
        assert!(EtsModel::new(0.0, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mse_quadratic_form_matches_direct_sum() {
        let recs = vec![
            LogitRecord::new(0, vec![2.0, 0.5, -1.0]).unwrap(),
            LogitRecord::new(2, vec![0.1, 1.5, 0.3]).unwrap(),
            LogitRecord::new(1, vec![-0.5, 0.2, 3.0]).unwrap(),
        ];
        let ds = Dataset::new(recs).unwrap();
        let loss = WeightLoss::build(&ds, 1.8, LossKind::Mse, 10);
        let w = [0.3, 0.5, 0.2];
        let m = EtsModel::new(1.8, w).unwrap();
        let direct: f64 = ds
            .records()
            .iter()
            .map(|r| {
                let p = m.apply(r.logits());
                p.as_slice()
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| (v - (c == r.label()) as u8 as f64).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(loss.eval(w), direct, epsilon = 1e-12);
    }
}
