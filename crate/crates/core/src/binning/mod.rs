//! Non-parametric calibrators on softmax probabilities: histogram binning,
//! one-vs-all and accuracy-preserving isotonic regression, the TS+isotonic
//! composite, and scaling-binning.

mod histbin;
mod isotonic;
mod pav;
mod pbmc;

pub use histbin::{fit_hist_binning, HistBinModel};
pub use isotonic::{fit_irm, fit_irova, fit_irova_ts, IrmModel, IrovaModel, IrovaTsModel, IRM_STRICTNESS};
pub use pav::{pav, StepFunction};
pub use pbmc::{fit_pbmc, fit_pbmc_with, PbmcModel, PBMC_DEFAULT_BINS, PBMC_DEFAULT_SEED};

use crate::types::{argmax, ProbVector};

/// Replaces the top-label probability of `probs` by `q` and redistributes
/// `1 - q` over the other classes in proportion to their current mass. When
/// that would push another class to `q` or above, the remainder is blended
/// towards uniform just enough to keep every other class strictly below `q`
/// (possible whenever `q > 1/C`).
pub(crate) fn replace_top(probs: &[f64], q: f64) -> ProbVector {
    let c = probs.len();
    if c == 1 {
        return ProbVector::from_vec_unchecked(vec![1.0]);
    }
    let top = argmax(probs);
    let rest = 1.0 - q;
    let others = (c - 1) as f64;
    let rest_mass: f64 = probs.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, p)| p).sum();
    let share = |p: f64| if rest_mass > 0.0 { p / rest_mass } else { 1.0 / others };
    let max_share = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, &p)| share(p))
        .fold(0.0, f64::max);

    let lambda = if rest * max_share < q || rest / others >= q {
        1.0
    } else {
        // Largest other entry is rest * (l * max_share + (1 - l) / (C - 1)).
        ((q / rest - 1.0 / others) / (max_share - 1.0 / others) * (1.0 - 1e-9)).clamp(0.0, 1.0)
    };
    let mut out: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == top { q } else { rest * (lambda * share(p) + (1.0 - lambda) / others) })
        .collect();
    if q > 1.0 / c as f64 {
        keep_top(&mut out, top);
    }
    ProbVector::from_vec_unchecked(out)
}

/// Guards against ties created by rounding: every entry before `top` is kept
/// strictly below `out[top]` and every entry after it at most equal, so the
/// lowest-index argmax stays at `top`.
pub(crate) fn keep_top(out: &mut [f64], top: usize) {
    let t = out[top];
    for (j, v) in out.iter_mut().enumerate() {
        if j < top && *v >= t {
            *v = next_below(t);
        } else if j > top && *v > t {
            *v = t;
        }
    }
}

fn next_below(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        0.0
    }
}
