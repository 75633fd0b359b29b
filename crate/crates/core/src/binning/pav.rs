use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Weighted least-squares nondecreasing fit by pool-adjacent-violators.
///
/// `xs` must be sorted ascending. Points sharing an `x` are pooled first, so
/// they always receive the same fitted value.
pub fn pav(xs: &[f64], ys: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if xs.len() != ys.len() || xs.len() != weights.len() {
        return Err(CalibError::argument(format!(
            "pav: lengths differ ({}, {}, {})",
            xs.len(),
            ys.len(),
            weights.len()
        )));
    }
    if xs.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(CalibError::argument("pav: xs must be sorted ascending"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(CalibError::argument("pav: weights must be positive"));
    }

    // Each block: (weighted mean, total weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(xs.len());
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        let (mut wsum, mut wy) = (0.0, 0.0);
        while j < xs.len() && xs[j] == xs[i] {
            wsum += weights[j];
            wy += weights[j] * ys[j];
            j += 1;
        }
        let mut block = (wy / wsum, wsum, j - i);
        while let Some(&(mean, w, n)) = blocks.last() {
            if mean < block.0 {
                break;
            }
            let total = w + block.1;
            block = ((mean * w + block.0 * block.1) / total, total, n + block.2);
            blocks.pop();
        }
        blocks.push(block);
        i = j;
    }

    let mut out = Vec::with_capacity(xs.len());
    for (mean, _, n) in blocks {
        out.extend(std::iter::repeat(mean).take(n));
    }
    Ok(out)
}

/// Right-continuous step function with constant extrapolation: the value at
/// `x` is the output of the largest knot `<= x`, or of the first knot when
/// `x` lies left of all knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(CalibError::argument("step function needs matching nonempty knots and values"));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CalibError::argument("step function knots must be strictly increasing"));
        }
        if values.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(CalibError::argument("step function values must be nondecreasing"));
        }
        Ok(Self { knots, values })
    }

    /// The identity on the given grid of knots.
    pub fn identity(knots: Vec<f64>) -> Result<Self> {
        let values = knots.clone();
        Self::new(knots, values)
    }

    /// Isotonic fit of `targets` against `inputs` (any order).
    pub fn fit_isotonic(inputs: &[f64], targets: &[f64]) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(CalibError::input("isotonic fit needs matching nonempty inputs and targets"));
        }
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by(|&a, &b| inputs[a].total_cmp(&inputs[b]).then(a.cmp(&b)));
        let xs: Vec<f64> = order.iter().map(|&i| inputs[i]).collect();
        let ys: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
        let fitted = pav(&xs, &ys, &vec![1.0; xs.len()])?;

        let mut knots = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        for (x, y) in xs.into_iter().zip(fitted) {
            // Keep only the first knot of every constant run.
            if values.last().map_or(true, |&v| y > v) {
                knots.push(x);
                values.push(y);
            }
        }
        Self::new(knots, values)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.knots.partition_point(|&k| k <= x);
        self.values[i.saturating_sub(1)]
    }
}
