//! A small fully connected network with scalar output: forward pass,
//! reverse-mode gradients, Adam updates and a finite-difference checker.
//!
//! Parameters live in one flat buffer. Layer `l` maps `widths[l]` inputs to
//! `widths[l + 1]` outputs and stores its weight matrix row-major
//! (`[out][in]`) followed by its bias vector. Hidden layers use ReLU, the
//! output layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

fn num_params_for(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(CalibError::argument("a network needs at least an input and an output layer"));
    }
    if widths.contains(&0) {
        return Err(CalibError::argument("layer widths must be positive"));
    }
    if *widths.last().unwrap() != 1 {
        return Err(CalibError::argument("the output layer must have width 1"));
    }
    Ok(())
}

impl Mlp {
    /// All weights and biases zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; num_params_for(widths)],
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn glorot<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * fan_out] {
                *p = rng.gen_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        check_widths(&widths)?;
        let expected = num_params_for(&widths);
        if params.len() != expected {
            return Err(CalibError::input(format!(
                "expected {expected} parameters for widths {widths:?}, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CalibError::input("network parameters must be finite"));
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset of layer `l`'s weights in the flat buffer.
    fn layer_offset(&self, l: usize) -> usize {
        num_params_for(&self.widths[..=l])
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.layer_offset(l);
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at_mut(fan_in * fan_out);
        (w, &mut rest[..fan_out])
    }

    pub fn new_cache(&self) -> ForwardCache {
        ForwardCache {
            activations: self.widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: self.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(f64, ForwardCache)> {
        if input.len() != self.input_width() {
            return Err(CalibError::argument(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.len()
            )));
        }
        let mut cache = self.new_cache();
        let out = self.forward_into(input, &mut cache);
        Ok((out, cache))
    }

    /// Forward pass reusing `cache`'s buffers. `input.len()` must equal the
    /// input width.
    pub(crate) fn forward_into(&self, input: &[f64], cache: &mut ForwardCache) -> f64 {
        cache.activations[0].copy_from_slice(input);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let fan_in = self.widths[l];
            let (prev, next) = cache.activations.split_at_mut(l + 1);
            let a_in = &prev[l];
            let a_out = &mut next[0];
            for (j, out) in a_out.iter_mut().enumerate() {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut s = b[j];
                for (wi, xi) in row.iter().zip(a_in) {
                    s += wi * xi;
                }
                *out = if l < last { s.max(0.0) } else { s };
            }
        }
        cache.activations[self.num_layers()][0]
    }

    /// Gradients of `upstream * output` with respect to every parameter and
    /// to the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64) -> Gradients {
        let mut params = vec![0.0; self.num_params()];
        let mut input = vec![0.0; self.input_width()];
        let mut scratch = cache.clone();
        self.backward_accumulate(&mut scratch, upstream, &mut params, Some(&mut input));
        Gradients { params, input }
    }

    /// Adds the parameter gradient of `upstream * output` into `grad`.
    /// Uses the delta buffers of `cache` as scratch space.
    pub(crate) fn backward_accumulate(
        &self,
        cache: &mut ForwardCache,
        upstream: f64,
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) {
        let n = self.num_layers();
        cache.deltas[n][0] = upstream;
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let (w, _) = self.layer(l);
            let (lower, upper) = cache.deltas.split_at_mut(l + 1);
            let delta_out = &upper[0];
            let a_in = &cache.activations[l];
            {
                let (gw, rest) = grad[off..].split_at_mut(fan_in * fan_out);
                let gb = &mut rest[..fan_out];
                for j in 0..fan_out {
                    let d = delta_out[j];
                    if d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (g, &a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
            let delta_in = &mut lower[l];
            for (i, d_in) in delta_in.iter_mut().enumerate() {
                // ReLU derivative of the layer below; zero at exactly 0.
                if l > 0 && a_in[i] <= 0.0 {
                    *d_in = 0.0;
                    continue;
                }
                let mut s = 0.0;
                for j in 0..fan_out {
                    s += w[j * fan_in + i] * delta_out[j];
                }
                *d_in = s;
            }
        }
        if let Some(ig) = input_grad {
            ig.copy_from_slice(&cache.deltas[0]);
        }
    }
}

/// Activations retained from a forward pass, plus backward scratch space.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> f64 {
        self.activations.last().unwrap()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Adam optimizer state, one moment pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "optimizer state shape mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}

/// A differentiable scalar function of the network parameters.
pub trait Objective {
    fn value(&self, mlp: &Mlp) -> f64;
    fn gradient(&self, mlp: &Mlp) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Gradients smaller than this are compared in absolute terms.
const GRAD_CHECK_FLOOR: f64 = 1e-8;

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `objective.gradient` against central differences with step `h`
/// on every parameter.
pub fn grad_check<O: Objective + ?Sized>(mlp: &Mlp, objective: &O, h: f64, tolerance: f64) -> GradCheckReport {
    let analytic = objective.gradient(mlp);
    let mut probe = mlp.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
        tolerance,
        passed: true,
    };
    for i in 0..mlp.num_params() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = objective.value(&probe);
        probe.params[i] = orig - h;
        let down = objective.value(&probe);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_param = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}
