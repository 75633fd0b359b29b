//! Parameterized temperature scaling.
//!
//! A small ReLU network reads the top-k logits in decreasing order and
//! outputs a raw score `r`; the per-prediction temperature is
//! `t_min + softplus(r)`, so it is always positive and dividing the logits
//! by it never changes their ranking.
//!
//! Training draws seeded minibatches, computes the calibrated top-label
//! confidence `Q` of every member, places the members into equal-width
//! bins by `Q`, and takes an Adam step on the binned squared gap
//! `sum_m |B_m|/n (acc(B_m) - mean Q(B_m))^2`. Bin memberships and bin
//! accuracies are treated as constants for the step; the gradient flows
//! through the per-bin mean of `Q` only.

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ts::fit_ts;
use super::{sigmoid, softplus, softplus_inverse, LossKind};
use crate::error::{CalibError, Result};
use crate::metrics::{binned_gap, equal_width_bin, GapNorm};
use crate::nn::{adam_step, AdamState, ForwardCache, Mlp, Objective};
use crate::types::{argmax, softmax_into, sorted_topk_into, Dataset, LogitRecord, ProbVector};

/// Lower bound on every predicted temperature.
pub const T_MIN: f64 = 1e-2;

/// How the temperature network starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtsInit {
    /// Hidden layers random, output weights zero, output bias set so that
    /// every prediction starts at the NLL-fitted global temperature.
    TsWarmStart,
    /// Hidden layers random, output layer zero (`T = t_min + ln 2`).
    ZeroOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtsTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub num_bins: usize,
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    pub seed: u64,
    pub topk: usize,
    pub init: PtsInit,
    /// Steps between full-data loss evaluations; the best parameters seen at
    /// an evaluation (including the initial ones) are returned.
    pub eval_every: usize,
}

impl Default for PtsTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1000,
            steps: 100_000,
            num_bins: 10,
            hidden: vec![5, 5],
            loss: LossKind::Ece,
            seed: 17,
            topk: 10,
            init: PtsInit::TsWarmStart,
            eval_every: 1000,
        }
    }
}

impl PtsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CalibError::argument(format!("PTS config: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.steps == 0 || self.num_bins == 0 || self.topk == 0 {
            return bad("batch size, steps, bins and topk must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.topk];
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtsModel {
    mlp: Mlp,
    num_classes: usize,
    t_min: f64,
    config: PtsTrainConfig,
}

impl PtsModel {
    pub fn new(mlp: Mlp, num_classes: usize, t_min: f64, config: PtsTrainConfig) -> Result<Self> {
        if num_classes < 2 {
            return Err(CalibError::argument("PTS needs at least 2 classes"));
        }
        if !(t_min > 0.0) {
            return Err(CalibError::argument("t_min must be positive"));
        }
        if mlp.input_width() != config.topk {
            return Err(CalibError::argument(format!(
                "network input width {} does not match topk {}",
                mlp.input_width(),
                config.topk
            )));
        }
        Ok(Self {
            mlp,
            num_classes,
            t_min,
            config,
        })
    }

    /// A model whose network ignores its input and always yields `temperature`.
    pub fn pinned(temperature: f64, num_classes: usize, config: PtsTrainConfig) -> Result<Self> {
        if !(temperature > T_MIN) {
            return Err(CalibError::argument(format!(
                "pinned temperature must exceed {T_MIN}, got {temperature}"
            )));
        }
        let mut mlp = Mlp::zeros(&config.layer_widths())?;
        pin_output(&mut mlp, temperature, T_MIN);
        Self::new(mlp, num_classes, T_MIN, config)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn topk(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn config(&self) -> &PtsTrainConfig {
        &self.config
    }

    pub fn temperature(&self, logits: &[f64]) -> f64 {
        let mut input = vec![0.0; self.topk()];
        sorted_topk_into(logits, &mut input);
        let mut cache = self.mlp.new_cache();
        let raw = self.mlp.forward_into(&input, &mut cache);
        self.t_min + softplus(raw)
    }

    pub fn apply(&self, logits: &[f64]) -> ProbVector {
        let t = self.temperature(logits);
        let mut out = vec![0.0; logits.len()];
        softmax_into(logits, t, &mut out);
        ProbVector::from_vec_unchecked(out)
    }
}

/// Zeroes the output layer and sets its bias so the network yields `temperature`.
fn pin_output(mlp: &mut Mlp, temperature: f64, t_min: f64) {
    let last = mlp.num_layers() - 1;
    let (w, b) = mlp.layer_mut(last);
    w.fill(0.0);
    b[0] = softplus_inverse((temperature - t_min).max(1e-6));
}

pub fn pts_temperature(logits: &[f64], model: &PtsModel) -> f64 {
    model.temperature(logits)
}

pub fn apply_pts(logits: &[f64], model: &PtsModel) -> ProbVector {
    model.apply(logits)
}

/// Per-record quantities the training loop needs: the sorted top-k network
/// input, the gaps `max(z) - z_j`, and whether the argmax is correct.
#[derive(Debug, Clone)]
pub struct PtsBatch {
    topk: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    gaps: Vec<f64>,
    correct: Vec<bool>,
}

impl PtsBatch {
    pub fn from_records(records: &[LogitRecord], topk: usize) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| CalibError::input("empty PTS batch"))?;
        if topk == 0 {
            return Err(CalibError::argument("topk must be positive"));
        }
        let c = first.num_classes();
        let mut inputs = vec![0.0; records.len() * topk];
        let mut gaps = Vec::with_capacity(records.len() * c);
        let mut correct = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.num_classes() != c {
                return Err(CalibError::input("records in a batch must share the class count"));
            }
            let z = r.logits();
            sorted_topk_into(z, &mut inputs[i * topk..(i + 1) * topk]);
            let top = argmax(z);
            gaps.extend(z.iter().map(|&v| z[top] - v));
            correct.push(top == r.label());
        }
        Ok(Self {
            topk,
            num_classes: c,
            inputs,
            gaps,
            correct,
        })
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.topk..(i + 1) * self.topk]
    }

    fn gaps(&self, i: usize) -> &[f64] {
        &self.gaps[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Top-label confidence at raw network output `raw`, and its derivative
/// with respect to `raw`.
fn confidence_and_slope(raw: f64, gaps: &[f64], t_min: f64) -> (f64, f64) {
    let t = t_min + softplus(raw);
    let mut s = 0.0;
    let mut sd = 0.0;
    for &d in gaps {
        let e = (-d / t).exp();
        s += e;
        sd += e * d;
    }
    let q = 1.0 / s;
    let dq_dt = -q * q * sd / (t * t);
    (q, dq_dt * sigmoid(raw))
}

/// Bin memberships and bin accuracies held fixed for one gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBins {
    pub assignment: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub counts: Vec<usize>,
}

impl FrozenBins {
    pub fn from_confidences(confidences: &[f64], correct: &[bool], num_bins: usize) -> Self {
        let mut counts = vec![0usize; num_bins];
        let mut hits = vec![0usize; num_bins];
        let assignment: Vec<usize> = confidences
            .iter()
            .zip(correct)
            .map(|(&q, &y)| {
                let b = equal_width_bin(q, num_bins);
                counts[b] += 1;
                hits[b] += y as usize;
                b
            })
            .collect();
        let accuracy = counts
            .iter()
            .zip(&hits)
            .map(|(&n, &h)| if n > 0 { h as f64 / n as f64 } else { 0.0 })
            .collect();
        Self {
            assignment,
            accuracy,
            counts,
        }
    }

    /// Binned squared gap and its gradient with respect to each confidence.
    fn loss_and_upstream(&self, confidences: &[f64], upstream: &mut [f64]) -> f64 {
        let n = confidences.len() as f64;
        let mut q_sum = vec![0.0; self.counts.len()];
        for (&b, &q) in self.assignment.iter().zip(confidences) {
            q_sum[b] += q;
        }
        let mut loss = 0.0;
        let mut gap = vec![0.0; self.counts.len()];
        for b in 0..self.counts.len() {
            if self.counts[b] > 0 {
                let k = self.counts[b] as f64;
                gap[b] = q_sum[b] / k - self.accuracy[b];
                loss += k / n * gap[b] * gap[b];
            }
        }
        for (u, &b) in upstream.iter_mut().zip(&self.assignment) {
            *u = 2.0 * gap[b] / n;
        }
        loss
    }
}

fn mse_loss_and_upstream(confidences: &[f64], correct: &[bool], upstream: &mut [f64]) -> f64 {
    let n = confidences.len() as f64;
    let mut loss = 0.0;
    for ((u, &q), &y) in upstream.iter_mut().zip(confidences).zip(correct) {
        let r = q - y as u8 as f64;
        loss += r * r;
        *u = 2.0 * r / n;
    }
    loss / n
}

/// The binned squared-gap loss on a fixed batch with bins frozen at some
/// reference network, as a differentiable function of the network weights.
pub struct PtsEceObjective {
    batch: PtsBatch,
    bins: FrozenBins,
    t_min: f64,
}

impl PtsEceObjective {
    pub fn freeze(reference: &Mlp, batch: PtsBatch, num_bins: usize, t_min: f64) -> Self {
        let q: Vec<f64> = (0..batch.len())
            .map(|i| {
                let raw = reference.forward(batch.input(i)).expect("input width").0;
                confidence_and_slope(raw, batch.gaps(i), t_min).0
            })
            .collect();
        let bins = FrozenBins::from_confidences(&q, &batch.correct, num_bins);
        Self { batch, bins, t_min }
    }

    pub fn frozen_bins(&self) -> &FrozenBins {
        &self.bins
    }

    fn evaluate(&self, mlp: &Mlp, grad: Option<&mut [f64]>) -> f64 {
        let n = self.batch.len();
        let mut caches: Vec<ForwardCache> = (0..n).map(|_| mlp.new_cache()).collect();
        let mut q = vec![0.0; n];
        let mut slope = vec![0.0; n];
        for i in 0..n {
            let raw = mlp.forward_into(self.batch.input(i), &mut caches[i]);
            (q[i], slope[i]) = confidence_and_slope(raw, self.batch.gaps(i), self.t_min);
        }
        let mut upstream = vec![0.0; n];
        let loss = self.bins.loss_and_upstream(&q, &mut upstream);
        if let Some(grad) = grad {
            grad.fill(0.0);
            for i in 0..n {
                mlp.backward_accumulate(&mut caches[i], upstream[i] * slope[i], grad, None);
            }
        }
        loss
    }
}

impl Objective for PtsEceObjective {
    fn value(&self, mlp: &Mlp) -> f64 {
        self.evaluate(mlp, None)
    }

    fn gradient(&self, mlp: &Mlp) -> Vec<f64> {
        let mut g = vec![0.0; mlp.num_params()];
        self.evaluate(mlp, Some(&mut g));
        g
    }
}

fn full_data_loss(mlp: &Mlp, data: &PtsBatch, t_min: f64, loss: LossKind, num_bins: usize) -> f64 {
    let mut cache = mlp.new_cache();
    let q: Vec<f64> = (0..data.len())
        .map(|i| {
            let raw = mlp.forward_into(data.input(i), &mut cache);
            confidence_and_slope(raw, data.gaps(i), t_min).0
        })
        .collect();
    match loss {
        LossKind::Ece => binned_gap(&q, &data.correct, num_bins, GapNorm::Squared),
        LossKind::Mse => {
            let mut scratch = vec![0.0; q.len()];
            mse_loss_and_upstream(&q, &data.correct, &mut scratch)
        }
    }
}

/// Training objective of `model` over a whole dataset, with bins taken from
/// the model's own confidences.
pub fn pts_training_loss(model: &PtsModel, dataset: &Dataset, loss: LossKind, num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(CalibError::argument("number of bins must be >= 1"));
    }
    let data = PtsBatch::from_records(dataset.records(), model.topk())?;
    Ok(full_data_loss(&model.mlp, &data, model.t_min, loss, num_bins))
}

/// Fits the temperature network with `config.steps` Adam steps on seeded
/// minibatches drawn uniformly with replacement.
pub fn fit_pts(dataset: &Dataset, config: &PtsTrainConfig) -> Result<PtsModel> {
    config.validate()?;
    let data = PtsBatch::from_records(dataset.records(), config.topk)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = config.layer_widths();
    let mut mlp = Mlp::glorot(&widths, &mut rng)?;
    let start_t = match config.init {
        PtsInit::TsWarmStart => fit_ts(dataset)?.temperature.max(2.0 * T_MIN),
        PtsInit::ZeroOutput => T_MIN + std::f64::consts::LN_2,
    };
    pin_output(&mut mlp, start_t, T_MIN);

    let beta = config.batch_size;
    let mut adam = AdamState::new(mlp.num_params());
    let mut caches: Vec<ForwardCache> = (0..beta).map(|_| mlp.new_cache()).collect();
    let mut picks = vec![0usize; beta];
    let mut q = vec![0.0; beta];
    let mut slope = vec![0.0; beta];
    let mut correct = vec![false; beta];
    let mut upstream = vec![0.0; beta];
    let mut grad = vec![0.0; mlp.num_params()];

    let mut best_params = mlp.params().to_vec();
    let mut best_loss = full_data_loss(&mlp, &data, T_MIN, config.loss, config.num_bins);

    for step in 1..=config.steps {
        for p in picks.iter_mut() {
            *p = rng.gen_range(0..data.len());
        }
        for (b, &i) in picks.iter().enumerate() {
            let raw = mlp.forward_into(data.input(i), &mut caches[b]);
            (q[b], slope[b]) = confidence_and_slope(raw, data.gaps(i), T_MIN);
            correct[b] = data.correct[i];
        }
        let loss = match config.loss {
            LossKind::Ece => {
                FrozenBins::from_confidences(&q, &correct, config.num_bins).loss_and_upstream(&q, &mut upstream)
            }
            LossKind::Mse => mse_loss_and_upstream(&q, &correct, &mut upstream),
        };
        if !loss.is_finite() {
            return Err(CalibError::Numerical(format!("PTS loss is {loss} at step {step}")));
        }

        grad.fill(0.0);
        for b in 0..beta {
            mlp.backward_accumulate(&mut caches[b], upstream[b] * slope[b], &mut grad, None);
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(CalibError::Numerical(format!(
                "PTS gradient of parameter {i} is {} at step {step}",
                grad[i]
            )));
        }
        adam_step(mlp.params_mut(), &grad, &mut adam, config.learning_rate);

        if step % config.eval_every == 0 || step == config.steps {
            let full = full_data_loss(&mlp, &data, T_MIN, config.loss, config.num_bins);
            debug!("pts step {step}: batch loss {loss:.6e}, full loss {full:.6e}");
            if full < best_loss {
                best_loss = full;
                best_params.copy_from_slice(mlp.params());
            }
        }
    }

    mlp.params_mut().copy_from_slice(&best_params);
    PtsModel::new(mlp, dataset.num_classes(), T_MIN, config.clone())
}
