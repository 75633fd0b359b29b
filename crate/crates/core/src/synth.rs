//! Seeded generators of miscalibrated logit datasets with known
//! ground-truth calibration maps.
//!
//! True logits `z*` are drawn from a Gaussian mixture: a latent class `c` is
//! chosen uniformly and `z*_j = mu * [j == c] + N(0, 1)`. Labels are sampled
//! from `softmax(z*)`, so `softmax(z*)` is exactly calibrated. The emitted
//! logits are `z = T*(z*) * z*` for a regime-specific temperature `T*`
//! depending on the top-two gap `g* = z*_(1) - z*_(2)`:
//!
//! * `global_temp`: `T* = s`
//! * `heteroscedastic`: `T* = b + a * g*`
//! * `overconfident_tail`: `T* = b + a * g*^2`
//!
//! Because `z`'s top-two gap is `T* g*`, and `T* g*` is strictly increasing
//! in `g*`, `T*` is recoverable from the emitted logits alone; see
//! [`oracle_temperature`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::scaling::T_MIN;
use crate::types::{softmax_into, Dataset, LogitRecord, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    GlobalTemp { scale: f64 },
    Heteroscedastic { base: f64, slope: f64 },
    OverconfidentTail { base: f64, slope: f64 },
}

impl Regime {
    /// Temperature applied to true logits with top-two gap `gap`.
    pub fn forward_temperature(&self, gap: f64) -> f64 {
        match *self {
            Regime::GlobalTemp { scale } => scale,
            Regime::Heteroscedastic { base, slope } => base + slope * gap,
            Regime::OverconfidentTail { base, slope } => base + slope * gap * gap,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Regime::GlobalTemp { scale } => scale > 0.0 && scale.is_finite(),
            Regime::Heteroscedastic { base, slope } | Regime::OverconfidentTail { base, slope } => {
                base >= T_MIN && slope >= 0.0 && base.is_finite() && slope.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CalibError::argument(format!("invalid regime parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub regime: Regime,
    /// Offset of the latent class's mean logit.
    pub concentration: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub const DEFAULT_CONCENTRATION: f64 = 4.0;

    pub fn new(num_classes: usize, num_samples: usize, regime: Regime, seed: u64) -> Self {
        Self {
            num_classes,
            num_samples,
            regime,
            concentration: Self::DEFAULT_CONCENTRATION,
            seed,
        }
    }

    pub fn global(num_samples: usize, scale: f64, seed: u64) -> Self {
        Self::new(10, num_samples, Regime::GlobalTemp { scale }, seed)
    }

    pub fn heteroscedastic(num_samples: usize, base: f64, slope: f64, seed: u64) -> Self {
        Self::new(10, num_samples, Regime::Heteroscedastic { base, slope }, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(CalibError::argument("num_samples must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(CalibError::argument("num_classes must be >= 2"));
        }
        if !self.concentration.is_finite() {
            return Err(CalibError::argument("concentration must be finite"));
        }
        self.regime.validate()
    }
}

/// A generated dataset with the label-generating probabilities and the
/// applied temperatures attached.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub true_probs: Vec<ProbVector>,
    pub temperatures: Vec<f64>,
    pub regime: Regime,
}

impl SynthDataset {
    pub fn select(&self, indices: &[usize]) -> Result<SynthDataset> {
        Ok(SynthDataset {
            dataset: self.dataset.select(indices)?,
            true_probs: indices.iter().map(|&i| self.true_probs[i].clone()).collect(),
            temperatures: indices.iter().map(|&i| self.temperatures[i]).collect(),
            regime: self.regime,
        })
    }
}

fn top_two_gap(z: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in z {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let c = config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.num_samples);
    let mut true_probs = Vec::with_capacity(config.num_samples);
    let mut temperatures = Vec::with_capacity(config.num_samples);
    let mut probs = vec![0.0; c];

    for _ in 0..config.num_samples {
        let latent = rng.gen_range(0..c);
        let z_true: Vec<f64> = (0..c)
            .map(|j| {
                let noise: f64 = rng.sample(StandardNormal);
                noise + if j == latent { config.concentration } else { 0.0 }
            })
            .collect();
        softmax_into(&z_true, 1.0, &mut probs);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut label = c - 1;
        for (j, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = j;
                break;
            }
        }
        let t = config.regime.forward_temperature(top_two_gap(&z_true));
        let z: Vec<f64> = z_true.iter().map(|v| v * t).collect();
        records.push(LogitRecord::new(label, z)?);
        true_probs.push(ProbVector::from_vec_unchecked(probs.clone()));
        temperatures.push(t);
    }

    Ok(SynthDataset {
        dataset: Dataset::new(records)?,
        true_probs,
        temperatures,
        regime: config.regime,
    })
}

/// The regime's inverse map: the temperature that turns emitted logits back
/// into the label-generating ones.
pub fn oracle_temperature(regime: &Regime, logits: &[f64]) -> f64 {
    let gap = top_two_gap(logits);
    match *regime {
        Regime::GlobalTemp { scale } => scale,
        Regime::Heteroscedastic { base, slope } => {
            // Positive root of slope g^2 + base g - gap = 0.
            let g = 2.0 * gap / (base + (base * base + 4.0 * slope * gap).sqrt());
            base + slope * g
        }
        Regime::OverconfidentTail { base, slope } => {
            // slope g^3 + base g - gap = 0 is increasing and convex on g >= 0;
            // Newton from the right of the root decreases monotonically.
            let mut g = gap / base;
            for _ in 0..100 {
                let f = slope * g * g * g + base * g - gap;
                let next = g - f / (3.0 * slope * g * g + base);
                if !(next < g) {
                    break;
                }
                g = next;
            }
            base + slope * g * g
        }
    }
}

/// Calibrated probabilities under the oracle map.
pub fn oracle_probs(regime: &Regime, logits: &[f64]) -> ProbVector {
    let t = oracle_temperature(regime, logits);
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, t, &mut out);
    ProbVector::from_vec_unchecked(out)
}

/// Seeded shuffle followed by contiguous slices of `round(f * N)` indices
/// for each fraction `f`.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(CalibError::argument("split fractions must be positive"));
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(CalibError::argument("split fractions sum to more than 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for &f in fractions {
        let len = ((f * n as f64).round() as usize).min(n - start);
        if len == 0 {
            return Err(CalibError::argument(format!("fraction {f} of {n} records is empty")));
        }
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    split_indices(dataset.len(), fractions, seed)?
        .iter()
        .map(|idx| dataset.select(idx))
        .collect()
}
