use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::replace_top;
use crate::error::{CalibError, Result};
use crate::metrics::equal_mass_groups;
use crate::scaling::{fit_ts, TsModel};
use crate::types::{Dataset, ProbVector};

pub const PBMC_DEFAULT_BINS: usize = 10;
pub const PBMC_DEFAULT_SEED: u64 = 17;

/// Scaling-binning: temperature scaling, then the top-label confidence is
/// replaced by the mean scaled confidence of its equal-mass bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbmcModel {
    pub ts: TsModel,
    /// Inner bin boundaries; bin `m` is `(edges[m - 1], edges[m]]`.
    pub edges: Vec<f64>,
    pub bin_means: Vec<f64>,
}

impl PbmcModel {
    pub fn bin_of(&self, confidence: f64) -> usize {
        self.edges.partition_point(|&e| e < confidence)
    }

    pub fn apply(&self, logits: &[f64]) -> ProbVector {
        let scaled = self.ts.apply(logits);
        let (_, conf) = scaled.top_label();
        replace_top(scaled.as_slice(), self.bin_means[self.bin_of(conf)])
    }

    /// Bins set on `edge_fold`, bin outputs averaged on `mean_fold`, both
    /// after scaling by `ts`.
    pub fn fit_with_ts(ts: TsModel, edge_fold: &Dataset, mean_fold: &Dataset, m: usize) -> Result<Self> {
        let top_conf = |ds: &Dataset| -> Vec<f64> { ds.records().iter().map(|r| ts.apply(r.logits()).top_label().1).collect() };
        let confs = top_conf(edge_fold);
        let (order, ends) = equal_mass_groups(&confs, m)?;

        let mut edges = Vec::new();
        let mut fallback = Vec::new();
        let mut start = 0;
        let mut prev_last: Option<f64> = None;
        for end in ends {
            if end == start {
                continue;
            }
            let members = &order[start..end];
            if let Some(last) = prev_last {
                edges.push(0.5 * (last + confs[members[0]]));
            }
            fallback.push(members.iter().map(|&i| confs[i]).sum::<f64>() / members.len() as f64);
            prev_last = Some(confs[members[members.len() - 1]]);
            start = end;
        }

        let mut model = Self {
            ts,
            edges,
            bin_means: fallback.clone(),
        };
        let mut sums = vec![0.0; fallback.len()];
        let mut counts = vec![0usize; fallback.len()];
        for c in top_conf(mean_fold) {
            let b = model.bin_of(c);
            sums[b] += c;
            counts[b] += 1;
        }
        for ((mean, s), n) in model.bin_means.iter_mut().zip(sums).zip(counts) {
            // Bins the third fold never reaches keep the second fold's mean.
            if n > 0 {
                *mean = s / n as f64;
            }
        }
        Ok(model)
    }
}

pub fn fit_pbmc(dataset: &Dataset) -> Result<PbmcModel> {
    fit_pbmc_with(dataset, PBMC_DEFAULT_BINS, PBMC_DEFAULT_SEED)
}

/// Three equal folds by seeded shuffle: TS on the first, bin edges on the
/// second, bin means on the third.
pub fn fit_pbmc_with(dataset: &Dataset, m: usize, seed: u64) -> Result<PbmcModel> {
    if m == 0 {
        return Err(CalibError::argument("number of bins must be >= 1"));
    }
    let n = dataset.len();
    if n < 3 * m {
        return Err(CalibError::argument(format!(
            "scaling-binning with {m} bins needs at least {} records, got {n}",
            3 * m
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = (n / 3, 2 * n / 3);
    let ts = fit_ts(&dataset.select(&order[..a])?)?;
    PbmcModel::fit_with_ts(ts, &dataset.select(&order[a..b])?, &dataset.select(&order[b..])?, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{argmax, LogitRecord};
    use rand::Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Dataset {
        let recs = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let y = if rng.gen::<f64>() < 0.6 { argmax(&z) } else { rng.gen_range(0..c) };
                LogitRecord::new(y, z).unwrap()
            })
            .collect();
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn single_bin_maps_to_mean_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = random_dataset(&mut rng, 200, 4);
        let b = random_dataset(&mut rng, 150, 4);
        let ts = TsModel::new(1.0).unwrap();
        let model = PbmcModel::fit_with_ts(ts, &a, &b, 1).unwrap();
        let mean: f64 = b.records().iter().map(|r| ts.apply(r.logits()).top_label().1).sum::<f64>() / 150.0;
        assert_eq!(model.bin_means.len(), 1);
        assert!((model.bin_means[0] - mean).abs() < 1e-12);
        for r in a.records() {
            assert!((model.apply(r.logits()).top_label().1 - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ds = random_dataset(&mut rng, 3000, 6);
        let model = fit_pbmc(&ds).unwrap();
        assert_eq!(model.bin_means.len(), PBMC_DEFAULT_BINS);
        for _ in 0..100_000 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let q = model.apply(&z);
            assert_eq!(argmax(q.as_slice()), argmax(&z));
        }
    }

    #[test]
    fn too_few_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ds = random_dataset(&mut rng, 29, 3);
        assert!(matches!(fit_pbmc(&ds), Err(CalibError::InvalidArgument(_))));
        assert!(fit_pbmc_with(&ds, 9, 0).is_ok());
    }

    #[test]
    fn empty_third_fold_bins_fall_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let a = random_dataset(&mut rng, 100, 3);
        // The third fold has a single record, so at most one bin is refit.
        let b = random_dataset(&mut rng, 1, 3);
        let ts = TsModel::new(1.5).unwrap();
        let model = PbmcModel::fit_with_ts(ts, &a, &b, 5).unwrap();
        let only = model.bin_of(ts.apply(b.records()[0].logits()).top_label().1);
        let reference = PbmcModel::fit_with_ts(ts, &a, &a, 5).unwrap();
        for m in 0..model.bin_means.len() {
            if m != only {
                assert!((model.bin_means[m] - reference.bin_means[m]).abs() < 1e-12);
            }
        }
    }
}
