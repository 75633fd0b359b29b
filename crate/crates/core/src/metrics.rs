//! Calibration metrics: binned ECE with equal-width and equal-mass bins,
//! a kernel-smoothed ECE, accuracy, NLL and reliability-diagram rows.
//!
//! All sums run sequentially in input (or bin) order so results are
//! bitwise-reproducible for a fixed input order.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::types::{Dataset, PredictionRecord, ProbVector};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Number of evaluation points used by [`ece_kde`].
pub const KDE_GRID_POINTS: usize = 1024;

const KDE_MIN_SAMPLES: usize = 10;
const KDE_BANDWIDTH_RANGE: (f64, f64) = (1e-3, 0.1);
// Gaussian kernel is negligible beyond this many bandwidths.
const KDE_KERNEL_CUTOFF: f64 = 8.0;

/// Per-bin summary. Empty bins carry zero confidence and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin_index: usize,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BinStats {
    fn gap(&self) -> f64 {
        self.accuracy - self.mean_confidence
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    EqualWidth,
    EqualMass,
    Kde,
}

/// Degree of the per-bin gap penalty: `L1` is `|acc - conf|`, `Squared` is
/// `(acc - conf)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapNorm {
    L1,
    Squared,
}

impl GapNorm {
    pub fn from_degree(d: u32) -> Result<Self> {
        match d {
            1 => Ok(GapNorm::L1),
            2 => Ok(GapNorm::Squared),
            _ => Err(CalibError::argument(format!("norm degree must be 1 or 2, got {d}"))),
        }
    }

    pub fn apply(self, gap: f64) -> f64 {
        match self {
            GapNorm::L1 => gap.abs(),
            GapNorm::Squared => gap * gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub kind: MetricKind,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bins: Vec<BinStats>,
}

fn check_bins(m: usize) -> Result<()> {
    if m == 0 {
        return Err(CalibError::argument("number of bins must be >= 1"));
    }
    Ok(())
}

/// Bin for `confidence` under the intervals `((m-1)/M, m/M]`; zero goes to
/// the first bin.
pub(crate) fn equal_width_bin(confidence: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut b = ((confidence * mf).ceil() as i64 - 1).clamp(0, m as i64 - 1) as usize;
    // Correct for rounding in `confidence * m` against the exact edges b/M.
    while b > 0 && confidence <= b as f64 / mf {
        b -= 1;
    }
    while b + 1 < m && confidence > (b + 1) as f64 / mf {
        b += 1;
    }
    b
}

/// Assigns every prediction to one of `m` equal-width bins.
pub fn bin_equal_width(preds: &[PredictionRecord], m: usize) -> Result<Vec<BinStats>> {
    check_bins(m)?;
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut correct = vec![0usize; m];
    for p in preds {
        let b = equal_width_bin(p.confidence, m);
        count[b] += 1;
        conf_sum[b] += p.confidence;
        correct[b] += p.correct as usize;
    }
    Ok((0..m)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] > 0 {
                (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            BinStats {
                bin_index: b,
                count: count[b],
                mean_confidence,
                accuracy,
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
            }
        })
        .collect())
}

fn weighted_gap(bins: &[BinStats], total: usize, norm: GapNorm) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * norm.apply(b.gap()))
        .sum()
}

/// Equal-width binned gap over parallel confidence / correctness slices,
/// without materializing bin rows. `m` must be positive.
pub(crate) fn binned_gap(confidences: &[f64], correct: &[bool], m: usize, norm: GapNorm) -> f64 {
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut hits = vec![0usize; m];
    for (&c, &y) in confidences.iter().zip(correct) {
        let b = equal_width_bin(c, m);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += y as usize;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    for b in 0..m {
        if count[b] > 0 {
            let k = count[b] as f64;
            total += k / n * norm.apply(hits[b] as f64 / k - conf_sum[b] / k);
        }
    }
    total
}

/// Binned ECE with `m` equal-width bins and gap degree `d` (1 or 2).
pub fn ece(preds: &[PredictionRecord], m: usize, d: u32) -> Result<EceReport> {
    let norm = GapNorm::from_degree(d)?;
    let bins = bin_equal_width(preds, m)?;
    Ok(EceReport {
        kind: MetricKind::EqualWidth,
        value: weighted_gap(&bins, preds.len(), norm),
        num_bins: Some(m),
        bandwidth: None,
        bins,
    })
}

/// Sample indices sorted by `(confidence, index)`, split into at most `m`
/// contiguous groups of near-equal size. A run of identical confidences is
/// never split across two groups, so some groups may come out empty.
pub(crate) fn equal_mass_groups(confidences: &[f64], m: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    check_bins(m)?;
    let n = confidences.len();
    if n < m {
        return Err(CalibError::argument(format!(
            "equal-mass binning needs at least {m} samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));

    // ends[g] is one past the last sorted position of group g.
    let mut ends = Vec::with_capacity(m);
    let mut prev = 0;
    for g in 1..=m {
        let mut end = (g * n / m).max(prev);
        while end > 0 && end < n && confidences[order[end]] == confidences[order[end - 1]] {
            end += 1;
        }
        ends.push(end);
        prev = end;
    }
    Ok((order, ends))
}

/// ECE (d = 1) with bin edges at empirical confidence quantiles.
pub fn ece_equal_mass(preds: &[PredictionRecord], m: usize) -> Result<EceReport> {
    let confidences: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
    let (order, ends) = equal_mass_groups(&confidences, m)?;
    let mut bins = Vec::with_capacity(m);
    let mut start = 0;
    let mut last_upper = confidences[order[0]];
    for (g, &end) in ends.iter().enumerate() {
        let members = &order[start..end];
        let stats = if members.is_empty() {
            BinStats {
                bin_index: g,
                count: 0,
                mean_confidence: 0.0,
                accuracy: 0.0,
                lower: last_upper,
                upper: last_upper,
            }
        } else {
            let count = members.len();
            let conf_sum: f64 = members.iter().map(|&i| preds[i].confidence).sum();
            let correct = members.iter().filter(|&&i| preds[i].correct).count();
            last_upper = preds[members[count - 1]].confidence;
            BinStats {
                bin_index: g,
                count,
                mean_confidence: conf_sum / count as f64,
                accuracy: correct as f64 / count as f64,
                lower: preds[members[0]].confidence,
                upper: last_upper,
            }
        };
        bins.push(stats);
        start = end;
    }
    Ok(EceReport {
        kind: MetricKind::EqualMass,
        value: weighted_gap(&bins, preds.len(), GapNorm::L1),
        num_bins: Some(m),
        bandwidth: None,
        bins,
    })
}

fn gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Rule-of-thumb bandwidth `1.06 * sd * L^(-1/5)` clamped to `[1e-3, 0.1]`.
pub fn kde_bandwidth(confidences: &[f64]) -> f64 {
    let n = confidences.len() as f64;
    let mean = confidences.iter().sum::<f64>() / n;
    let var = confidences.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (1.06 * var.sqrt() * n.powf(-0.2)).clamp(KDE_BANDWIDTH_RANGE.0, KDE_BANDWIDTH_RANGE.1)
}

/// Kernel-smoothed ECE.
///
/// Accuracy as a function of confidence is estimated with a Gaussian
/// Nadaraya-Watson smoother, the confidence density with a Gaussian KDE of
/// the same bandwidth, and `|acc(p) - p|` is integrated against the density
/// on a 1024-point grid spanning the observed confidences. The density is
/// renormalized over the grid so mass leaking past the range ends is not
/// lost.
pub fn ece_kde(preds: &[PredictionRecord]) -> Result<EceReport> {
    if preds.len() < KDE_MIN_SAMPLES {
        return Err(CalibError::argument(format!(
            "kernel ECE needs at least {KDE_MIN_SAMPLES} predictions, got {}",
            preds.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = preds
        .iter()
        .map(|p| (p.confidence, p.correct as u8 as f64))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;

    if hi - lo <= 0.0 {
        let acc = accuracy(preds)?;
        return Ok(EceReport {
            kind: MetricKind::Kde,
            value: (acc - lo).abs(),
            num_bins: None,
            bandwidth: None,
            bins: Vec::new(),
        });
    }

    let confidences: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let h = kde_bandwidth(&confidences);
    let reach = KDE_KERNEL_CUTOFF * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;

    let mut weighted = 0.0;
    let mut mass = 0.0;
    for g in 0..KDE_GRID_POINTS {
        let p = lo + g as f64 * step;
        let start = confidences.partition_point(|&c| c < p - reach);
        let end = confidences.partition_point(|&c| c <= p + reach);
        let mut k_sum = 0.0;
        let mut ky_sum = 0.0;
        for &(c, y) in &pairs[start..end] {
            let k = gaussian((p - c) / h);
            k_sum += k;
            ky_sum += k * y;
        }
        if k_sum > 0.0 {
            // f(p) up to the constant 1/(L h), which cancels in the ratio.
            let density = k_sum;
            weighted += (ky_sum / k_sum - p).abs() * density;
            mass += density;
        }
    }
    let value = if mass > 0.0 { weighted / mass } else { 0.0 };
    Ok(EceReport {
        kind: MetricKind::Kde,
        value,
        num_bins: None,
        bandwidth: Some(h),
        bins: Vec::new(),
    })
}

pub fn accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(CalibError::input("accuracy of an empty prediction set"));
    }
    Ok(preds.iter().filter(|p| p.correct).count() as f64 / preds.len() as f64)
}

pub fn mean_confidence(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(CalibError::input("mean confidence of an empty prediction set"));
    }
    Ok(preds.iter().map(|p| p.confidence).sum::<f64>() / preds.len() as f64)
}

/// Mean negative log-likelihood of the true labels.
pub fn nll(dataset: &Dataset, probs: &[ProbVector]) -> Result<f64> {
    if probs.len() != dataset.len() {
        return Err(CalibError::argument(format!(
            "{} probability vectors for {} records",
            probs.len(),
            dataset.len()
        )));
    }
    let total: f64 = dataset
        .records()
        .iter()
        .zip(probs)
        .map(|(r, p)| -p.as_slice()[r.label()].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / dataset.len() as f64)
}

/// Equal-width reliability-diagram rows, empty bins included.
pub fn reliability_data(preds: &[PredictionRecord], m: usize) -> Result<Vec<BinStats>> {
    bin_equal_width(preds, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::LogitRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pr(conf: f64, correct: bool) -> PredictionRecord {
        PredictionRecord::new(0, conf, correct)
    }

    fn four() -> Vec<PredictionRecord> {
        vec![pr(0.9, true), pr(0.8, true), pr(0.7, false), pr(0.3, false)]
    }

    /// Direct transcription of the binned ECE sum: for each interval scan
    /// every prediction.
    fn naive_ece(preds: &[PredictionRecord], m: usize) -> f64 {
        let n = preds.len() as f64;
        let mut total = 0.0;
        for b in 1..=m {
            let lo = (b - 1) as f64 / m as f64;
            let hi = b as f64 / m as f64;
            let members: Vec<&PredictionRecord> = preds
                .iter()
                .filter(|p| (p.confidence > lo || (b == 1 && p.confidence == 0.0)) && p.confidence <= hi)
                .collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len() as f64;
            let acc = members.iter().filter(|p| p.correct).count() as f64 / k;
            let conf = members.iter().map(|p| p.confidence).sum::<f64>() / k;
            total += k / n * (acc - conf).abs();
        }
        total
    }

    #[test]
    fn equal_width_hand_partition() {
        let bins = bin_equal_width(&four(), 2).unwrap();
        assert_eq!(bins[0].count, 1);
        assert_abs_diff_eq!(bins[0].mean_confidence, 0.3, epsilon = 1e-15);
        assert_eq!(bins[0].accuracy, 0.0);
        assert_eq!(bins[1].count, 3);
        assert_abs_diff_eq!(bins[1].mean_confidence, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(bins[1].accuracy, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_width_edges() {
        let bins = bin_equal_width(&[], 4).unwrap();
        assert_eq!(bins.len(), 4);
        assert!(bins.iter().all(|b| b.count == 0));

        let ones = vec![pr(1.0, true); 5];
        let bins = bin_equal_width(&ones, 7).unwrap();
        assert_eq!(bins[6].count, 5);

        assert_eq!(equal_width_bin(0.0, 10), 0);
        assert_eq!(equal_width_bin(0.3, 10), 2);
        assert_eq!(equal_width_bin(0.30000000000000004, 10), 3);
        assert_eq!(equal_width_bin(0.5, 2), 0);
        assert!(matches!(bin_equal_width(&four(), 0), Err(CalibError::InvalidArgument(_))));
    }

    #[test]
    fn ece_hand_values() {
        let r = ece(&four(), 2, 1).unwrap();
        assert_abs_diff_eq!(r.value, 0.175, epsilon = 1e-12);
        let perfect = vec![pr(1.0, true); 10];
        assert_eq!(ece(&perfect, 15, 1).unwrap().value, 0.0);
        assert!(ece(&four(), 10, 3).is_err());
        // Squared gaps: 0.75 * (2/15)^2 + 0.25 * 0.09.
        let r2 = ece(&four(), 2, 2).unwrap();
        assert_abs_diff_eq!(r2.value, 0.75 * (2.0f64 / 15.0).powi(2) + 0.25 * 0.09, epsilon = 1e-12);
    }

    #[test]
    fn equal_mass_hand_values() {
        let r = ece_equal_mass(&four(), 2).unwrap();
        assert_abs_diff_eq!(r.value, 0.325, epsilon = 1e-12);
        assert_eq!(r.bins[0].count, 2);
        assert_eq!(r.bins[0].lower, 0.3);
        assert_eq!(r.bins[0].upper, 0.7);

        let one = ece_equal_mass(&four(), 1).unwrap();
        assert_abs_diff_eq!(one.value, (0.5f64 - 0.675).abs(), epsilon = 1e-12);

        assert!(matches!(ece_equal_mass(&four(), 5), Err(CalibError::InvalidArgument(_))));
    }

    #[test]
    fn equal_mass_ties_collapse_to_one_bin() {
        let preds = vec![pr(0.5, true), pr(0.5, true), pr(0.5, false), pr(0.5, false)];
        let r = ece_equal_mass(&preds, 2).unwrap();
        assert_eq!(r.bins[0].count, 4);
        assert_eq!(r.bins[1].count, 0);
        assert_abs_diff_eq!(r.value, 0.0, epsilon = 1e-15);

        let preds = vec![pr(0.8, true), pr(0.8, true), pr(0.8, true), pr(0.8, false)];
        let r = ece_equal_mass(&preds, 3).unwrap();
        assert_abs_diff_eq!(r.value, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn equal_mass_counts_balanced() {
        let preds: Vec<_> = (0..103).map(|i| pr(i as f64 / 103.0, i % 3 == 0)).collect();
        let r = ece_equal_mass(&preds, 10).unwrap();
        let counts: Vec<usize> = r.bins.iter().map(|b| b.count).collect();
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 103);
    }

    #[test]
    fn kde_degenerate_fallback() {
        let preds: Vec<_> = (0..20).map(|i| pr(0.8, i % 2 == 0)).collect();
        let r = ece_kde(&preds).unwrap();
        assert_abs_diff_eq!(r.value, 0.3, epsilon = 1e-6);
        assert!(r.bandwidth.is_none());
        assert!(ece_kde(&four()).is_err());
    }

    #[test]
    fn kde_near_zero_for_calibrated_sample() {
        // Confidences uniform on [0.3, 1], correctness drawn at that rate.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<_> = (0..100_000)
            .map(|_| {
                let c = rng.gen_range(0.3..1.0);
                pr(c, rng.gen::<f64>() < c)
            })
            .collect();
        let r = ece_kde(&preds).unwrap();
        assert!(r.value < 0.01, "{}", r.value);
    }

    #[test]
    fn kde_tracks_binned_ece_under_smooth_miscalibration() {
        // True accuracy p^1.5 at confidence p: smooth overconfidence.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let preds: Vec<_> = (0..100_000)
            .map(|_| {
                let c: f64 = rng.gen_range(0.2..1.0);
                pr(c, rng.gen::<f64>() < c.powf(1.5))
            })
            .collect();
        let k = ece_kde(&preds).unwrap().value;
        let b = ece(&preds, 15, 1).unwrap().value;
        assert!((k - b).abs() <= 0.005, "kde {k} vs binned {b}");
    }

    #[test]
    fn accuracy_and_nll() {
        assert_eq!(accuracy(&[pr(0.9, true), pr(0.6, true)]).unwrap(), 1.0);
        assert_eq!(accuracy(&four()).unwrap(), 0.5);
        assert!(accuracy(&[]).is_err());

        let records: Vec<_> = (0..4)
            .map(|i| LogitRecord::new(i % 3, vec![0.0; 3]).unwrap())
            .collect();
        let ds = Dataset::new(records).unwrap();
        let uniform = vec![ProbVector::new(vec![1.0 / 3.0; 3]).unwrap(); 4];
        assert_abs_diff_eq!(nll(&ds, &uniform).unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(nll(&ds, &uniform[..2]).is_err());
    }

    #[test]
    fn reliability_rows() {
        let rows = reliability_data(&four(), 2).unwrap();
        assert_eq!(rows, bin_equal_width(&four(), 2).unwrap());
        let rows = reliability_data(&four(), 10).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0].count, 0);
        let nonempty: Vec<f64> = rows.iter().filter(|b| b.count > 0).map(|b| b.mean_confidence).collect();
        assert!(nonempty.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn brute_force_equivalence() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..=50);
            let m = rng.gen_range(1..=20);
            let preds: Vec<_> = (0..n)
                .map(|_| {
                    // Mix in exact bin edges to exercise the boundary rule.
                    let c = if rng.gen_bool(0.2) {
                        rng.gen_range(0..=m) as f64 / m as f64
                    } else {
                        rng.gen::<f64>()
                    };
                    pr(c, rng.gen_bool(0.5))
                })
                .collect();
            let fast = ece(&preds, m, 1).unwrap().value;
            assert_abs_diff_eq!(fast, naive_ece(&preds, m), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ece_bounded_and_single_bin_collapse(
            raw in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
            m in 1usize..25,
        ) {
            let preds: Vec<_> = raw.iter().map(|&(c, y)| pr(c, y)).collect();
            let v = ece(&preds, m, 1).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v));
            let one = ece(&preds, 1, 1).unwrap().value;
            let gap = (accuracy(&preds).unwrap() - mean_confidence(&preds).unwrap()).abs();
            prop_assert!((one - gap).abs() <= 1e-12);
        }

        #[test]
        fn metrics_permutation_invariant(
            raw in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 12..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let preds: Vec<_> = raw.iter().map(|&(c, y)| pr(c, y)).collect();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
            prop_assert!(close(ece(&preds, 10, 1).unwrap().value, ece(&shuffled, 10, 1).unwrap().value));
            prop_assert!(close(
                ece_equal_mass(&preds, 5).unwrap().value,
                ece_equal_mass(&shuffled, 5).unwrap().value
            ));
            prop_assert!(close(ece_kde(&preds).unwrap().value, ece_kde(&shuffled).unwrap().value));
            prop_assert!(close(accuracy(&preds).unwrap(), accuracy(&shuffled).unwrap()));
        }
    }
}
