//! Accuracy-preserving scaling calibrators: a single global temperature,
//! a three-component temperature ensemble, and a per-prediction temperature
//! computed by a small network from the sorted logits.

mod ets;
mod pts;
mod ts;

use serde::{Deserialize, Serialize};

pub use ets::{apply_ets, fit_ets, fit_ets_with_bins, EtsModel};
pub use pts::{
    apply_pts, fit_pts, pts_temperature, pts_training_loss, FrozenBins, PtsBatch, PtsEceObjective, PtsInit,
    PtsModel, PtsTrainConfig, T_MIN,
};
pub use ts::{apply_temperature, fit_ts, mean_nll_at, TsModel};

/// Training objective for the fitted scaling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Binned squared calibration gap.
    Ece,
    /// Squared error against the correctness indicator (or one-hot label).
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = crate::CalibError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ece" => Ok(LossKind::Ece),
            "mse" => Ok(LossKind::Mse),
            other => Err(crate::CalibError::argument(format!("unknown loss kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Ece => "ece",
            LossKind::Mse => "mse",
        })
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.01, 0.5, 1.0, 2.5, 10.0, 40.0] {
            let x = softplus_inverse(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("ece".parse::<LossKind>().unwrap(), LossKind::Ece);
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert!("nll".parse::<LossKind>().is_err());
    }
}
