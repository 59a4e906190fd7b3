use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::{csv_error, Flag, ReportRow};
use crate::attacks::{fgs, run_attack, AttackConfig, AttackResult, Family};
use crate::error::{Error, Result};
use crate::ibmodels::{argmax, EvalMode, Model, Noise};
use crate::ndtape::Tensor;
use crate::rng::{self, Purpose};

/// Robust accuracy of PGD against increasing restart budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct RestartCurve {
    pub counts: Vec<usize>,
    pub robust_acc: Vec<f64>,
    pub n_examples: usize,
    /// The single run at the largest budget every point is read from.
    pub result: AttackResult,
}

impl RestartCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["restarts", "robust_acc"]).map_err(|e| csv_error(path, e))?;
        for (r, a) in self.counts.iter().zip(&self.robust_acc) {
            w.write_record([r.to_string(), a.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Report rows, one per restart count.
    pub fn rows(&self, model_id: &str, seed: u64, epsilon: f64, eval_mode: EvalMode, standard_acc: f64) -> Vec<ReportRow> {
        self.counts
            .iter()
            .zip(&self.robust_acc)
            .map(|(&restarts, &robust_acc)| ReportRow {
                model_id: model_id.to_string(),
                seed,
                attack: "pgd".into(),
                epsilon,
                restarts,
                eval_mode,
                standard_acc,
                robust_acc,
                n_examples: self.n_examples,
            })
            .collect()
    }
}

/// PGD robust accuracy at each entry of `counts` (strictly ascending).
///
/// One attack runs with the largest budget. Restart `r` of every example
/// draws from the same stream whatever the total budget, so the accuracy
/// after the first `k` restarts is exactly what a `k`-restart run reports,
/// and the curve never increases.
pub fn restart_curve(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    counts: &[usize],
) -> Result<RestartCurve> {
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!(
            "restart counts must be positive and strictly ascending, got {counts:?}"
        )));
    }
    let cfg = AttackConfig {
        restarts: *counts.last().unwrap_or(&1),
        ..cfg.clone()
    };
    let result = run_attack(model, x, y, ids, Family::Pgd, &cfg)?;
    let robust_acc = counts.iter().map(|&r| result.accuracy_at_restarts(r)).collect();
    Ok(RestartCurve {
        counts: counts.to_vec(),
        robust_acc,
        n_examples: y.len(),
        result,
    })
}

/// Solid-gray sanity check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayCheck {
    /// Class predicted for the all-0.5 image.
    pub gray_prediction: usize,
    /// Accuracy of replacing every input by the gray image.
    pub oracle_acc: f64,
    /// Accuracy under FGS with ε = 0.5.
    pub fgs_acc: f64,
    pub chance: f64,
    /// Set when the gradient attack does at least 5 points worse than the
    /// gray image (or chance, whichever is higher).
    pub flagged: bool,
}

/// Margin in accuracy points (as a fraction) before the gray check fires.
pub const GRAY_MARGIN: f64 = 0.05;

impl GrayCheck {
    pub fn flag(&self) -> Flag {
        Flag::new(
            "gray_check",
            self.flagged,
            &[
                ("oracle_acc", self.oracle_acc),
                ("fgs_acc", self.fgs_acc),
                ("chance", self.chance),
                ("gray_prediction", self.gray_prediction as f64),
            ],
        )
    }
}

/// Every input in `[0, 1]` is within L∞ distance 0.5 of the gray image, so
/// mapping all inputs to it is a valid ε = 0.5 attack. A gradient attack at
/// the same budget that leaves clearly more accuracy than that is not
/// finding what exists.
pub fn gray_image_check(model: &Model, x: &Tensor, y: &[usize], eval_mode: EvalMode, seed: u64) -> Result<GrayCheck> {
    if y.is_empty() {
        return Err(Error::invalid("gray check needs at least one example"));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!(
            "gray check needs inputs in [0, 1], found {v}"
        )));
    }
    let d = model.spec.input_dim;
    let gray = Tensor::full(vec![1, d], 0.5);
    // One shared draw: the gray image gets one prediction for every example.
    let mut r = rng::stream(seed, Purpose::EvalNoise, u64::MAX, u64::MAX - 1, 0);
    let probs = model.predict(&gray, eval_mode, &mut Noise::Shared(&mut r))?;
    let gray_prediction = argmax(probs.data());
    let n = y.len() as f64;
    let oracle_acc = y.iter().filter(|&&l| l == gray_prediction).count() as f64 / n;

    let cfg = AttackConfig {
        eval_mode: Some(eval_mode),
        ..AttackConfig::fgs(0.5, seed)
    };
    let fgs_acc = fgs(model, x, y, &cfg)?.robust_accuracy();
    let chance = 1.0 / model.spec.num_classes as f64;
    let flagged = fgs_acc - oracle_acc.max(chance) >= GRAY_MARGIN - 1e-12;
    Ok(GrayCheck {
        gray_prediction,
        oracle_acc,
        fgs_acc,
        chance,
        flagged,
    })
}
