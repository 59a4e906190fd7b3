//! Attack objectives over per-example scores.
//!
//! Scores are log class probabilities. DLR and margin objectives only use
//! differences between scores, so on mean-mode scores they coincide with the
//! same objectives on raw logits.

use crate::error::{Error, Result};
use crate::ibmodels::argmax;
use crate::ndtape::{Tensor, Var};

const DLR_EPS: f64 = 1e-12;

/// What the attacker maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    /// Difference of logits ratio; needs at least three classes.
    Dlr,
    /// `z_t - z_y` toward a fixed target, or toward the strongest other
    /// class when no target is given.
    Margin(Option<usize>),
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::CrossEntropy => f.write_str("ce"),
            LossKind::Dlr => f.write_str("dlr"),
            LossKind::Margin(None) => f.write_str("margin"),
            LossKind::Margin(Some(t)) => write!(f, "margin{t}"),
        }
    }
}

/// Per-example objective with resolved targets.
#[derive(Clone, Debug)]
pub(crate) enum Objective {
    CrossEntropy,
    Dlr,
    Margin(Vec<Option<usize>>),
}

impl Objective {
    pub(crate) fn from_kind(kind: LossKind, n: usize) -> Self {
        match kind {
            LossKind::CrossEntropy => Objective::CrossEntropy,
            LossKind::Dlr => Objective::Dlr,
            LossKind::Margin(t) => Objective::Margin(vec![t; n]),
        }
    }

    pub(crate) fn select(&self, rows: &[usize]) -> Self {
        match self {
            Objective::Margin(t) => Objective::Margin(rows.iter().map(|&r| t[r]).collect()),
            other => other.clone(),
        }
    }
}

pub(crate) fn check_classes(kind: LossKind, classes: usize) -> Result<()> {
    match kind {
        LossKind::Dlr if classes < 3 => Err(Error::invalid(format!(
            "DLR loss needs at least 3 classes, model has {classes}"
        ))),
        LossKind::Margin(Some(t)) if t >= classes => {
            Err(Error::invalid(format!("margin target {t} out of range")))
        }
        _ => Ok(()),
    }
}

/// Indices sorted by descending score, ties to the lowest index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn best_other(row: &[f64], y: usize) -> usize {
    ranking(row).into_iter().find(|&i| i != y).unwrap_or(y)
}

/// Per-example objective values `[n]` on the tape.
pub(crate) fn objective<'t>(scores: &Var<'t>, labels: &[usize], obj: &Objective) -> Result<Var<'t>> {
    let value = scores.value();
    let c = value.shape()[1];
    let n = labels.len();
    let mask = |pairs: &mut dyn FnMut(usize, &[f64]) -> Vec<(usize, f64)>| -> Tensor {
        let mut data = vec![0.0; n * c];
        for (i, row) in value.data().chunks(c).enumerate() {
            for (j, w) in pairs(i, row) {
                data[i * c + j] += w;
            }
        }
        Tensor::new(vec![n, c], data).expect("mask shape")
    };
    let tape = scores.tape();
    let pick = |m: Tensor| -> Result<Var<'t>> { scores.mul(&tape.constant(m))?.sum_axis(1) };
    match obj {
        Objective::CrossEntropy => Ok(pick(mask(&mut |i, _| vec![(labels[i], -1.0)]))?),
        Objective::Margin(targets) => pick(mask(&mut |i, row| {
            let y = labels[i];
            let t = targets[i].unwrap_or_else(|| best_other(row, y));
            vec![(t, 1.0), (y, -1.0)]
        })),
        Objective::Dlr => {
            let num = pick(mask(&mut |i, row| {
                let y = labels[i];
                vec![(y, 1.0), (best_other(row, y), -1.0)]
            }))?;
            let den = pick(mask(&mut |_, row| {
                let r = ranking(row);
                vec![(r[0], 1.0), (r[2], -1.0)]
            }))?
            .add_scalar(DLR_EPS);
            Ok(num.div(&den)?.neg())
        }
    }
}

/// Cross-entropy of a logit row.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// `-(z_y - max_{i != y} z_i) / (z_pi1 - z_pi3)` with `pi` the descending sort.
pub fn dlr_loss(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 3 {
        return Err(Error::invalid("DLR loss needs at least 3 classes"));
    }
    let r = ranking(logits);
    let other = best_other(logits, y);
    Ok(-(logits[y] - logits[other]) / (logits[r[0]] - logits[r[2]] + DLR_EPS))
}

/// `z_t - z_y`.
pub fn margin_loss(logits: &[f64], y: usize, t: usize) -> f64 {
    logits[t] - logits[y]
}

/// Wrong classes ordered by descending score; the MultiTargeted target order.
pub(crate) fn target_order(row: &[f64], y: usize) -> Vec<usize> {
    ranking(row).into_iter().filter(|&i| i != y).collect()
}

pub(crate) fn predicted(row: &[f64]) -> usize {
    argmax(row)
}
