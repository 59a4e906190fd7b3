//! AutoPGD-CE, then AutoPGD-DLR, then MultiTargeted, each on the examples
//! that survived the previous stages.

use serde::{Deserialize, Serialize};

use super::{
    losses, run_attack, AttackConfig, AttackRecord, Bounds, Ctx, Family, Job, LossKind,
};
use crate::error::{Error, Result};
use crate::ibmodels::{EvalMode, Model};
use crate::ndtape::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub epsilon: f64,
    pub seed: u64,
    pub bounds: Bounds,
    pub grad_mode: Option<EvalMode>,
    pub eval_mode: Option<EvalMode>,
    pub apgd_steps: usize,
    pub apgd_restarts: usize,
    pub mt_steps: usize,
    pub mt_restarts: usize,
    /// MultiTargeted step size; ε/4 when unset.
    pub mt_alpha: Option<f64>,
    pub chunk_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            seed: 0,
            bounds: Bounds::UNIT,
            grad_mode: None,
            eval_mode: None,
            apgd_steps: 100,
            apgd_restarts: 5,
            mt_steps: 200,
            mt_restarts: 10,
            mt_alpha: None,
            chunk_size: 32,
        }
    }
}

impl EnsembleConfig {
    fn stages(&self) -> Vec<(&'static str, Family, AttackConfig)> {
        let base = AttackConfig {
            epsilon: self.epsilon,
            seed: self.seed,
            bounds: self.bounds,
            grad_mode: self.grad_mode,
            eval_mode: self.eval_mode,
            chunk_size: self.chunk_size,
            ..AttackConfig::default()
        };
        vec![
            (
                "apgd-ce",
                Family::AutoPgd,
                AttackConfig {
                    steps: self.apgd_steps,
                    restarts: self.apgd_restarts,
                    loss: LossKind::CrossEntropy,
                    alpha: 2.0 * self.epsilon.max(f64::MIN_POSITIVE),
                    stream_tag: 1,
                    ..base.clone()
                },
            ),
            (
                "apgd-dlr",
                Family::AutoPgd,
                AttackConfig {
                    steps: self.apgd_steps,
                    restarts: self.apgd_restarts,
                    loss: LossKind::Dlr,
                    alpha: 2.0 * self.epsilon.max(f64::MIN_POSITIVE),
                    stream_tag: 2,
                    ..base.clone()
                },
            ),
            (
                "mt",
                Family::MultiTargeted,
                AttackConfig {
                    steps: self.mt_steps,
                    restarts: self.mt_restarts,
                    loss: LossKind::Margin(None),
                    alpha: self
                        .mt_alpha
                        .unwrap_or(self.epsilon / 4.0)
                        .max(f64::MIN_POSITIVE),
                    stream_tag: 3,
                    ..base
                },
            ),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    /// Examples still robust when the stage started.
    pub attacked: usize,
    /// Of those, examples the stage broke.
    pub broken: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub ids: Vec<usize>,
    pub clean_correct: Vec<bool>,
    /// Survived every stage.
    pub robust: Vec<bool>,
    pub stages: Vec<StageSummary>,
    /// Clean input for unbroken examples, otherwise the breaking input.
    pub x_adv: Tensor,
    pub records: Vec<AttackRecord>,
}

impl EnsembleResult {
    pub fn standard_accuracy(&self) -> f64 {
        fraction(&self.clean_correct)
    }

    pub fn robust_accuracy(&self) -> f64 {
        fraction(&self.robust)
    }
}

fn fraction(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len().max(1) as f64
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data).expect("row gather")
}

/// Robust only if an example survives all three attacks; later stages only
/// see the survivors of earlier ones.
pub fn ensemble_aa_mt(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[usize],
    cfg: &EnsembleConfig,
) -> Result<EnsembleResult> {
    losses::check_classes(LossKind::Dlr, model.spec.num_classes)?;
    if y.is_empty() || x.rank() != 2 || x.shape()[0] != y.len() || ids.len() != y.len() {
        return Err(Error::invalid("ensemble needs matching, nonempty inputs, labels and ids"));
    }
    let stages = cfg.stages();
    // Clean screening uses the same evaluation stream as each stage's own
    // clean check.
    let screen_cfg = &stages[0].2;
    screen_cfg.validate(Family::AutoPgd)?;
    let (grad_mode, eval_mode) = screen_cfg.modes(model);
    let ctx = Ctx {
        model,
        cfg: screen_cfg,
        grad_mode,
        eval_mode,
    };
    let job = Job {
        x: x.clone(),
        y: y.to_vec(),
        ids: ids.to_vec(),
        obj: losses::Objective::CrossEntropy,
    };
    let clean_correct: Vec<bool> = ctx.misclassified(x, &job, 0)?.into_iter().map(|w| !w).collect();

    let mut robust = clean_correct.clone();
    let mut x_adv = x.clone();
    let d = x.shape()[1];
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for (name, family, stage_cfg) in &stages {
        let alive: Vec<usize> = (0..y.len()).filter(|&i| robust[i]).collect();
        let mut summary = StageSummary {
            name: name.to_string(),
            attacked: alive.len(),
            broken: 0,
        };
        if !alive.is_empty() {
            let sub_x = rows(x, &alive);
            let sub_y: Vec<usize> = alive.iter().map(|&i| y[i]).collect();
            let sub_ids: Vec<usize> = alive.iter().map(|&i| ids[i]).collect();
            let res = run_attack(model, &sub_x, &sub_y, &sub_ids, *family, stage_cfg)?;
            for (j, &i) in alive.iter().enumerate() {
                if res.success[j] {
                    robust[i] = false;
                    summary.broken += 1;
                    x_adv.data_mut()[i * d..(i + 1) * d].copy_from_slice(res.x_adv.row(j));
                }
            }
            records.extend(res.records(name));
        }
        summaries.push(summary);
    }
    Ok(EnsembleResult {
        ids: ids.to_vec(),
        clean_correct,
        robust,
        stages: summaries,
        x_adv,
        records,
    })
}
