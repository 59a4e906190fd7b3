//! White-box L∞ attacks: FGS, PGD with restarts, AutoPGD, MultiTargeted and
//! the AutoPGD + MultiTargeted ensemble.
//!
//! Every attack runs over fixed-size chunks of examples in parallel. Each
//! example owns its random streams, keyed by its dataset index, so results
//! do not depend on the worker count or on which other examples share a
//! chunk.

mod apgd;
mod ensemble;
mod losses;
mod mt;
mod pgd;
mod records;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibmodels::{EvalMode, Model, Noise};
use crate::ndtape::{sign, Tape, Tensor};
use crate::rng::{self, Purpose, StreamRng};

pub use ensemble::{ensemble_aa_mt, EnsembleConfig, EnsembleResult, StageSummary};
pub use losses::{cross_entropy, dlr_loss, margin_loss, LossKind};
pub use records::{write_records_csv, AttackRecord};

use losses::Objective;

/// Slack allowed on the L∞ constraint for floating-point rounding.
pub const LINF_TOLERANCE: f64 = 1e-12;

/// Valid input range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bounds {
    Box { lo: f64, hi: f64 },
    Unbounded,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds::Box { lo: 0.0, hi: 1.0 };

    fn lo(&self) -> f64 {
        match *self {
            Bounds::Box { lo, .. } => lo,
            Bounds::Unbounded => f64::NEG_INFINITY,
        }
    }

    fn hi(&self) -> f64 {
        match *self {
            Bounds::Box { hi, .. } => hi,
            Bounds::Unbounded => f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo() && v <= self.hi()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fgs,
    Pgd,
    AutoPgd,
    MultiTargeted,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Fgs => "fgs",
            Family::Pgd => "pgd",
            Family::AutoPgd => "apgd",
            Family::MultiTargeted => "mt",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub restarts: usize,
    pub loss: LossKind,
    /// Mode the attacker differentiates through; the model's evaluation
    /// mode when unset.
    pub grad_mode: Option<EvalMode>,
    /// Mode used to judge success; the model's evaluation mode when unset.
    pub eval_mode: Option<EvalMode>,
    pub seed: u64,
    pub bounds: Bounds,
    /// Start iterative attacks from a uniform point of the feasible box.
    pub random_init: bool,
    /// Stop attacking an example after its first successful restart.
    pub early_stop: bool,
    /// Examples per parallel job.
    pub chunk_size: usize,
    /// Extra stream key separating otherwise identical runs (ensemble stages).
    pub stream_tag: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            alpha: 0.01,
            steps: 40,
            restarts: 1,
            loss: LossKind::CrossEntropy,
            grad_mode: None,
            eval_mode: None,
            seed: 0,
            bounds: Bounds::UNIT,
            random_init: true,
            early_stop: true,
            chunk_size: 32,
            stream_tag: 0,
        }
    }
}

impl AttackConfig {
    pub fn fgs(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_init: false,
            seed,
            ..Self::default()
        }
    }

    /// 40 steps of size 0.01 by default.
    pub fn pgd(epsilon: f64, restarts: usize, seed: u64) -> Self {
        Self {
            epsilon,
            restarts,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid("epsilon must be a finite non-negative number"));
        }
        if family != Family::Fgs && !(self.alpha > 0.0) {
            return Err(Error::invalid("step size must be positive for iterative attacks"));
        }
        if self.restarts == 0 || self.chunk_size == 0 {
            return Err(Error::invalid("restarts and chunk size must be at least 1"));
        }
        if let Bounds::Box { lo, hi } = self.bounds {
            if !(lo <= hi) {
                return Err(Error::invalid("input bounds are empty"));
            }
        }
        Ok(())
    }

    fn modes(&self, model: &Model) -> (EvalMode, EvalMode) {
        let default = model.spec.default_eval_mode();
        (
            self.grad_mode.unwrap_or(default),
            self.eval_mode.unwrap_or(default),
        )
    }
}

/// Outcome of one attack over a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Dataset index of each row.
    pub ids: Vec<usize>,
    pub x_adv: Tensor,
    /// Prediction differs from the label at `x_adv`.
    pub success: Vec<bool>,
    /// Attack objective at `x_adv`.
    pub loss: Vec<f64>,
    /// Restart that produced `x_adv`; `None` when the clean input was kept.
    pub best_restart: Vec<Option<usize>>,
    pub restarts_used: Vec<usize>,
    /// Restarts needed to break the example: 0 if the clean input is already
    /// misclassified, `r` if restart `r - 1` was the first success.
    pub broken_after: Vec<Option<usize>>,
    pub linf: Vec<f64>,
}

impl AttackResult {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn robust_accuracy(&self) -> f64 {
        let robust = self.success.iter().filter(|&&s| !s).count();
        robust as f64 / self.len().max(1) as f64
    }

    /// Robust accuracy had only the first `restarts` restarts been run.
    /// Valid for `restarts` up to the number actually configured.
    pub fn accuracy_at_restarts(&self, restarts: usize) -> f64 {
        let robust = self
            .broken_after
            .iter()
            .filter(|b| b.is_none_or(|k| k > restarts))
            .count();
        robust as f64 / self.len().max(1) as f64
    }

    pub fn records(&self, stage: &str) -> Vec<AttackRecord> {
        (0..self.len())
            .map(|i| AttackRecord {
                example_id: self.ids[i],
                stage: stage.to_string(),
                restarts_used: self.restarts_used[i],
                success: self.success[i],
                final_loss: self.loss[i],
                linf_dist: self.linf[i],
            })
            .collect()
    }
}

/// Shared state for one attack invocation.
pub(crate) struct Ctx<'a> {
    pub model: &'a Model,
    pub cfg: &'a AttackConfig,
    pub grad_mode: EvalMode,
    pub eval_mode: EvalMode,
}

/// Rows attacked together in one restart.
pub(crate) struct Job {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
    pub obj: Objective,
}

impl Job {
    fn rows(&self) -> usize {
        self.y.len()
    }

    fn select(&self, rows: &[usize]) -> Job {
        let d = self.x.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        Job {
            x: Tensor::new(vec![rows.len(), d], data).expect("row selection"),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            obj: self.obj.select(rows),
        }
    }
}

/// One restart of an attack family.
pub(crate) trait Restart: Sync {
    /// Candidate inputs for every row of `job`, with their objective values.
    fn run(&self, ctx: &Ctx<'_>, job: &Job, restart: usize) -> Result<(Tensor, Vec<f64>)>;
}

impl Ctx<'_> {
    pub fn noise_streams(&self, ids: &[usize], restart: usize) -> Vec<StreamRng> {
        ids.iter()
            .map(|&id| {
                rng::stream(
                    self.cfg.seed,
                    Purpose::AttackNoise,
                    id as u64,
                    restart as u64,
                    self.cfg.stream_tag,
                )
            })
            .collect()
    }

    /// Objective values and, if asked, their input gradient.
    pub fn evaluate(
        &self,
        x: &Tensor,
        job: &Job,
        noise: &mut [StreamRng],
        with_grad: bool,
    ) -> Result<(Vec<f64>, Option<Tensor>)> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape, false);
        let xv = if with_grad {
            tape.leaf(x.clone())
        } else {
            tape.constant(x.clone())
        };
        let scores = bound.scores(&xv, self.grad_mode, &mut Noise::PerExample(noise))?;
        let per = losses::objective(&scores, &job.y, &job.obj)?;
        let values = per.value().into_vec();
        if !with_grad {
            return Ok((values, None));
        }
        let g = tape.backward(&per.sum())?;
        Ok((values, Some(g.wrt(&xv))))
    }

    /// Scores in the gradient mode at the clean inputs, from a stream that
    /// depends only on the example.
    pub fn clean_scores(&self, job: &Job) -> Result<Tensor> {
        let mut noise: Vec<StreamRng> = job
            .ids
            .iter()
            .map(|&id| {
                rng::stream(self.cfg.seed, Purpose::AttackNoise, id as u64, u64::MAX, self.cfg.stream_tag)
            })
            .collect();
        self.model
            .log_probs(&job.x, self.grad_mode, &mut Noise::PerExample(&mut noise))
    }

    /// Whether each row is misclassified in the evaluation mode. `candidate`
    /// keys the evaluation noise: 0 for the clean input, `r + 1` for restart `r`.
    pub fn misclassified(&self, x: &Tensor, job: &Job, candidate: usize) -> Result<Vec<bool>> {
        let mut noise: Vec<StreamRng> = job
            .ids
            .iter()
            .map(|&id| {
                rng::stream(
                    self.cfg.seed,
                    Purpose::EvalNoise,
                    id as u64,
                    candidate as u64,
                    self.cfg.stream_tag,
                )
            })
            .collect();
        let p = self
            .model
            .predict(x, self.eval_mode, &mut Noise::PerExample(&mut noise))?;
        let c = p.shape()[1];
        Ok(p.data()
            .chunks(c)
            .zip(&job.y)
            .map(|(row, &y)| losses::predicted(row) != y)
            .collect())
    }

    /// Uniform start in the intersection of the ε-ball and the bounds.
    pub fn random_start(&self, job: &Job, restart: usize) -> Tensor {
        let eps = self.cfg.epsilon;
        if !self.cfg.random_init || eps == 0.0 {
            return job.x.clone();
        }
        let d = job.x.shape()[1];
        let (blo, bhi) = (self.cfg.bounds.lo(), self.cfg.bounds.hi());
        let mut out = job.x.clone();
        for (row, &id) in out.data_mut().chunks_mut(d).zip(&job.ids) {
            let mut r = rng::stream(
                self.cfg.seed,
                Purpose::AttackInit,
                id as u64,
                restart as u64,
                self.cfg.stream_tag,
            );
            for v in row {
                let lo = (*v - eps).max(blo);
                let hi = (*v + eps).min(bhi);
                *v = lo + (hi - lo) * r.random::<f64>();
            }
        }
        out
    }

    /// Clamp to the ε-ball around `origin`, then to the bounds.
    pub fn project(&self, origin: &Tensor, x: &mut Tensor) {
        let eps = self.cfg.epsilon;
        let (blo, bhi) = (self.cfg.bounds.lo(), self.cfg.bounds.hi());
        for (v, &o) in x.data_mut().iter_mut().zip(origin.data()) {
            *v = v.clamp(o - eps, o + eps).clamp(blo, bhi);
        }
    }

    /// `x + step * sign(g)`, projected.
    pub fn sign_step(&self, origin: &Tensor, x: &Tensor, g: &Tensor, steps: &[f64]) -> Tensor {
        let d = x.shape()[1];
        let mut out = x.clone();
        for ((row, grow), &a) in out
            .data_mut()
            .chunks_mut(d)
            .zip(g.data().chunks(d))
            .zip(steps)
        {
            for (v, &gi) in row.iter_mut().zip(grow) {
                *v += a * sign(gi);
            }
        }
        self.project(origin, &mut out);
        out
    }
}

/// Check the L∞ and bounds contract for every row of `x_adv`.
pub fn check_contract(x: &Tensor, x_adv: &Tensor, epsilon: f64, bounds: Bounds) -> Result<()> {
    if x.shape() != x_adv.shape() {
        return Err(Error::Contract(format!(
            "adversarial batch has shape {:?}, expected {:?}",
            x_adv.shape(),
            x.shape()
        )));
    }
    let d = x.shape().get(1).copied().unwrap_or(1).max(1);
    for (i, (a, b)) in x.data().iter().zip(x_adv.data()).enumerate() {
        if !((a - b).abs() <= epsilon + LINF_TOLERANCE) {
            return Err(Error::Contract(format!(
                "example {} feature {} moved by {:e}, beyond epsilon {epsilon}",
                i / d,
                i % d,
                (a - b).abs()
            )));
        }
        if !bounds.contains(*b) {
            return Err(Error::Contract(format!(
                "example {} feature {} = {b} is outside the input bounds",
                i / d,
                i % d
            )));
        }
    }
    Ok(())
}

fn linf_rows(x: &Tensor, x_adv: &Tensor) -> Vec<f64> {
    let d = x.shape()[1].max(1);
    x.data()
        .chunks(d)
        .zip(x_adv.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        .collect()
}

struct ChunkOut {
    x_adv: Vec<f64>,
    success: Vec<bool>,
    loss: Vec<f64>,
    best_restart: Vec<Option<usize>>,
    restarts_used: Vec<usize>,
    broken_after: Vec<Option<usize>>,
}

fn run_chunk(ctx: &Ctx<'_>, alg: &dyn Restart, job: Job) -> Result<ChunkOut> {
    let m = job.rows();
    let d = job.x.shape()[1];
    let clean_wrong = ctx.misclassified(&job.x, &job, 0)?;
    let mut out = ChunkOut {
        x_adv: job.x.data().to_vec(),
        success: clean_wrong.clone(),
        loss: vec![f64::NEG_INFINITY; m],
        best_restart: vec![None; m],
        restarts_used: vec![0; m],
        broken_after: clean_wrong.iter().map(|&w| w.then_some(0)).collect(),
    };
    if clean_wrong.iter().any(|&w| w) {
        let mut noise = ctx.noise_streams(&job.ids, usize::MAX);
        let (clean_loss, _) = ctx.evaluate(&job.x, &job, &mut noise, false)?;
        for i in (0..m).filter(|&i| clean_wrong[i]) {
            out.loss[i] = clean_loss[i];
        }
    }
    for r in 0..ctx.cfg.restarts {
        let active: Vec<usize> = (0..m)
            .filter(|&i| !clean_wrong[i] && !(ctx.cfg.early_stop && out.success[i]))
            .collect();
        if active.is_empty() {
            break;
        }
        let sub = job.select(&active);
        let (cand, loss) = alg.run(ctx, &sub, r)?;
        let wrong = ctx.misclassified(&cand, &sub, r + 1)?;
        for (j, &i) in active.iter().enumerate() {
            out.restarts_used[i] = r + 1;
            let better = if wrong[j] {
                !out.success[i] || loss[j] > out.loss[i]
            } else {
                !out.success[i] && (out.best_restart[i].is_none() || loss[j] > out.loss[i])
            };
            if better {
                out.x_adv[i * d..(i + 1) * d].copy_from_slice(cand.row(j));
                out.loss[i] = loss[j];
                out.best_restart[i] = Some(r);
            }
            if wrong[j] {
                out.success[i] = true;
                out.broken_after[i].get_or_insert(r + 1);
            }
        }
    }
    Ok(out)
}

/// Run `family` on rows `x` with labels `y`; `ids` are the dataset indices
/// that key each example's random streams.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[usize],
    family: Family,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate(family)?;
    losses::check_classes(cfg.loss, model.spec.num_classes)?;
    if x.rank() != 2 || x.shape()[0] != y.len() || ids.len() != y.len() {
        return Err(Error::invalid(format!(
            "attack inputs disagree: x {:?}, {} labels, {} ids",
            x.shape(),
            y.len(),
            ids.len()
        )));
    }
    if let Some(bad) = x.data().iter().find(|&&v| !cfg.bounds.contains(v)) {
        return Err(Error::invalid(format!("clean input {bad} lies outside the attack bounds")));
    }
    let (grad_mode, eval_mode) = cfg.modes(model);
    let ctx = Ctx {
        model,
        cfg,
        grad_mode,
        eval_mode,
    };
    let alg: Box<dyn Restart> = match family {
        Family::Fgs => Box::new(pgd::Fgs),
        Family::Pgd => Box::new(pgd::Pgd),
        Family::AutoPgd => Box::new(apgd::AutoPgd),
        Family::MultiTargeted => Box::new(mt::MultiTargeted),
    };
    let n = y.len();
    let d = x.shape()[1];
    let full = Job {
        x: x.clone(),
        y: y.to_vec(),
        ids: ids.to_vec(),
        obj: Objective::from_kind(cfg.loss, n),
    };
    let starts: Vec<usize> = (0..n).step_by(cfg.chunk_size).collect();
    let chunks: Vec<ChunkOut> = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + cfg.chunk_size).min(n)).collect();
            run_chunk(&ctx, alg.as_ref(), full.select(&rows))
        })
        .collect::<Result<_>>()?;

    let mut x_adv = Vec::with_capacity(n * d);
    let mut result = AttackResult {
        ids: ids.to_vec(),
        x_adv: Tensor::zeros(vec![0, d]),
        success: Vec::with_capacity(n),
        loss: Vec::with_capacity(n),
        best_restart: Vec::with_capacity(n),
        restarts_used: Vec::with_capacity(n),
        broken_after: Vec::with_capacity(n),
        linf: Vec::new(),
    };
    for c in chunks {
        x_adv.extend(c.x_adv);
        result.success.extend(c.success);
        result.loss.extend(c.loss);
        result.best_restart.extend(c.best_restart);
        result.restarts_used.extend(c.restarts_used);
        result.broken_after.extend(c.broken_after);
    }
    result.x_adv = Tensor::new(vec![n, d], x_adv)?;
    check_contract(x, &result.x_adv, cfg.epsilon, cfg.bounds)?;
    result.linf = linf_rows(x, &result.x_adv);
    Ok(result)
}

fn all_ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Fast gradient sign: one step of size ε along the sign of the loss gradient.
pub fn fgs(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, x, y, &all_ids(y.len()), Family::Fgs, cfg)
}

pub fn pgd(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, x, y, &all_ids(y.len()), Family::Pgd, cfg)
}

pub fn auto_pgd(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, x, y, &all_ids(y.len()), Family::AutoPgd, cfg)
}

pub fn multi_targeted(model: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(model, x, y, &all_ids(y.len()), Family::MultiTargeted, cfg)
}

/// Fraction of examples classified correctly after `attack`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustEval {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

fn eval_stream(seed: u64, id: usize) -> StreamRng {
    rng::stream(seed, Purpose::EvalNoise, id as u64, u64::MAX, u64::MAX)
}

/// Accuracy of `model` on `(x, y)` in `mode`, with per-example noise keyed
/// by `ids` so it pairs with [`robust_accuracy`].
pub fn standard_accuracy(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[usize],
    mode: EvalMode,
    seed: u64,
) -> Result<RobustEval> {
    if y.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut noise: Vec<StreamRng> = ids.iter().map(|&id| eval_stream(seed, id)).collect();
    let p = model.predict(x, mode, &mut Noise::PerExample(&mut noise))?;
    let c = p.shape()[1];
    let correct: Vec<bool> = p
        .data()
        .chunks(c)
        .zip(y)
        .map(|(row, &l)| losses::predicted(row) == l)
        .collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / y.len() as f64;
    Ok(RobustEval { accuracy, correct })
}

/// Run `attack` on `(x, y)`, enforce the ε-ball and bounds contract on its
/// output, and score the adversarial inputs in `mode` with fresh seeded noise.
#[allow(clippy::too_many_arguments)]
pub fn robust_accuracy<F>(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    ids: &[usize],
    mode: EvalMode,
    seed: u64,
    epsilon: f64,
    bounds: Bounds,
    attack: F,
) -> Result<RobustEval>
where
    F: FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
{
    let x_adv = attack(x, y)?;
    check_contract(x, &x_adv, epsilon, bounds)?;
    standard_accuracy(model, &x_adv, y, ids, mode, seed)
}
