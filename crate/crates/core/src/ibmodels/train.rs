use serde::{Deserialize, Serialize};

use super::forward::Noise;
use super::optim::{Optimizer, OptimizerConfig};
use super::{Model, ModelKind, ModelSpec, Params};
use crate::datasets::{batch_iterator, DataSource};
use crate::error::{Error, Result};
use crate::ndtape::{Tape, Tensor};
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every_epochs` epochs.
    StepDecay { factor: f64, every_epochs: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay {
                factor,
                every_epochs,
            } => base * factor.powi((epoch / every_epochs.max(1)) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(usize),
    Iterations(usize),
}

/// Ramp of the rate weight from `initial` to the model's target value.
///
/// VIB's beta moves linearly in log space; CEB's rho moves linearly. The ramp
/// is measured in epochs for fixed datasets and in iterations for resampled
/// sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anneal {
    pub initial: f64,
    pub ramp: f64,
}

impl Anneal {
    /// Rate weight after `progress` epochs (or iterations) of the ramp.
    pub fn weight(&self, spec: &ModelSpec, progress: f64) -> f64 {
        let t = if self.ramp > 0.0 {
            (progress / self.ramp).clamp(0.0, 1.0)
        } else {
            1.0
        };
        match spec.kind {
            ModelKind::Vib if spec.beta <= 0.0 || self.initial <= 0.0 => {
                self.initial + (spec.beta - self.initial) * t
            }
            ModelKind::Vib => {
                let (lo, hi) = (self.initial.ln(), spec.beta.ln());
                (lo + (hi - lo) * t).exp()
            }
            ModelKind::Ceb => (-(self.initial + (spec.rho - self.initial) * t)).exp(),
            ModelKind::Det => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub duration: Duration,
    pub batch_size: usize,
    /// Exponential moving-average decay for evaluation parameters; 0 disables.
    pub polyak_decay: f64,
    pub anneal: Option<Anneal>,
    /// Draw a fresh batch from the generator every step.
    pub resample: bool,
    /// Iterations per history row when there are no epochs.
    pub log_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam(1e-4, 0.5, 0.999), x0.97 every 2 epochs, batch 100, 200 epochs,
    /// Polyak 0.999.
    pub fn mnist(seed: u64) -> Self {
        Self {
            optimizer: OptimizerConfig::Adam {
                lr: 1e-4,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            schedule: LrSchedule::StepDecay {
                factor: 0.97,
                every_epochs: 2,
            },
            duration: Duration::Epochs(200),
            batch_size: 100,
            polyak_decay: 0.999,
            anneal: None,
            resample: false,
            log_every: 100,
            seed,
        }
    }

    /// Nesterov SGD(0.003, 0.9), batch 1024 resampled every iteration.
    pub fn toy(iterations: usize, seed: u64) -> Self {
        Self {
            optimizer: OptimizerConfig::Sgd {
                lr: 0.003,
                momentum: 0.9,
                nesterov: true,
            },
            schedule: LrSchedule::Constant,
            duration: Duration::Iterations(iterations),
            batch_size: 1024,
            polyak_decay: 0.0,
            anneal: None,
            resample: true,
            log_every: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.lr();
        if !(lr > 0.0) || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("learning rate, batch size and log interval must be positive"));
        }
        if !(0.0..1.0).contains(&self.polyak_decay) {
            return Err(Error::invalid("polyak decay must lie in [0, 1)"));
        }
        if let Some(a) = &self.anneal {
            if !(a.ramp >= 0.0) || !a.initial.is_finite() {
                return Err(Error::invalid("anneal needs a finite start and a non-negative ramp"));
            }
        }
        if let LrSchedule::StepDecay { factor, every_epochs } = self.schedule {
            if !(factor > 0.0) || every_epochs == 0 {
                return Err(Error::invalid("step decay needs a positive factor and period"));
            }
        }
        match self.duration {
            Duration::Epochs(0) | Duration::Iterations(0) => {
                Err(Error::invalid("training duration must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub rate: f64,
    /// Training accuracy over the batches of this row.
    pub std_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub raw: Model,
    pub polyak: Option<Model>,
    pub history: Vec<HistoryRow>,
    pub steps: usize,
}

impl TrainedModel {
    /// Parameters used for evaluation and attacks: the Polyak average when
    /// enabled, otherwise the raw parameters.
    pub fn eval_model(&self) -> &Model {
        self.polyak.as_ref().unwrap_or(&self.raw)
    }

    pub fn into_eval_model(self) -> Model {
        self.polyak.unwrap_or(self.raw)
    }
}

#[derive(Default)]
struct Accum {
    loss: f64,
    ce: f64,
    rate: f64,
    correct: usize,
    seen: usize,
    batches: usize,
}

impl Accum {
    fn row(&self, epoch: usize) -> HistoryRow {
        let b = self.batches.max(1) as f64;
        HistoryRow {
            epoch,
            loss: self.loss / b,
            ce: self.ce / b,
            rate: self.rate / b,
            std_acc: self.correct as f64 / self.seen.max(1) as f64,
        }
    }
}

/// Train `model` (already initialized) on `source`.
///
/// Single-threaded and deterministic in `config.seed`. Returns raw and
/// Polyak-averaged parameters plus a loss history; a non-finite loss
/// aborts with [`Error::Diverged`] carrying the last finite parameters.
pub fn train(model: Model, source: &DataSource, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if source.dim() != model.spec.input_dim {
        return Err(Error::Data(format!(
            "dataset has {} features, model expects {}",
            source.dim(),
            model.spec.input_dim
        )));
    }
    if source.num_classes() > model.spec.num_classes {
        return Err(Error::Data("dataset has more classes than the model".into()));
    }
    let per_epoch = if config.resample {
        None
    } else {
        source.batches_per_epoch(config.batch_size)
    };
    let total_steps = match (config.duration, per_epoch) {
        (Duration::Iterations(n), _) => n,
        (Duration::Epochs(e), Some(per)) => e * per,
        (Duration::Epochs(_), None) => {
            return Err(Error::invalid("epoch-based training needs a fixed dataset"))
        }
    };

    let mut raw = model;
    let mut polyak = (config.polyak_decay > 0.0).then(|| raw.params.clone());
    let mut optimizer = Optimizer::new(config.optimizer, &raw.params);
    let mut history = Vec::new();
    let mut acc = Accum::default();
    let mut current_row = 0usize;
    let base_lr = config.optimizer.lr();

    let batches = batch_iterator(source, config.batch_size, config.seed, config.resample)?;
    for batch in batches.take(total_steps) {
        let (row_key, progress) = match per_epoch {
            Some(per) => (batch.epoch, batch.step as f64 / per as f64),
            None => (batch.step / config.log_every, batch.step as f64),
        };
        if row_key != current_row {
            history.push(acc.row(current_row));
            acc = Accum::default();
            current_row = row_key;
        }
        let lr = config.schedule.lr_at(base_lr, batch.epoch);
        let weight = config
            .anneal
            .as_ref()
            .map(|a| a.weight(&raw.spec, progress));

        let grads: Vec<Tensor> = {
            let tape = Tape::new();
            let bound = raw.bind(&tape, true);
            let x = tape.constant(batch.inputs);
            let mut noise_rng = rng::stream(config.seed, Purpose::TrainNoise, batch.step as u64, 0, 0);
            let parts = bound.loss(&x, &batch.labels, &mut Noise::Shared(&mut noise_rng), weight)?;
            let value = parts.loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: batch.epoch,
                    step: batch.step,
                    last_finite: Box::new(raw.params.clone()),
                });
            }
            acc.loss += value;
            acc.ce += parts.ce;
            acc.rate += parts.rate;
            acc.correct += parts.correct;
            acc.seen += batch.labels.len();
            acc.batches += 1;
            let g = tape.backward(&parts.loss)?;
            bound.params().iter().map(|p| g.wrt(p)).collect()
        };
        optimizer.step(&mut raw.params, &grads, lr);
        if let Some(avg) = polyak.as_mut() {
            polyak_update(avg, &raw.params, config.polyak_decay);
        }
    }
    if acc.batches > 0 {
        history.push(acc.row(current_row));
    }

    let polyak = polyak.map(|params| Model {
        spec: raw.spec.clone(),
        params,
    });
    Ok(TrainedModel {
        raw,
        polyak,
        history,
        steps: total_steps,
    })
}

/// `avg <- decay * avg + (1 - decay) * params`
pub(crate) fn polyak_update(avg: &mut Params, params: &Params, decay: f64) {
    for (a, p) in avg.tensors.iter_mut().zip(&params.tensors) {
        for (a, &p) in a.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * p;
        }
    }
}
