//! Deterministic, VIB and CEB classifiers.
//!
//! All three share one layout: a ReLU trunk, a linear head and a linear
//! decoder to class logits. VIB's head emits `2K` values (means, then
//! stddevs through the shifted softplus); CEB's head emits `K` means with
//! unit variance and carries an extra `[C, K]` matrix whose row `y` is the
//! class-conditional mean `mu_y`. The deterministic model's head is a plain
//! linear `K` layer, or absent for a purely linear classifier.

mod checkpoint;
mod forward;
mod init;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, PARAMS_FILE, SIDECAR_FILE};
pub use forward::{argmax, ceb_loss, vib_loss, BoundModel, EvalMode, LossParts, Noise, RateEstimator};
pub use init::{init_params, InitScheme};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{
    train, Anneal, Duration, HistoryRow, LrSchedule, TrainConfig, TrainedModel,
};

use crate::error::{Error, Result};
use crate::ndtape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Det,
    Vib,
    Ceb,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Det => "det",
            ModelKind::Vib => "vib",
            ModelKind::Ceb => "ceb",
        })
    }
}

/// Architecture plus the objective's hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Widths of the ReLU layers.
    pub hidden: Vec<usize>,
    /// Bottleneck size `K`. Required for VIB and CEB; optional for the
    /// deterministic model.
    pub bottleneck: Option<usize>,
    pub num_classes: usize,
    /// Map inputs `x -> 2x - 1` before the first layer.
    pub rescale_input: bool,
    /// VIB rate weight.
    pub beta: f64,
    /// CEB rate exponent; the rate is weighted by `exp(-rho)`.
    pub rho: f64,
    /// Encoder samples per input for training and stochastic evaluation.
    pub samples: usize,
    pub rate_estimator: RateEstimator,
}

impl ModelSpec {
    fn base(kind: ModelKind, input_dim: usize, hidden: Vec<usize>, k: Option<usize>, classes: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden,
            bottleneck: k,
            num_classes: classes,
            rescale_input: false,
            beta: 0.0,
            rho: 0.0,
            samples: 12,
            rate_estimator: RateEstimator::Analytic,
        }
    }

    /// 784 - 1024 - 1024 - 2K encoder with K = 256 and a linear decoder.
    pub fn mnist_vib(beta: f64) -> Self {
        Self {
            rescale_input: true,
            beta,
            ..Self::base(ModelKind::Vib, 784, vec![1024, 1024], Some(256), 10)
        }
    }

    pub fn mnist_ceb(rho: f64) -> Self {
        Self {
            rescale_input: true,
            rho,
            ..Self::base(ModelKind::Ceb, 784, vec![1024, 1024], Some(256), 10)
        }
    }

    /// 784 - 1024 - 1024 - K - 10, trained with plain cross-entropy.
    pub fn mnist_det() -> Self {
        Self {
            rescale_input: true,
            ..Self::base(ModelKind::Det, 784, vec![1024, 1024], Some(256), 10)
        }
    }

    /// Linear encoder to a `K`-dimensional bottleneck, linear decoder.
    pub fn toy_vib(input_dim: usize, k: usize, beta: f64) -> Self {
        Self {
            beta,
            ..Self::base(ModelKind::Vib, input_dim, Vec::new(), Some(k), 2)
        }
    }

    /// Single affine map from inputs to the two class logits.
    pub fn toy_linear(input_dim: usize) -> Self {
        Self::base(ModelKind::Det, input_dim, Vec::new(), None, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid("model needs inputs and at least two classes"));
        }
        if self.hidden.contains(&0) || self.bottleneck == Some(0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if matches!(self.kind, ModelKind::Vib | ModelKind::Ceb) && self.bottleneck.is_none() {
            return Err(Error::invalid(format!("{} model requires a bottleneck size", self.kind)));
        }
        if self.samples == 0 {
            return Err(Error::invalid("samples must be at least 1"));
        }
        if self.beta < 0.0 || !self.beta.is_finite() || !self.rho.is_finite() {
            return Err(Error::invalid("rate weights must be finite and beta >= 0"));
        }
        Ok(())
    }

    /// Weight applied to the rate term.
    pub fn rate_weight(&self) -> f64 {
        match self.kind {
            ModelKind::Det => 0.0,
            ModelKind::Vib => self.beta,
            ModelKind::Ceb => (-self.rho).exp(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind != ModelKind::Det
    }

    /// Default evaluation mode: stochastic with `samples` draws for
    /// bottleneck models, mean otherwise.
    pub fn default_eval_mode(&self) -> EvalMode {
        if self.is_stochastic() {
            EvalMode::Stochastic(self.samples)
        } else {
            EvalMode::Mean
        }
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut width = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), vec![width, h]));
            out.push((format!("trunk.{i}.bias"), vec![h]));
            width = h;
        }
        let classes = self.num_classes;
        match (self.kind, self.bottleneck) {
            (ModelKind::Det, None) => {}
            (ModelKind::Det, Some(k)) | (ModelKind::Ceb, Some(k)) => {
                out.push(("head.weight".into(), vec![width, k]));
                out.push(("head.bias".into(), vec![k]));
                width = k;
            }
            (ModelKind::Vib, Some(k)) => {
                out.push(("head.weight".into(), vec![width, 2 * k]));
                out.push(("head.bias".into(), vec![2 * k]));
                width = k;
            }
            (_, None) => unreachable!("validated: bottleneck models need K"),
        }
        out.push(("decoder.weight".into(), vec![width, classes]));
        out.push(("decoder.bias".into(), vec![classes]));
        if self.kind == ModelKind::Ceb {
            let k = self.bottleneck.unwrap_or(0);
            out.push(("class_means".into(), vec![classes, k]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub(crate) fn decoder_index(&self) -> usize {
        2 * self.hidden.len() + if self.kind == ModelKind::Det && self.bottleneck.is_none() { 0 } else { 2 }
    }
}

/// Flat list of parameter tensors in [`ModelSpec::param_shapes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            tensors: spec
                .param_shapes()
                .into_iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// A model: spec plus parameters. Frozen models are shared read-only
/// between attack workers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
}

impl Model {
    /// All-zero parameters; call [`init_params`] before training.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let params = Params::zeros(&spec);
        Ok(Self { spec, params })
    }

    pub fn with_params(spec: ModelSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.tensors.len()
            || shapes
                .iter()
                .zip(&params.tensors)
                .any(|((_, s), t)| s.as_slice() != t.shape())
        {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the model description".into(),
            ));
        }
        Ok(Self { spec, params })
    }

    /// Zero the decoder weights and bias.
    pub fn zero_decoder(&mut self) {
        let i = self.spec.decoder_index();
        for t in &mut self.params.tensors[i..i + 2] {
            t.data_mut().fill(0.0);
        }
    }
}
