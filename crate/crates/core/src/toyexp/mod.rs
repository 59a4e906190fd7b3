//! Drivers for the two synthetic tasks: the two-feature problem with a
//! robust `x1` and a weakly correlated `x2`, and the Tsipras construction
//! with one noisy label copy plus `d` shifted Gaussians. Both are
//! unbounded, so nothing here clips to `[0, 1]`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attacks::standard_accuracy;
use crate::datasets::{DataSource, LabeledDataset, Provenance, ToyTask, TsiprasSpec, X1_SCALE, X2_AGREEMENT};
use crate::diagnostics::ReportRow;
use crate::error::{Error, Result};
use crate::ibmodels::{init_params, train, EvalMode, HistoryRow, InitScheme, Model, ModelSpec, TrainConfig};
use crate::ndtape::Tensor;
use crate::rng::{self, open_unit, Purpose};

/// Label in `{-1, +1}` for class `0` / `1`.
fn signed(class: usize) -> f64 {
    if class == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Class `1` for positive values, `0` otherwise.
fn class_of(v: f64) -> usize {
    usize::from(v > 0.0)
}

fn check_batch(x: &Tensor, y: &[usize], dim: Option<usize>, op: &'static str) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != y.len() {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    if let Some(d) = dim {
        if x.shape()[1] != d {
            return Err(Error::Shape {
                op,
                lhs: x.shape().to_vec(),
                rhs: vec![y.len(), d],
            });
        }
    }
    if x.shape()[1] < 2 {
        return Err(Error::invalid(format!("{op} needs at least two features")));
    }
    Ok(())
}

/// Move `x2` by `epsilon` toward the wrong class: `x2 - epsilon * y`.
pub fn attack_ours_x2(x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    check_batch(x, y, Some(2), "attack_ours_x2")?;
    let mut out = x.clone();
    for (row, &label) in out.data_mut().chunks_mut(2).zip(y) {
        row[1] -= epsilon * signed(label);
    }
    Ok(out)
}

/// Shift every Gaussian feature by `-2 * eta * y`, moving its mean from
/// `eta * y` to `-eta * y`. `x1` is left alone.
pub fn attack_tsipras_shift(x: &Tensor, y: &[usize], eta: f64) -> Result<Tensor> {
    check_batch(x, y, None, "attack_tsipras_shift")?;
    let d = x.shape()[1];
    let mut out = x.clone();
    for (row, &label) in out.data_mut().chunks_mut(d).zip(y) {
        let shift = 2.0 * eta * signed(label);
        for v in &mut row[1..] {
            *v -= shift;
        }
    }
    Ok(out)
}

/// Draws from the two-feature task restricted to the 10% branch where `x2`
/// disagrees with the label. `x1` keeps its class-conditional law.
pub fn sample_low_density_adversarials(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let mut r = rng::stream(seed, Purpose::Toy, 2, 0, 0);
    let mut data = Vec::with_capacity(2 * n);
    let labels = (0..n)
        .map(|_| {
            let class = usize::from(rand::Rng::random::<bool>(&mut r));
            let y = signed(class);
            data.push(y * X1_SCALE * open_unit(&mut r));
            data.push(-y * open_unit(&mut r));
            class
        })
        .collect();
    LabeledDataset::new(Tensor::from_parts(vec![n, 2], data), labels, 2, Provenance::Derived)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRule {
    /// `sign(x1)`.
    SignX1,
    /// `sign(x2)`.
    SignX2,
    /// `sign(x2 + ... + x_{d+1})`.
    FeatureSum,
}

impl OracleRule {
    pub fn classify(&self, row: &[f64]) -> usize {
        class_of(match self {
            OracleRule::SignX1 => row[0],
            OracleRule::SignX2 => row[1],
            OracleRule::FeatureSum => row[1..].iter().sum(),
        })
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> f64 {
        let d = x.shape()[1];
        let hits = x
            .data()
            .chunks(d)
            .zip(y)
            .filter(|(row, &l)| self.classify(row) == l)
            .count();
        hits as f64 / y.len().max(1) as f64
    }
}

/// A closed-form classifier with its exact accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub name: String,
    pub rule: OracleRule,
    pub clean: f64,
    /// Under the task's attack (`attack_ours_x2` with ε = 1, or the
    /// Tsipras shift with the task's η).
    pub robust: f64,
    /// On the low-density set; two-feature task only.
    pub low_density: Option<f64>,
}

/// Oracle classifiers for `task` with analytic accuracies.
///
/// Two-feature task under `x2 - y`: an agreeing draw `x2 = y·u`, `u ∈ (0, 1]`,
/// becomes `y·(u - 1)`, which is never on the label's side, and a
/// disagreeing draw moves further away. So `sign(x2)` drops from 0.9 to 0.
pub fn bayes_oracles(task: &ToyTask) -> Result<Vec<Oracle>> {
    task.validate()?;
    Ok(match task {
        ToyTask::Ours => vec![
            Oracle {
                name: "sign_x1".into(),
                rule: OracleRule::SignX1,
                clean: 1.0,
                robust: 1.0,
                low_density: Some(1.0),
            },
            Oracle {
                name: "sign_x2".into(),
                rule: OracleRule::SignX2,
                clean: X2_AGREEMENT,
                robust: 0.0,
                low_density: Some(0.0),
            },
        ],
        ToyTask::Tsipras(spec) => {
            let phi = |v: f64| Normal::standard().cdf(v);
            let scale = spec.eta * (spec.d as f64).sqrt();
            vec![
                Oracle {
                    name: "sign_x1".into(),
                    rule: OracleRule::SignX1,
                    clean: spec.p,
                    robust: spec.p,
                    low_density: None,
                },
                Oracle {
                    name: "sign_x2".into(),
                    rule: OracleRule::SignX2,
                    clean: phi(spec.eta),
                    robust: phi(-spec.eta),
                    low_density: None,
                },
                Oracle {
                    name: "feature_sum".into(),
                    rule: OracleRule::FeatureSum,
                    clean: phi(scale),
                    robust: phi(-scale),
                    low_density: None,
                },
            ]
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ToyModel {
    /// Affine map to two logits, zero-initialized.
    LinearDet,
    /// Linear encoder to a Gaussian bottleneck and a zero-initialized linear
    /// decoder. The bottleneck defaults to 2 (ours) or 25 (Tsipras).
    Vib { bottleneck: Option<usize> },
}

impl ToyModel {
    fn name(&self) -> &'static str {
        match self {
            ToyModel::LinearDet => "linear_det",
            ToyModel::Vib { .. } => "vib",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub task: ToyTask,
    pub model: ToyModel,
    /// VIB rate weight.
    pub beta: f64,
    /// Encoder samples for training and stochastic evaluation.
    pub samples: usize,
    /// Training iterations; 1000 for ours and 200 for Tsipras when unset.
    pub iterations: Option<usize>,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for ToyRunConfig {
    fn default() -> Self {
        Self {
            task: ToyTask::Ours,
            model: ToyModel::Vib { bottleneck: None },
            beta: 0.5,
            samples: 12,
            iterations: None,
            eval_size: 10_000,
            seed: 0,
        }
    }
}

impl ToyRunConfig {
    pub fn new(task: ToyTask, model: ToyModel, seed: u64) -> Self {
        Self {
            task,
            model,
            seed,
            ..Self::default()
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.task {
            ToyTask::Ours => 1000,
            ToyTask::Tsipras(_) => 200,
        })
    }

    pub fn bottleneck(&self) -> Option<usize> {
        match self.model {
            ToyModel::LinearDet => None,
            ToyModel::Vib { bottleneck } => Some(bottleneck.unwrap_or(match self.task {
                ToyTask::Ours => 2,
                ToyTask::Tsipras(_) => 25,
            })),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let d = self.task.dim();
        match self.bottleneck() {
            None => ModelSpec::toy_linear(d),
            Some(k) => ModelSpec {
                samples: self.samples,
                ..ModelSpec::toy_vib(d, k, self.beta)
            },
        }
    }

    pub fn model_id(&self) -> String {
        let which = match self.task {
            ToyTask::Ours => "ours",
            ToyTask::Tsipras(_) => "tsipras",
        };
        format!("toy-{which}-{}", self.model.name())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.eval_size == 0 || self.iterations() == 0 {
            return Err(Error::invalid("eval size and iterations must be positive"));
        }
        self.model_spec().validate()
    }

    /// The fixed evaluation sample.
    pub fn eval_set(&self) -> Result<LabeledDataset> {
        self.task
            .sample_with(self.eval_size, &mut rng::stream(self.seed, Purpose::ToyEval, 0, 0, 0))
    }

    /// The initialized, untrained model: zeros for the linear model; Xavier
    /// encoder and zero decoder for VIB.
    pub fn initial_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_spec())?;
        if self.bottleneck().is_some() {
            init_params(&mut model, InitScheme::XavierUniform, self.seed);
            model.zero_decoder();
        }
        Ok(model)
    }
}

/// Caveat attached to Tsipras reports.
pub const TSIPRAS_CAVEAT: &str = "accuracy after the shift is scored against the generating label, \
although the shifted features may favour the other class under the data distribution";

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub config: ToyRunConfig,
    pub rows: Vec<ReportRow>,
    pub oracles: Vec<Oracle>,
    pub history: Vec<HistoryRow>,
    pub model: Model,
    pub caveat: Option<&'static str>,
}

impl ToyReport {
    /// First row for `attack` in `mode`.
    pub fn row(&self, attack: &str, mode: EvalMode) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.attack == attack && r.eval_mode == mode)
    }
}

/// Train the configured model with the toy recipe and score it.
///
/// Rows per evaluation mode (mean for the linear model; stochastic and mean
/// for VIB). Two-feature task: `x2_shift` (ε = 1) and `low_density`, whose
/// robust column is accuracy on the pre-drawn low-density set (ε is
/// reported as 0 since that set is not a bounded perturbation). Tsipras:
/// `tsipras_shift` with ε = 2η. Clean accuracy is the standard column of
/// every row.
pub fn run_toy(config: &ToyRunConfig) -> Result<ToyReport> {
    config.validate()?;
    let model = config.initial_model()?;
    let recipe = TrainConfig::toy(config.iterations(), config.seed);
    let trained = train(model, &DataSource::Toy(config.task), &recipe)?;
    let history = trained.history.clone();
    let model = trained.into_eval_model();

    let eval = config.eval_set()?;
    let (x, y) = (eval.inputs(), eval.labels());
    let ids: Vec<usize> = (0..y.len()).collect();
    let modes = if model.spec.is_stochastic() {
        vec![EvalMode::Stochastic(config.samples), EvalMode::Mean]
    } else {
        vec![EvalMode::Mean]
    };
    let mut attacked: Vec<(&str, f64, LabeledDataset)> = Vec::new();
    match config.task {
        ToyTask::Ours => {
            let shifted = attack_ours_x2(x, y, 1.0)?;
            attacked.push(("x2_shift", 1.0, LabeledDataset::new(shifted, y.to_vec(), 2, Provenance::Derived)?));
            let low = sample_low_density_adversarials(config.eval_size, config.seed)?;
            attacked.push(("low_density", 0.0, low));
        }
        ToyTask::Tsipras(TsiprasSpec { eta, .. }) => {
            let shifted = attack_tsipras_shift(x, y, eta)?;
            attacked.push(("tsipras_shift", 2.0 * eta, LabeledDataset::new(shifted, y.to_vec(), 2, Provenance::Derived)?));
        }
    }

    let mut rows = Vec::new();
    for &mode in &modes {
        let clean = standard_accuracy(&model, x, y, &ids, mode, config.seed)?.accuracy;
        for (name, epsilon, set) in &attacked {
            let robust = standard_accuracy(&model, set.inputs(), set.labels(), &ids, mode, config.seed)?.accuracy;
            rows.push(ReportRow {
                model_id: config.model_id(),
                seed: config.seed,
                attack: name.to_string(),
                epsilon: *epsilon,
                restarts: 1,
                eval_mode: mode,
                standard_acc: clean,
                robust_acc: robust,
                n_examples: y.len(),
            });
        }
    }
    Ok(ToyReport {
        config: config.clone(),
        rows,
        oracles: bayes_oracles(&config.task)?,
        history,
        model,
        caveat: matches!(config.task, ToyTask::Tsipras(_)).then_some(TSIPRAS_CAVEAT),
    })
}
