use std::sync::Arc;

use ibrobust::attacks::standard_accuracy;
use ibrobust::datasets::{DataSource, LabeledDataset, MnistSplit};
use ibrobust::ibmodels::{
    init_params, save_checkpoint, train, CheckpointMeta, Duration, HistoryRow, InitScheme, Model,
    ModelKind, ModelSpec, TrainConfig, TrainedModel,
};
use ibrobust::toyexp::{ToyModel, ToyRunConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{load_mnist, mnist_dir};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::{DatasetName, TrainSettings};

/// Model, recipe, training source and evaluation set for one seed.
struct Job {
    model: Model,
    recipe: TrainConfig,
    source: DataSource,
    eval: Arc<LabeledDataset>,
}

fn mnist_spec(s: &TrainSettings) -> ModelSpec {
    let mut spec = match s.model {
        ModelKind::Vib => ModelSpec::mnist_vib(s.beta),
        ModelKind::Ceb => ModelSpec::mnist_ceb(s.rho),
        ModelKind::Det => ModelSpec::mnist_det(),
    };
    if let Some(h) = &s.hidden {
        spec.hidden = h.clone();
    }
    if s.bottleneck.is_some() {
        spec.bottleneck = s.bottleneck;
    }
    spec
}

fn toy_config(s: &TrainSettings, seed: u64) -> CliResult<ToyRunConfig> {
    let task = s.dataset.toy_task().expect("toy dataset");
    let model = match s.model {
        ModelKind::Det => ToyModel::LinearDet,
        ModelKind::Vib => ToyModel::Vib {
            bottleneck: s.bottleneck,
        },
        ModelKind::Ceb => return Err(CliError::config("toy datasets support the det and vib models only")),
    };
    let cfg = ToyRunConfig {
        beta: s.beta,
        iterations: s.iterations,
        eval_size: s.eval_limit.unwrap_or(crate::data::TOY_EVAL_SIZE),
        ..ToyRunConfig::new(task, model, seed)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn jobs(s: &TrainSettings, run: &mut RunDir) -> CliResult<Vec<Job>> {
    if s.seeds.is_empty() {
        return Err(CliError::config("no seeds to train"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = s.seeds.iter().find(|&&x| !seen.insert(x)) {
        return Err(CliError::config(format!("seed {dup} is listed twice")));
    }
    let mnist = s.dataset == DatasetName::Mnist;
    let misplaced = if mnist {
        s.iterations.map(|_| "iterations")
    } else {
        [
            (s.epochs.is_some(), "epochs"),
            (s.hidden.is_some(), "hidden"),
            (s.train_limit.is_some(), "train_limit"),
        ]
        .into_iter()
        .find_map(|(set, key)| set.then_some(key))
    };
    if let Some(key) = misplaced {
        return Err(CliError::config(format!("`{key}` does not apply to dataset {}", s.dataset.as_str())));
    }
    match s.dataset {
        DatasetName::Mnist => {
            let dir = mnist_dir(&s.data_dir)?;
            let mut train_set = load_mnist(dir, MnistSplit::Train, run)?;
            let mut test_set = load_mnist(dir, MnistSplit::Test, run)?;
            if let Some(n) = s.train_limit {
                train_set = train_set.slice(0..n);
            }
            if let Some(n) = s.eval_limit {
                test_set = test_set.slice(0..n);
            }
            let (train_set, test_set) = (Arc::new(train_set), Arc::new(test_set));
            let spec = mnist_spec(s);
            spec.validate()?;
            s.seeds
                .iter()
                .map(|&seed| {
                    let mut model = Model::new(spec.clone())?;
                    init_params(&mut model, InitScheme::XavierUniform, seed);
                    let mut recipe = TrainConfig::mnist(seed);
                    if let Some(e) = s.epochs {
                        recipe.duration = Duration::Epochs(e);
                    }
                    Ok(Job {
                        model,
                        recipe,
                        source: DataSource::Fixed(train_set.clone()),
                        eval: test_set.clone(),
                    })
                })
                .collect()
        }
        _ => s
            .seeds
            .iter()
            .map(|&seed| {
                let cfg = toy_config(s, seed)?;
                Ok(Job {
                    model: cfg.initial_model()?,
                    recipe: TrainConfig::toy(cfg.iterations(), seed),
                    source: DataSource::Toy(cfg.task),
                    eval: Arc::new(cfg.eval_set()?),
                })
            })
            .collect(),
    }
}

fn fit(job: Job) -> CliResult<(TrainedModel, f64)> {
    let trained = train(job.model, &job.source, &job.recipe)?;
    let model = trained.eval_model();
    let ids: Vec<usize> = (0..job.eval.len()).collect();
    let acc = standard_accuracy(
        model,
        job.eval.inputs(),
        job.eval.labels(),
        &ids,
        model.spec.default_eval_mode(),
        job.recipe.seed,
    )?
    .accuracy;
    Ok((trained, acc))
}

#[derive(Serialize)]
struct SeedHistory {
    seed: u64,
    epoch: usize,
    loss: f64,
    ce: f64,
    rate: f64,
    std_acc: f64,
}

impl SeedHistory {
    fn new(seed: u64, r: &HistoryRow) -> Self {
        Self {
            seed,
            epoch: r.epoch,
            loss: r.loss,
            ce: r.ce,
            rate: r.rate,
            std_acc: r.std_acc,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    checkpoint: String,
    standard_acc: f64,
    steps: usize,
}

/// One checkpoint directory per seed (`seed-<s>/`) with its own history,
/// plus a sweep-wide history and summary.
pub fn run(s: &TrainSettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    let jobs = jobs(s, run)?;
    let results: Vec<(TrainedModel, f64)> = jobs.into_par_iter().map(fit).collect::<CliResult<_>>()?;

    let all_history = run.output("history.csv")?;
    let mut all = csv::Writer::from_path(&all_history)?;
    let mut summary = csv::Writer::from_path(run.output("summary.csv")?)?;
    for (&seed, (trained, acc)) in s.seeds.iter().zip(&results) {
        let dir = format!("seed-{seed}");
        let epochs = trained.history.last().map_or(0, |r| r.epoch);
        let meta = CheckpointMeta {
            seed,
            epoch: epochs,
            standard_accuracy: Some(*acc),
            polyak: trained.polyak.is_some(),
        };
        let ckpt = run.output(format!("{dir}/{}", ibrobust::ibmodels::PARAMS_FILE))?;
        run.output(format!("{dir}/{}", ibrobust::ibmodels::SIDECAR_FILE))?;
        save_checkpoint(ckpt.parent().expect("seed dir"), trained.eval_model(), &meta)?;

        let mut w = csv::Writer::from_path(run.output(format!("{dir}/history.csv"))?)?;
        for row in &trained.history {
            w.serialize(row)?;
            all.serialize(SeedHistory::new(seed, row))?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
        summary.serialize(Summary {
            seed,
            checkpoint: dir,
            standard_acc: *acc,
            steps: trained.steps,
        })?;
    }
    all.flush().map_err(|e| CliError::io(&all_history, e))?;
    summary.flush().map_err(|e| CliError::data(e.to_string()))?;
    Ok(s.seeds.clone())
}
