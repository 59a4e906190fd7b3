use std::path::{Path, PathBuf};

use ibrobust::attacks::Bounds;
use ibrobust::datasets::{load_mnist_dir, LabeledDataset, MnistSplit, ToyTask, TsiprasSpec};
use ibrobust::ibmodels::{load_checkpoint, CheckpointMeta, Model, PARAMS_FILE, SIDECAR_FILE};
use ibrobust::toyexp::{ToyModel, ToyRunConfig};
use ibrobust::Tensor;

use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::{DatasetName, EvalData, DATA_DIR_ENV};

pub const TOY_EVAL_SIZE: usize = 10_000;

impl DatasetName {
    pub fn toy_task(self) -> Option<ToyTask> {
        match self {
            DatasetName::Mnist => None,
            DatasetName::ToyOurs => Some(ToyTask::Ours),
            DatasetName::ToyTsipras => Some(ToyTask::Tsipras(TsiprasSpec::default())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::ToyOurs => "toy-ours",
            DatasetName::ToyTsipras => "toy-tsipras",
        }
    }

    /// The dataset whose inputs have `dim` features.
    pub fn infer(dim: usize) -> CliResult<Self> {
        [DatasetName::Mnist, DatasetName::ToyOurs, DatasetName::ToyTsipras]
            .into_iter()
            .find(|d| d.dim() == dim)
            .ok_or_else(|| CliError::config(format!("no dataset has {dim} input features; pass --dataset")))
    }

    /// Image data lives in `[0, 1]`; toy features are unbounded.
    pub fn bounds(self) -> Bounds {
        match self {
            DatasetName::Mnist => Bounds::UNIT,
            _ => Bounds::Unbounded,
        }
    }

    pub fn dim(self) -> usize {
        match self.toy_task() {
            Some(t) => t.dim(),
            None => 784,
        }
    }
}

pub fn mnist_dir(dir: &Option<PathBuf>) -> CliResult<&Path> {
    dir.as_deref().ok_or_else(|| {
        CliError::data(format!("no MNIST directory: pass --data-dir or set {DATA_DIR_ENV}"))
    })
}

/// Load an MNIST split and record its files as run inputs.
pub fn load_mnist(dir: &Path, split: MnistSplit, run: &mut RunDir) -> CliResult<LabeledDataset> {
    let (img, lbl) = split.paths(dir);
    for p in [&img, &lbl] {
        if !p.is_file() {
            return Err(CliError::data(format!("missing MNIST file {}", p.display())));
        }
        run.input(p)?;
    }
    Ok(load_mnist_dir(dir, split)?)
}

/// The fixed toy evaluation sample for `seed`.
pub fn toy_eval(task: ToyTask, n: usize, seed: u64) -> CliResult<LabeledDataset> {
    let cfg = ToyRunConfig {
        eval_size: n,
        ..ToyRunConfig::new(task, ToyModel::LinearDet, seed)
    };
    Ok(cfg.eval_set()?)
}

pub fn load_model(dir: &Path, run: &mut RunDir) -> CliResult<(Model, CheckpointMeta)> {
    for f in [SIDECAR_FILE, PARAMS_FILE] {
        let p = dir.join(f);
        if !p.is_file() {
            return Err(CliError::data(format!("missing checkpoint file {}", p.display())));
        }
        run.input(&p)?;
    }
    Ok(load_checkpoint(dir)?)
}

/// Examples selected for evaluation, with their dataset indices.
pub struct Examples {
    pub bounds: Bounds,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Examples {
    pub fn len(&self) -> usize {
        self.y.len()
    }
}

pub fn dataset_for(data: &EvalData, model: &Model) -> CliResult<DatasetName> {
    let name = match data.dataset {
        Some(d) => d,
        None => DatasetName::infer(model.spec.input_dim)?,
    };
    if name.dim() != model.spec.input_dim {
        return Err(CliError::data(format!(
            "checkpoint expects {} features but {} has {}",
            model.spec.input_dim,
            name.as_str(),
            name.dim()
        )));
    }
    Ok(name)
}

pub fn load_examples(data: &EvalData, name: DatasetName, run: &mut RunDir) -> CliResult<Examples> {
    let full = match name.toy_task() {
        Some(task) => {
            let n = data.offset + data.limit.unwrap_or(TOY_EVAL_SIZE);
            toy_eval(task, n, data.data_seed)?
        }
        None => load_mnist(mnist_dir(&data.data_dir)?, MnistSplit::Test, run)?,
    };
    let end = match data.limit {
        Some(l) => data.offset.saturating_add(l),
        None => full.len(),
    };
    if data.offset >= end || end > full.len() {
        return Err(CliError::config(format!(
            "examples {}..{end} are outside the {} available",
            data.offset,
            full.len()
        )));
    }
    let part = full.slice(data.offset..end);
    Ok(Examples {
        bounds: name.bounds(),
        x: part.inputs().clone(),
        y: part.labels().to_vec(),
        ids: (data.offset..end).collect(),
    })
}

/// `<dataset>-<kind>` unless the settings name the model.
pub fn model_id(given: &Option<String>, name: DatasetName, model: &Model) -> String {
    given
        .clone()
        .unwrap_or_else(|| format!("{}-{}", name.as_str(), model.spec.kind))
}
