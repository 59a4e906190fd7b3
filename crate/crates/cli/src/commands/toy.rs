use std::fs::File;
use std::io::{BufWriter, Write};

use ibrobust::datasets::{ToyTask, TsiprasSpec};
use ibrobust::diagnostics::{write_rows_csv, ReportRow};
use ibrobust::ibmodels::{save_checkpoint, CheckpointMeta, PARAMS_FILE, SIDECAR_FILE};
use ibrobust::toyexp::{run_toy, Oracle, ToyModel, ToyRunConfig};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::{ToyModelName, ToySettings, ToyWhich};

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ToyRunConfig,
    model_id: String,
    rows: &'a [ReportRow],
    oracles: &'a [Oracle],
    caveat: Option<&'a str>,
}

impl ToySettings {
    fn config(&self) -> ToyRunConfig {
        let task = match self.which {
            ToyWhich::Ours => ToyTask::Ours,
            ToyWhich::Tsipras => ToyTask::Tsipras(TsiprasSpec::default()),
        };
        let model = match self.model {
            ToyModelName::LinearDet => ToyModel::LinearDet,
            ToyModelName::Vib => ToyModel::Vib {
                bottleneck: self.bottleneck,
            },
        };
        ToyRunConfig {
            beta: self.beta,
            samples: self.samples,
            iterations: self.iterations,
            eval_size: self.eval_size,
            ..ToyRunConfig::new(task, model, self.seed)
        }
    }
}

/// `toy.csv` (rows), `toy.json` (rows, oracles, caveat), `history.csv`,
/// the trained model under `model/`, and optionally `scatter.csv`.
pub fn run(s: &ToySettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    if s.model == ToyModelName::LinearDet && s.bottleneck.is_some() {
        return Err(CliError::config("`bottleneck` applies to the vib model only"));
    }
    let cfg = s.config();
    let report = run_toy(&cfg)?;
    write_rows_csv(&run.output("toy.csv")?, &report.rows)?;
    let summary = Summary {
        config: &cfg,
        model_id: cfg.model_id(),
        rows: &report.rows,
        oracles: &report.oracles,
        caveat: report.caveat,
    };
    super::write_json(&run.output("toy.json")?, &summary)?;
    let mut w = csv::Writer::from_path(run.output("history.csv")?)?;
    for row in &report.history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;

    let meta = CheckpointMeta {
        seed: s.seed,
        epoch: report.history.last().map_or(0, |r| r.epoch),
        standard_accuracy: report.rows.first().map(|r| r.standard_acc),
        polyak: false,
    };
    let blob = run.output(format!("model/{PARAMS_FILE}"))?;
    run.output(format!("model/{SIDECAR_FILE}"))?;
    save_checkpoint(blob.parent().expect("model dir"), &report.model, &meta)?;

    if let Some(n) = s.scatter {
        let train_draws = cfg.task.sample(n, s.seed)?;
        let path = run.output("scatter.csv")?;
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        train_draws.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(vec![s.seed])
}
