use std::path::{Path, PathBuf};

use ibrobust::diagnostics::{collapse_filter, read_rows_csv, write_rows_csv, ReportRow};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::ReportSettings;

/// Files holding report rows inside a run directory.
const ROW_FILES: [&str; 2] = ["report.csv", "toy.csv"];

fn row_file(p: &Path) -> CliResult<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    ROW_FILES
        .iter()
        .map(|f| p.join(f))
        .find(|f| f.is_file())
        .ok_or_else(|| CliError::data(format!("{}: no report rows found", p.display())))
}

#[derive(Serialize)]
struct Aggregate {
    model_id: String,
    attack: String,
    epsilon: f64,
    restarts: usize,
    eval_mode: String,
    runs: usize,
    n_examples: usize,
    standard_min: f64,
    standard_mean: f64,
    standard_max: f64,
    robust_min: f64,
    robust_mean: f64,
    robust_max: f64,
}

#[derive(Serialize)]
struct Excluded {
    model_id: String,
    seed: u64,
    standard_acc: f64,
    threshold: f64,
}

fn key(r: &ReportRow) -> (String, String, u64, usize, String) {
    (
        r.model_id.clone(),
        r.attack.clone(),
        r.epsilon.to_bits(),
        r.restarts,
        r.eval_mode.to_string(),
    )
}

fn stats(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let n = v.clone().count() as f64;
    let min = v.clone().fold(f64::INFINITY, f64::min);
    let max = v.clone().fold(f64::NEG_INFINITY, f64::max);
    (min, v.sum::<f64>() / n, max)
}

/// Concatenated rows (`rows.csv`), collapsed runs (`exclusions.csv`) and
/// min/mean/max over the remaining seeds (`aggregate.csv`). Inputs are only
/// read.
pub fn run(s: &ReportSettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    if s.inputs.is_empty() {
        return Err(CliError::config("report needs at least one input"));
    }
    if s.num_classes < 2 {
        return Err(CliError::config("num_classes must be at least 2"));
    }
    let mut rows = Vec::new();
    for p in &s.inputs {
        let f = row_file(p)?;
        run.input(&f)?;
        rows.extend(read_rows_csv(&f)?);
    }
    write_rows_csv(&run.output("rows.csv")?, &rows)?;

    let (kept, excluded) = collapse_filter(&rows, s.num_classes);
    let mut w = csv::Writer::from_path(run.output("exclusions.csv")?)?;
    if excluded.is_empty() {
        w.write_record(["model_id", "seed", "standard_acc", "threshold"])?;
    }
    for e in excluded {
        w.serialize(Excluded {
            model_id: e.model_id,
            seed: e.seed,
            standard_acc: e.standard_acc,
            threshold: e.threshold,
        })?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;

    let mut groups: Vec<(_, Vec<&ReportRow>)> = Vec::new();
    for r in &kept {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, members)) => members.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    let mut w = csv::Writer::from_path(run.output("aggregate.csv")?)?;
    if groups.is_empty() {
        w.write_record([
            "model_id", "attack", "epsilon", "restarts", "eval_mode", "runs", "n_examples",
            "standard_min", "standard_mean", "standard_max", "robust_min", "robust_mean", "robust_max",
        ])?;
    }
    for (_, members) in &groups {
        let first = members[0];
        let (standard_min, standard_mean, standard_max) = stats(members.iter().map(|r| r.standard_acc));
        let (robust_min, robust_mean, robust_max) = stats(members.iter().map(|r| r.robust_acc));
        w.serialize(Aggregate {
            model_id: first.model_id.clone(),
            attack: first.attack.clone(),
            epsilon: first.epsilon,
            restarts: first.restarts,
            eval_mode: first.eval_mode.to_string(),
            runs: members.len(),
            n_examples: members.iter().map(|r| r.n_examples).sum(),
            standard_min,
            standard_mean,
            standard_max,
            robust_min,
            robust_mean,
            robust_max,
        })?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(seeds)
}
