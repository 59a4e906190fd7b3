use ibrobust::attacks::{standard_accuracy, AttackConfig};
use ibrobust::diagnostics::{collapse_filter, collapse_threshold, gray_image_check, restart_curve, Flag, RobustnessReport};
use serde::Serialize;

use crate::data::{dataset_for, load_examples, load_model, model_id};
use crate::error::CliResult;
use crate::run::RunDir;
use crate::settings::DiagnoseSettings;

#[derive(Serialize)]
struct Flags {
    /// `None` when the inputs are not images in `[0, 1]`.
    gray_check: Option<bool>,
    collapse: bool,
    /// Robust accuracy still falls between the last two restart counts.
    restart_decay: bool,
    details: Vec<Flag>,
    notes: Vec<String>,
}

/// Gray-image check, restart curve and collapse test in `flags.json`, with
/// the curve in `restart_curve.csv` and its rows in `report.csv`.
pub fn run(s: &DiagnoseSettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    let (model, meta) = load_model(&s.checkpoint, run)?;
    let data = s.eval_data();
    let name = dataset_for(&data, &model)?;
    let ex = load_examples(&data, name, run)?;
    let mode = s.mode.unwrap_or(model.spec.default_eval_mode());
    let id = model_id(&s.model_id, name, &model);
    let standard = standard_accuracy(&model, &ex.x, &ex.y, &ex.ids, mode, s.seed)?.accuracy;
    let mut details = Vec::new();
    let mut notes = Vec::new();

    let in_box = ex.x.data().iter().all(|v| (0.0..=1.0).contains(v));
    let gray_check = if in_box {
        let g = gray_image_check(&model, &ex.x, &ex.y, mode, s.seed)?;
        details.push(g.flag());
        Some(g.flagged)
    } else {
        notes.push(format!("gray-image check skipped: {} inputs are not in [0, 1]", name.as_str()));
        None
    };

    let cfg = AttackConfig {
        epsilon: s.curve_eps,
        alpha: s.alpha,
        steps: s.steps,
        grad_mode: Some(mode),
        eval_mode: Some(mode),
        seed: s.seed,
        bounds: ex.bounds,
        ..AttackConfig::default()
    };
    let curve = restart_curve(&model, &ex.x, &ex.y, &ex.ids, &cfg, &s.curve_restarts)?;
    curve.write_csv(&run.output("restart_curve.csv")?)?;
    let accs = &curve.robust_acc;
    let restart_decay = accs.len() >= 2 && accs[accs.len() - 1] < accs[accs.len() - 2];
    let mut values: Vec<(String, f64)> = curve
        .counts
        .iter()
        .zip(accs)
        .map(|(c, a)| (format!("robust_acc_r{c}"), *a))
        .collect();
    values.sort_by(|a, b| a.0.cmp(&b.0));
    let refs: Vec<(&str, f64)> = values.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    details.push(Flag::new("restart_decay", restart_decay, &refs));

    let mut report = RobustnessReport::new();
    for row in curve.rows(&id, meta.seed, s.curve_eps, mode, standard) {
        report.push(row)?;
    }
    let classes = model.spec.num_classes;
    let (_, excluded) = collapse_filter(&report.rows, classes);
    let collapse = !excluded.is_empty();
    details.push(Flag::new(
        "collapse",
        collapse,
        &[("standard_acc", standard), ("threshold", collapse_threshold(classes))],
    ));
    for f in &details {
        report.flag(f.clone());
    }
    report.write_csv(&run.output("report.csv")?)?;
    report.write_json(&run.output("report.json")?)?;

    let flags = Flags {
        gray_check,
        collapse,
        restart_decay,
        details,
        notes,
    };
    super::write_json(&run.output("flags.json")?, &flags)?;
    Ok(vec![s.seed])
}
