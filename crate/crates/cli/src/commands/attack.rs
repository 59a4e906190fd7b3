use ibrobust::attacks::{
    ensemble_aa_mt, run_attack, standard_accuracy, write_records_csv, AttackConfig, AttackRecord,
    EnsembleConfig, Family, LossKind,
};
use ibrobust::diagnostics::{point_loss, ReportRow, RobustnessReport};
use ibrobust::ibmodels::{EvalMode, Model};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{dataset_for, load_examples, load_model, model_id, Examples};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::{AttackSettings, FamilyName, LossName};

impl FamilyName {
    fn family(self) -> Family {
        match self {
            FamilyName::Fgs => Family::Fgs,
            FamilyName::Pgd => Family::Pgd,
            FamilyName::Apgd => Family::AutoPgd,
            FamilyName::Mt => Family::MultiTargeted,
        }
    }
}

/// Step count and size for `family` unless the settings give them.
fn budget(s: &AttackSettings, eps: f64) -> (usize, f64) {
    let (steps, alpha) = match s.family {
        FamilyName::Fgs => (1, eps),
        FamilyName::Pgd => (40, 0.01),
        FamilyName::Apgd => (100, 2.0 * eps),
        FamilyName::Mt => (200, eps / 4.0),
    };
    (s.steps.unwrap_or(steps), s.alpha.unwrap_or(alpha).max(f64::MIN_POSITIVE))
}

fn check(s: &AttackSettings) -> CliResult<()> {
    if s.eps.is_empty() {
        return Err(CliError::config("no epsilon given"));
    }
    if s.suite.is_some() {
        let custom = s.steps.is_some() || s.alpha.is_some() || s.restarts != [1] || s.loss != LossName::default();
        if custom {
            return Err(CliError::config(
                "the aa+mt suite uses its own steps, step sizes, restarts and losses",
            ));
        }
        return Ok(());
    }
    if s.restarts.first() == Some(&0) || s.restarts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::config("restart counts must be positive and strictly increasing"));
    }
    if s.family == FamilyName::Fgs && s.restarts != [1] {
        return Err(CliError::config("fgs is deterministic and takes a single restart"));
    }
    Ok(())
}

#[derive(Serialize)]
struct CurvePoint {
    epsilon: f64,
    restarts: usize,
    robust_acc: f64,
}

#[derive(Serialize)]
struct CleanLoss {
    example_id: usize,
    label: usize,
    loss: f64,
}

struct Ctx<'a> {
    s: &'a AttackSettings,
    model: &'a Model,
    ex: &'a Examples,
    mode: EvalMode,
    id: String,
    seed: u64,
    standard: f64,
}

impl Ctx<'_> {
    fn row(&self, attack: String, epsilon: f64, restarts: usize, robust: f64) -> ReportRow {
        ReportRow {
            model_id: self.id.clone(),
            seed: self.seed,
            attack,
            epsilon,
            restarts,
            eval_mode: self.mode,
            standard_acc: self.standard,
            robust_acc: robust,
            n_examples: self.ex.len(),
        }
    }

    /// Rows per restart count plus the curve.
    fn single(&self, eps: f64, report: &mut RobustnessReport, curve: &mut Vec<CurvePoint>) -> CliResult<Vec<AttackRecord>> {
        let s = self.s;
        let (steps, alpha) = budget(s, eps);
        let cfg = AttackConfig {
            epsilon: eps,
            alpha,
            steps,
            restarts: *s.restarts.last().expect("checked nonempty"),
            loss: match (s.family, s.loss) {
                (FamilyName::Mt, _) | (_, LossName::Margin) => LossKind::Margin(None),
                (_, LossName::CrossEntropy) => LossKind::CrossEntropy,
                (_, LossName::Dlr) => LossKind::Dlr,
            },
            grad_mode: Some(self.mode),
            eval_mode: Some(self.mode),
            seed: s.seed,
            random_init: s.family != FamilyName::Fgs,
            chunk_size: s.chunk_size,
            bounds: self.ex.bounds,
            ..AttackConfig::default()
        };
        let family = s.family.family();
        let res = run_attack(self.model, &self.ex.x, &self.ex.y, &self.ex.ids, family, &cfg)?;
        for &r in &s.restarts {
            let acc = res.accuracy_at_restarts(r);
            report.push(self.row(family.to_string(), eps, r, acc))?;
            if s.restarts.len() > 1 {
                curve.push(CurvePoint {
                    epsilon: eps,
                    restarts: r,
                    robust_acc: acc,
                });
            }
        }
        Ok(res.records(&family.to_string()))
    }

    /// One row per stage with accuracy after that stage.
    fn suite(&self, eps: f64, report: &mut RobustnessReport) -> CliResult<Vec<AttackRecord>> {
        let defaults = EnsembleConfig::default();
        let cfg = EnsembleConfig {
            epsilon: eps,
            seed: self.s.seed,
            grad_mode: Some(self.mode),
            eval_mode: Some(self.mode),
            chunk_size: self.s.chunk_size,
            bounds: self.ex.bounds,
            ..defaults.clone()
        };
        let res = ensemble_aa_mt(self.model, &self.ex.x, &self.ex.y, &self.ex.ids, &cfg)?;
        let n = self.ex.len() as f64;
        let mut alive = res.clean_correct.iter().filter(|&&c| c).count();
        for stage in &res.stages {
            alive -= stage.broken;
            let restarts = if stage.name == "mt" {
                defaults.mt_restarts
            } else {
                defaults.apgd_restarts
            };
            report.push(self.row(format!("aa+mt:{}", stage.name), eps, restarts, alive as f64 / n))?;
        }
        Ok(res.records)
    }
}

/// `report.csv`/`report.json`, `clean_loss.csv`, and when asked
/// `restart_curve.csv` and `records.csv`.
pub fn run(s: &AttackSettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    check(s)?;
    let (model, meta) = load_model(&s.checkpoint, run)?;
    let data = s.eval_data();
    let name = dataset_for(&data, &model)?;
    let ex = load_examples(&data, name, run)?;
    let mode = s.mode.unwrap_or(model.spec.default_eval_mode());
    let standard = standard_accuracy(&model, &ex.x, &ex.y, &ex.ids, mode, s.seed)?.accuracy;
    let ctx = Ctx {
        s,
        model: &model,
        ex: &ex,
        mode,
        id: model_id(&s.model_id, name, &model),
        seed: meta.seed,
        standard,
    };

    let mut report = RobustnessReport::new();
    let mut curve = Vec::new();
    let mut records = Vec::new();
    for &eps in &s.eps {
        let recs = match s.suite {
            Some(_) => ctx.suite(eps, &mut report)?,
            None => ctx.single(eps, &mut report, &mut curve)?,
        };
        records.extend(recs);
    }
    report.write_csv(&run.output("report.csv")?)?;
    report.write_json(&run.output("report.json")?)?;
    if !curve.is_empty() {
        let mut w = csv::Writer::from_path(run.output("restart_curve.csv")?)?;
        for p in &curve {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| CliError::data(e.to_string()))?;
    }
    if s.records {
        write_records_csv(&run.output("records.csv")?, &records)?;
    }

    // The loss the landscape reports at its origin for the same mode and seed.
    let losses: Vec<f64> = (0..ex.len())
        .into_par_iter()
        .map(|i| point_loss(&model, ex.x.row(i), ex.y[i], mode, s.seed))
        .collect::<Result<_, _>>()?;
    let mut w = csv::Writer::from_path(run.output("clean_loss.csv")?)?;
    for (i, loss) in losses.into_iter().enumerate() {
        w.serialize(CleanLoss {
            example_id: ex.ids[i],
            label: ex.y[i],
            loss,
        })?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    Ok(vec![s.seed])
}
