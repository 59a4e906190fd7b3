use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibmodels::EvalMode;

/// `EvalMode` as its display string, so rows stay flat in CSV.
mod mode_text {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::ibmodels::EvalMode;

    pub fn serialize<S: Serializer>(mode: &EvalMode, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(mode)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EvalMode, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(D::Error::custom)
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub seed: u64,
    pub attack: String,
    pub epsilon: f64,
    pub restarts: usize,
    #[serde(with = "mode_text")]
    pub eval_mode: EvalMode,
    pub standard_acc: f64,
    pub robust_acc: f64,
    pub n_examples: usize,
}

impl ReportRow {
    /// Largest amount robust accuracy may exceed standard accuracy before a
    /// warning, `2 / sqrt(n)`.
    pub fn excess_allowance(&self) -> f64 {
        2.0 / (self.n_examples as f64).sqrt()
    }
}

/// A named finding with the numbers behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub raised: bool,
    pub values: BTreeMap<String, f64>,
}

impl Flag {
    pub fn new(name: impl Into<String>, raised: bool, values: &[(&str, f64)]) -> Self {
        Self {
            name: name.into(),
            raised,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<ReportRow>,
    pub flags: Vec<Flag>,
    pub warnings: Vec<String>,
}

impl RobustnessReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a row. Robust accuracy above standard accuracy is allowed (sampled
    /// evaluation can do that) but beyond `2/sqrt(n)` it leaves a warning.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if row.n_examples == 0 {
            return Err(Error::invalid("report row over zero examples"));
        }
        for (what, v) in [("standard", row.standard_acc), ("robust", row.robust_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{what} accuracy {v} outside [0, 1]")));
            }
        }
        let excess = row.robust_acc - row.standard_acc;
        if excess > row.excess_allowance() {
            self.warnings.push(format!(
                "{} seed {} {} eps {} ({}): robust accuracy {:.4} exceeds standard {:.4} by more than 2/sqrt({})",
                row.model_id,
                row.seed,
                row.attack,
                row.epsilon,
                row.eval_mode,
                row.robust_acc,
                row.standard_acc,
                row.n_examples
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn flag(&mut self, flag: Flag) {
        self.flags.push(flag);
    }

    pub fn extend(&mut self, other: RobustnessReport) {
        self.rows.extend(other.rows);
        self.flags.extend(other.flags);
        self.warnings.extend(other.warnings);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows_csv(path, &self.rows)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn write_rows_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        w.write_record([
            "model_id",
            "seed",
            "attack",
            "epsilon",
            "restarts",
            "eval_mode",
            "standard_acc",
            "robust_acc",
            "n_examples",
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Runs excluded by [`collapse_filter`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub model_id: String,
    pub seed: u64,
    pub standard_acc: f64,
    pub threshold: f64,
}

/// Twice chance, `2/C`, capped at halfway between chance and perfect
/// accuracy. The cap only binds for two classes, where `2/C` would be 1.
pub fn collapse_threshold(num_classes: usize) -> f64 {
    let c = num_classes as f64;
    (2.0 / c).min(0.5 * (1.0 + 1.0 / c))
}

/// Drop rows whose standard accuracy is at most [`collapse_threshold`]. A
/// run counts as collapsed when any of its rows is, so all rows of that
/// `(model_id, seed)` go together.
pub fn collapse_filter(rows: &[ReportRow], num_classes: usize) -> (Vec<ReportRow>, Vec<Exclusion>) {
    let threshold = collapse_threshold(num_classes);
    let mut excluded: Vec<Exclusion> = Vec::new();
    for row in rows {
        let collapsed = row.standard_acc <= threshold + 1e-12;
        let seen = excluded
            .iter()
            .any(|e| e.model_id == row.model_id && e.seed == row.seed);
        if collapsed && !seen {
            excluded.push(Exclusion {
                model_id: row.model_id.clone(),
                seed: row.seed,
                standard_acc: row.standard_acc,
                threshold,
            });
        }
    }
    let kept = rows
        .iter()
        .filter(|r| {
            !excluded
                .iter()
                .any(|e| e.model_id == r.model_id && e.seed == r.seed)
        })
        .cloned()
        .collect();
    (kept, excluded)
}
