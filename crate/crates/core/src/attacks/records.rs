use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::csv_error;
use crate::error::{Error, Result};

/// One row of the per-example attack log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub example_id: usize,
    pub stage: String,
    pub restarts_used: usize,
    pub success: bool,
    pub final_loss: f64,
    pub linf_dist: f64,
}

pub fn write_records_csv(path: &Path, records: &[AttackRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if records.is_empty() {
        w.write_record(["example_id", "stage", "restarts_used", "success", "final_loss", "linf_dist"])
            .map_err(|e| csv_error(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
