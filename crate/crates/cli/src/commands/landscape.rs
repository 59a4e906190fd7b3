use ibrobust::diagnostics::{loss_landscape, LandscapeConfig};
use ibrobust::ibmodels::EvalMode;

use crate::data::{dataset_for, load_examples, load_model};
use crate::error::{CliError, CliResult};
use crate::run::RunDir;
use crate::settings::{EvalData, LandscapeSettings};

/// `landscape.csv` (u, v, loss) and `landscape.json` for one example.
pub fn run(s: &LandscapeSettings, run: &mut RunDir) -> CliResult<Vec<u64>> {
    let (model, _) = load_model(&s.checkpoint, run)?;
    let base = s.eval_data();
    let name = dataset_for(&base, &model)?;
    if base.offset != 0 || base.limit.is_some() {
        return Err(CliError::config("landscape takes `index`, not `offset` or `limit`"));
    }
    let data = EvalData {
        offset: s.index,
        limit: Some(1),
        ..base
    };
    let ex = load_examples(&data, name, run)?;
    let cfg = LandscapeConfig {
        epsilon: s.eps,
        resolution: s.resolution,
        extent: s.extent,
        seed: s.seed,
        mode: s.mode.unwrap_or(EvalMode::Mean),
        pgd_steps: s.pgd_steps,
        bounds: ex.bounds,
        ..LandscapeConfig::default()
    };
    let grid = loss_landscape(&model, ex.x.row(0), ex.y[0], &cfg)?;
    grid.write_csv(&run.output("landscape.csv")?)?;
    grid.write_header_json(&run.output("landscape.json")?)?;
    Ok(vec![s.seed])
}
