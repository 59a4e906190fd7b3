mod attack;
mod diagnose;
mod landscape;
mod report;
mod toy;
mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::run::{RunDir, RunManifest};
use crate::settings;

/// Resolve `config` for `command`, run it into a new directory under `out`
/// and write the manifest.
pub fn execute(command: &str, config: Value, out: &Path) -> CliResult<PathBuf> {
    match command {
        "train" => {
            let mut s: settings::TrainSettings = settings::parse(command, config)?;
            s.data_dir = settings::resolve_data_dir(&s.data_dir)?;
            finish(command, out, &s, |run| train::run(&s, run))
        }
        "attack" => {
            let mut s: settings::AttackSettings = settings::parse(command, config)?;
            s.normalize()?;
            finish(command, out, &s, |run| attack::run(&s, run))
        }
        "diagnose" => {
            let mut s: settings::DiagnoseSettings = settings::parse(command, config)?;
            s.normalize()?;
            finish(command, out, &s, |run| diagnose::run(&s, run))
        }
        "landscape" => {
            let mut s: settings::LandscapeSettings = settings::parse(command, config)?;
            s.normalize()?;
            finish(command, out, &s, |run| landscape::run(&s, run))
        }
        "toy" => {
            let s: settings::ToySettings = settings::parse(command, config)?;
            finish(command, out, &s, |run| toy::run(&s, run))
        }
        "report" => {
            let mut s: settings::ReportSettings = settings::parse(command, config)?;
            s.inputs = s.inputs.iter().map(|p| settings::absolute(p)).collect::<CliResult<_>>()?;
            finish(command, out, &s, |run| report::run(&s, run))
        }
        other => Err(CliError::config(format!("unknown command `{other}`"))),
    }
}

fn finish<S: Serialize>(
    command: &str,
    out: &Path,
    settings: &S,
    body: impl FnOnce(&mut RunDir) -> CliResult<Vec<u64>>,
) -> CliResult<PathBuf> {
    let resolved = serde_json::to_value(settings).expect("settings serialize");
    let mut run = RunDir::create(out, command)?;
    match body(&mut run) {
        Ok(seeds) => run.finish(resolved, seeds),
        Err(e) => {
            run.discard();
            Err(e)
        }
    }
}

/// Re-run a recorded command with its resolved settings after checking the
/// recorded run is intact and its inputs are unchanged.
pub fn replay(manifest: &Path, out: &Path) -> CliResult<PathBuf> {
    let m = RunManifest::load(manifest)?;
    let dir = if manifest.is_dir() {
        manifest
    } else {
        manifest.parent().unwrap_or(Path::new("."))
    };
    m.verify_outputs(dir)?;
    m.verify_inputs()?;
    execute(&m.command, m.config, out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json output serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
