//! Resolved per-command configuration. A JSON file supplies the base, flags
//! override its keys, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use ibrobust::ibmodels::{EvalMode, ModelKind};
use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Default MNIST directory when `data_dir` is unset.
pub const DATA_DIR_ENV: &str = "IBROBUST_DATA_DIR";

/// A budget written as a decimal or a fraction such as `8/255`.
pub fn parse_epsilon(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let value = match t.split_once('/') {
        Some((num, den)) => {
            let n: f64 = num.trim().parse().map_err(|_| format!("bad epsilon `{t}`"))?;
            let d: f64 = den.trim().parse().map_err(|_| format!("bad epsilon `{t}`"))?;
            if d == 0.0 {
                return Err(format!("epsilon `{t}` divides by zero"));
            }
            n / d
        }
        None => t.parse().map_err(|_| format!("bad epsilon `{t}`"))?,
    };
    if !(value >= 0.0 && value.is_finite()) {
        return Err(format!("epsilon must be finite and non-negative, got `{t}`"));
    }
    Ok(value)
}

fn split_list(text: &str) -> impl Iterator<Item = &str> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse_eps_list(text: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = split_list(text).map(parse_epsilon).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("empty epsilon list".into());
    }
    Ok(v)
}

/// Seeds as `3`, `0,4,7` or an inclusive range `0..9`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in split_list(text) {
        let bad = || format!("bad seed list entry `{part}`");
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().trim_start_matches('=').trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(format!("empty seed range `{part}`"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err("empty seed list".into());
    }
    Ok(out)
}

/// A comma-separated flag value, kept as one argument.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

pub fn eps_arg(text: &str) -> Result<List<f64>, String> {
    parse_eps_list(text).map(List)
}

pub fn seeds_arg(text: &str) -> Result<List<u64>, String> {
    parse_seeds(text).map(List)
}

pub fn usize_arg(text: &str) -> Result<List<usize>, String> {
    parse_usize_list(text).map(List)
}

pub fn parse_usize_list(text: &str) -> Result<Vec<usize>, String> {
    let v: Vec<usize> = split_list(text)
        .map(|p| p.parse().map_err(|_| format!("bad integer `{p}`")))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("empty list".into());
    }
    Ok(v)
}

/// JSON lists may be arrays, single values or the flag syntax as a string.
fn flexible<T>(
    value: Value,
    parse: fn(&str) -> Result<Vec<T>, String>,
) -> Result<Vec<T>, String> {
    match value {
        Value::Array(items) => {
            let mut out = Vec::new();
            for item in items {
                out.extend(flexible(item, parse)?);
            }
            Ok(out)
        }
        Value::Number(n) => parse(&n.to_string()),
        Value::String(s) => parse(&s),
        other => Err(format!("expected a number, string or list, got {other}")),
    }
}

pub mod eps_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        flexible(Value::deserialize(d)?, parse_eps_list).map_err(D::Error::custom)
    }
}

pub mod seed_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
        flexible(Value::deserialize(d)?, parse_seeds).map_err(D::Error::custom)
    }
}

pub mod usize_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        flexible(Value::deserialize(d)?, parse_usize_list).map_err(D::Error::custom)
    }
}

pub mod opt_usize_list {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<usize>>, s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<usize>>, D::Error> {
        match Value::deserialize(d)? {
            Value::Null => Ok(None),
            // An empty list is a model without hidden layers.
            Value::Array(a) if a.is_empty() => Ok(Some(Vec::new())),
            v => flexible(v, parse_usize_list).map(Some).map_err(D::Error::custom),
        }
    }
}

pub mod epsilon {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let v = flexible(Value::deserialize(d)?, parse_eps_list).map_err(D::Error::custom)?;
        match v.as_slice() {
            [e] => Ok(*e),
            _ => Err(D::Error::custom("expected a single epsilon")),
        }
    }
}

/// Evaluation modes as text: `mean`, `stochastic` or `stochastic<S>`.
pub mod opt_mode {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<EvalMode>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|m| m.to_string()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<EvalMode>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| t.parse().map_err(D::Error::custom))
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Mnist,
    ToyOurs,
    ToyTsipras,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyModelName {
    LinearDet,
    Vib,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyWhich {
    Ours,
    Tsipras,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Fgs,
    Pgd,
    #[serde(alias = "auto_pgd")]
    Apgd,
    #[serde(alias = "multi_targeted")]
    Mt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuiteName {
    #[serde(rename = "aa+mt")]
    AaMt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    #[default]
    CrossEntropy,
    Dlr,
    Margin,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_beta() -> f64 {
    1e-2
}

fn default_rho() -> f64 {
    3.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelKind,
    pub dataset: DatasetName,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_seeds", with = "seed_list")]
    pub seeds: Vec<u64>,
    /// MNIST epochs; the full recipe's 200 when unset.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Toy iterations; the toy recipe's default when unset.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default, with = "opt_usize_list")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub bottleneck: Option<usize>,
    /// Train on the first `n` MNIST training examples only.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Examples used for the reported standard accuracy.
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

/// Which examples a checkpoint is evaluated on.
#[derive(Clone, Debug, Default)]
pub struct EvalData {
    pub dataset: Option<DatasetName>,
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub offset: usize,
    pub limit: Option<usize>,
}

/// Settings fields shared by commands that evaluate a checkpoint. Dataset
/// is inferred from the checkpoint's input size when unset; the toy sample
/// is drawn with `data_seed`; `limit` defaults to the whole MNIST test
/// split or 10,000 toy examples.
macro_rules! eval_settings {
    ($(#[$meta:meta])* pub struct $name:ident { $($body:tt)* }) => {
        $(#[$meta])*
        pub struct $name {
            pub checkpoint: PathBuf,
            #[serde(default)]
            pub dataset: Option<DatasetName>,
            #[serde(default)]
            pub data_dir: Option<PathBuf>,
            #[serde(default)]
            pub data_seed: u64,
            #[serde(default)]
            pub offset: usize,
            #[serde(default)]
            pub limit: Option<usize>,
            $($body)*
        }

        impl $name {
            pub fn eval_data(&self) -> EvalData {
                EvalData {
                    dataset: self.dataset,
                    data_dir: self.data_dir.clone(),
                    data_seed: self.data_seed,
                    offset: self.offset,
                    limit: self.limit,
                }
            }

            /// Absolute paths and the environment's data directory.
            pub fn normalize(&mut self) -> CliResult<()> {
                self.checkpoint = absolute(&self.checkpoint)?;
                self.data_dir = resolve_data_dir(&self.data_dir)?;
                Ok(())
            }
        }
    };
}

fn default_family() -> FamilyName {
    FamilyName::Pgd
}

fn default_restarts() -> Vec<usize> {
    vec![1]
}

fn default_chunk() -> usize {
    32
}

eval_settings! {
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    #[serde(default = "default_family")]
    pub family: FamilyName,
    /// Runs the AutoPGD + MultiTargeted ensemble instead of `family`.
    #[serde(default)]
    pub suite: Option<SuiteName>,
    #[serde(with = "eps_list")]
    pub eps: Vec<f64>,
    #[serde(default = "default_restarts", with = "usize_list")]
    pub restarts: Vec<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub loss: LossName,
    /// Gradient and scoring mode; the model's default when unset.
    #[serde(default, with = "opt_mode")]
    pub mode: Option<EvalMode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub records: bool,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default)]
    pub model_id: Option<String>,
}
}

fn default_curve_eps() -> f64 {
    0.2
}

fn default_curve_restarts() -> Vec<usize> {
    vec![1, 2, 5, 10]
}

fn default_steps() -> usize {
    40
}

fn default_alpha() -> f64 {
    0.01
}

eval_settings! {
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSettings {
    #[serde(default, with = "opt_mode")]
    pub mode: Option<EvalMode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_curve_eps", with = "epsilon")]
    pub curve_eps: f64,
    #[serde(default = "default_curve_restarts", with = "usize_list")]
    pub curve_restarts: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub model_id: Option<String>,
}
}

fn default_landscape_eps() -> f64 {
    8.0 / 255.0
}

fn default_resolution() -> usize {
    51
}

fn default_extent() -> f64 {
    1.5
}

eval_settings! {
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSettings {
    /// Dataset index of the example.
    #[serde(default)]
    pub index: usize,
    #[serde(default = "default_landscape_eps", with = "epsilon")]
    pub eps: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// Mean mode unless set.
    #[serde(default, with = "opt_mode")]
    pub mode: Option<EvalMode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub pgd_steps: usize,
}
}

fn default_toy_beta() -> f64 {
    0.5
}

fn default_samples() -> usize {
    12
}

fn default_eval_size() -> usize {
    10_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySettings {
    pub which: ToyWhich,
    pub model: ToyModelName,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_toy_beta")]
    pub beta: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default)]
    pub bottleneck: Option<usize>,
    /// Also write this many training draws for a scatter plot.
    #[serde(default)]
    pub scatter: Option<usize>,
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSettings {
    /// Report CSVs or run directories holding a `report.csv`.
    pub inputs: Vec<PathBuf>,
    /// Class count for the collapse threshold `2/C`.
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

/// Flag values layered over a config file.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            self.0.insert(key.to_string(), v);
        }
    }

    pub fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.insert(key.to_string(), Value::Bool(true));
        }
    }
}

/// Merge `overrides` over the file at `path` (if any) into one JSON object.
pub fn merge(path: Option<&Path>, overrides: Overrides) -> CliResult<Value> {
    let mut base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::config(format!("{}: config must be a JSON object", p.display()))),
                Err(e) => return Err(CliError::config(format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    base.extend(overrides.0);
    Ok(Value::Object(base))
}

pub fn parse<T: DeserializeOwned>(command: &str, config: Value) -> CliResult<T> {
    serde_json::from_value(config).map_err(|e| CliError::config(format!("{command} config: {e}")))
}

/// Absolute form of `p`, so a manifest replays from any directory.
pub fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}

/// `data_dir` from the settings or the environment, made absolute.
pub fn resolve_data_dir(dir: &Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    match dir {
        Some(d) => absolute(d).map(Some),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(d) if !d.is_empty() => absolute(Path::new(&d)).map(Some),
            _ => Ok(None),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_forms() {
        assert_eq!(parse_epsilon("8/255").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_eps_list("0.2, 0.35,0.5").unwrap(), vec![0.2, 0.35, 0.5]);
        assert!(parse_epsilon("1/0").is_err());
        assert!(parse_epsilon("-0.1").is_err());
        assert!(parse_eps_list("").is_err());
    }

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3,1..2").unwrap(), vec![3, 1, 2]);
        assert!(parse_seeds("5..2").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let v = serde_json::json!({"which": "ours", "model": "vib", "bta": 1.0});
        let err = parse::<ToySettings>("toy", v).unwrap_err();
        assert!(err.message.contains("bta"), "{}", err.message);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"which": "ours", "model": "vib", "seed": 4, "eval_size": 50}"#).unwrap();
        let mut o = Overrides::default();
        o.set("seed", Some(9u64));
        o.set::<u64>("samples", None);
        let s: ToySettings = parse("toy", merge(Some(&path), o).unwrap()).unwrap();
        assert_eq!((s.seed, s.eval_size, s.samples), (9, 50, 12));
    }

    #[test]
    fn resolved_settings_round_trip() {
        let v = serde_json::json!({"checkpoint": "/c", "eps": "8/255,0.1", "restarts": "1,10", "mode": "stochastic4"});
        let s: AttackSettings = parse("attack", v).unwrap();
        assert_eq!(s.mode, Some(EvalMode::Stochastic(4)));
        let back: AttackSettings = parse("attack", serde_json::to_value(&s).unwrap()).unwrap();
        assert_eq!(back.eps, s.eps);
        assert_eq!(back.restarts, vec![1, 10]);
    }
}
