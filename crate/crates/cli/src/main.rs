//! `ibrobust`: train, attack and diagnose information-bottleneck classifiers
//! with every run recorded in a replayable manifest.

mod commands;
mod data;
mod error;
mod run;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, CliResult};
use settings::{eps_arg, parse_epsilon, seeds_arg, usize_arg, List, Overrides};

#[derive(Parser)]
#[command(name = "ibrobust", version, about = "Robustness evaluation of information-bottleneck classifiers")]
struct Cli {
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per seed.
    Train(TrainArgs),
    /// Attack a checkpoint and write a robustness report.
    Attack(AttackArgs),
    /// Gray-image check, restart curve and collapse test.
    Diagnose(DiagnoseArgs),
    /// Loss surface around one example.
    Landscape(LandscapeArgs),
    /// Train and score a model on a synthetic task.
    Toy(ToyArgs),
    /// Aggregate report rows across runs.
    Report(ReportArgs),
    /// Re-run a recorded run from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON settings; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// det, vib or ceb.
    #[arg(long)]
    model: Option<String>,
    /// mnist, toy-ours or toy-tsipras.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// List or inclusive range, e.g. `0..9`.
    #[arg(long, value_parser = seeds_arg)]
    seeds: Option<List<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Hidden widths, e.g. `1024,1024`.
    #[arg(long, value_parser = usize_arg)]
    hidden: Option<List<usize>>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// JSON settings; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// mnist, toy-ours or toy-tsipras; inferred from the checkpoint if unset.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Seed of the toy evaluation sample.
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataArgs {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("checkpoint", self.checkpoint.as_ref());
        o.set("dataset", self.dataset.as_ref());
        o.set("data_dir", self.data_dir.as_ref());
        o.set("data_seed", self.data_seed);
        o
    }
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    offset: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    /// fgs, pgd, apgd or mt.
    #[arg(long)]
    family: Option<String>,
    /// `aa+mt` for the AutoPGD + MultiTargeted ensemble.
    #[arg(long)]
    suite: Option<String>,
    /// Budgets as decimals or fractions, e.g. `0.2,0.35,0.5` or `8/255`.
    #[arg(long, value_parser = eps_arg)]
    eps: Option<List<f64>>,
    /// Restart counts; several give a restart curve.
    #[arg(long, value_parser = usize_arg)]
    restarts: Option<List<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// cross_entropy, dlr or margin.
    #[arg(long)]
    loss: Option<String>,
    /// mean, stochastic or stochastic<S>.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-example records.
    #[arg(long)]
    records: bool,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    offset: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_epsilon)]
    curve_eps: Option<f64>,
    #[arg(long, value_parser = usize_arg)]
    curve_restarts: Option<List<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct LandscapeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Dataset index of the example.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, value_parser = parse_epsilon)]
    eps: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pgd_steps: Option<usize>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// ours or tsipras.
    #[arg(long)]
    which: Option<String>,
    /// linear_det or vib.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    bottleneck: Option<usize>,
    /// Also write this many training draws to `scatter.csv`.
    #[arg(long)]
    scatter: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report CSVs or run directories.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run directory or its manifest.json.
    manifest: PathBuf,
}

fn dispatch(cli: Cli) -> CliResult<PathBuf> {
    let (name, config) = match cli.command {
        Command::Replay(a) => return commands::replay(&a.manifest, &cli.out),
        Command::Train(a) => {
            let mut o = Overrides::default();
            o.set("model", a.model);
            o.set("dataset", a.dataset);
            o.set("beta", a.beta);
            o.set("rho", a.rho);
            o.set("seeds", a.seed.map(|s| List(vec![s])).or(a.seeds));
            o.set("epochs", a.epochs);
            o.set("iterations", a.iterations);
            o.set("hidden", a.hidden);
            o.set("bottleneck", a.bottleneck);
            o.set("train_limit", a.train_limit);
            o.set("eval_limit", a.eval_limit);
            o.set("data_dir", a.data_dir);
            ("train", settings::merge(a.config.as_deref(), o)?)
        }
        Command::Attack(a) => {
            let mut o = a.data.overrides();
            o.set("offset", a.offset);
            o.set("limit", a.limit);
            o.set("family", a.family);
            o.set("suite", a.suite);
            o.set("eps", a.eps);
            o.set("restarts", a.restarts);
            o.set("steps", a.steps);
            o.set("alpha", a.alpha);
            o.set("loss", a.loss);
            o.set("mode", a.mode);
            o.set("seed", a.seed);
            o.flag("records", a.records);
            o.set("chunk_size", a.chunk_size);
            o.set("model_id", a.model_id);
            ("attack", settings::merge(a.data.config.as_deref(), o)?)
        }
        Command::Diagnose(a) => {
            let mut o = a.data.overrides();
            o.set("offset", a.offset);
            o.set("limit", a.limit);
            o.set("mode", a.mode);
            o.set("seed", a.seed);
            o.set("curve_eps", a.curve_eps);
            o.set("curve_restarts", a.curve_restarts);
            o.set("steps", a.steps);
            o.set("alpha", a.alpha);
            o.set("model_id", a.model_id);
            ("diagnose", settings::merge(a.data.config.as_deref(), o)?)
        }
        Command::Landscape(a) => {
            let mut o = a.data.overrides();
            o.set("index", a.index);
            o.set("eps", a.eps);
            o.set("resolution", a.resolution);
            o.set("extent", a.extent);
            o.set("mode", a.mode);
            o.set("seed", a.seed);
            o.set("pgd_steps", a.pgd_steps);
            ("landscape", settings::merge(a.data.config.as_deref(), o)?)
        }
        Command::Toy(a) => {
            let mut o = Overrides::default();
            o.set("which", a.which);
            o.set("model", a.model);
            o.set("seed", a.seed);
            o.set("beta", a.beta);
            o.set("samples", a.samples);
            o.set("iterations", a.iterations);
            o.set("eval_size", a.eval_size);
            o.set("bottleneck", a.bottleneck);
            o.set("scatter", a.scatter);
            ("toy", settings::merge(a.config.as_deref(), o)?)
        }
        Command::Report(a) => {
            let mut o = Overrides::default();
            o.set("inputs", (!a.inputs.is_empty()).then_some(a.inputs));
            o.set("num_classes", a.num_classes);
            ("report", settings::merge(a.config.as_deref(), o)?)
        }
    };
    commands::execute(name, config, &cli.out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::config(first));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("{}", CliError::config("--workers must be at least 1"));
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match dispatch(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
