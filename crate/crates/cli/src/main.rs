//! `tsse`: data generation, training, evaluation and bad-data studies for
//! PMU-based state estimation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsse_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "tsse",
    version,
    about = "State estimation for power systems with sparse PMUs"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Configuration override, `section.key=value` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Network case operations.
    Case {
        #[command(subcommand)]
        action: CaseAction,
    },
    /// Training data operations.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train an estimator on a generated dataset.
    Train(TrainArgs),
    /// Adapt a trained estimator to a dataset from a new topology.
    Finetune(FinetuneArgs),
    /// Estimate states for a CSV of PMU features.
    Estimate(EstimateArgs),
    /// Score a model on the test split of a dataset.
    Evaluate(ModelDataArgs),
    /// Errors grouped by hop distance to the nearest PMU.
    HopProfile(ModelDataArgs),
    /// Bad-data detection and correction studies.
    Bddc {
        #[command(subcommand)]
        action: BddcAction,
    },
    /// Gaussian conditional-mean study on the 3-bus system.
    Oracle {
        /// Number of power-flow samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// PMU-only linear state estimator for a placement.
    Lse {
        /// JSON array of PMU bus ids.
        #[arg(long)]
        placement: Option<PathBuf>,
    },
    /// Replay test frames through detection, correction and inference.
    Stream(StreamArgs),
    /// Test error against training-database size.
    DbStudy {
        /// Database sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

#[derive(Subcommand)]
enum CaseAction {
    /// Load and check a case, then print a summary.
    Validate {
        /// Case file (JSON or MATPOWER-style text).
        #[arg(long)]
        case: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Sample operating points, solve power flows and write a dataset.
    Generate {
        #[arg(long)]
        samples: Option<usize>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BddcAction {
    /// Bad-data probability and severity sweeps.
    Simulate {
        #[command(flatten)]
        io: ModelDataArgs,
        /// Also run the stressed-scenario study.
        #[arg(long)]
        extreme: bool,
    },
}

#[derive(Args)]
struct ModelDataArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write the model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Model to adapt.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset from the new topology.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where to write the adapted model.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// CSV with one column per feature name.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    io: ModelDataArgs,
    #[arg(long)]
    frames: Option<usize>,
}

fn path_override(key: &str, p: &Option<PathBuf>) -> Option<String> {
    p.as_ref()
        .map(|p| format!("{key}={}", toml::Value::String(p.display().to_string())))
}

fn num_override<T: std::fmt::Display>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={v}"))
}

impl Cli {
    /// Flags become overrides applied after the file and `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        o.extend(num_override("seed", self.seed));
        o.extend(path_override("out_dir", &self.out));
        let io = |o: &mut Vec<String>, a: &ModelDataArgs| {
            o.extend(path_override("model.path", &a.model));
            o.extend(path_override("data.dir", &a.data));
        };
        match &self.command {
            Command::Case {
                action: CaseAction::Validate { case },
            } => o.extend(path_override("case.path", case)),
            Command::Data {
                action: DataAction::Generate { samples, data },
            } => {
                o.extend(num_override("data.samples", *samples));
                o.extend(path_override("data.dir", data));
            }
            Command::Train(a) => {
                o.extend(path_override("data.dir", &a.data));
                o.extend(path_override("model.path", &a.model));
                o.extend(num_override("mlp.max_epochs", a.epochs));
            }
            Command::Finetune(a) => {
                o.extend(path_override("model.path", &a.model));
                o.extend(path_override("data.dir", &a.data));
                o.extend(num_override("finetune.samples", a.samples));
                o.extend(num_override("finetune.epochs", a.epochs));
            }
            Command::Estimate(a) => o.extend(path_override("model.path", &a.model)),
            Command::Evaluate(a) | Command::HopProfile(a) => io(&mut o, a),
            Command::Bddc {
                action: BddcAction::Simulate { io: a, extreme },
            } => {
                io(&mut o, a);
                if *extreme {
                    o.push("extreme.enabled=true".into());
                }
            }
            Command::Oracle { samples } => o.extend(num_override("oracle.samples", *samples)),
            Command::Lse { placement } => o.extend(path_override("placement.path", placement)),
            Command::Stream(a) => {
                io(&mut o, &a.io);
                o.extend(num_override("stream.frames", a.frames));
            }
            Command::DbStudy { sizes } => {
                if let Some(s) = sizes {
                    let list: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                    o.push(format!("db_study.sizes=[{}]", list.join(",")));
                }
            }
        }
        o
    }

    fn name(&self) -> &'static str {
        match &self.command {
            Command::Case { .. } => "case-validate",
            Command::Data { .. } => "data-generate",
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::Estimate(_) => "estimate",
            Command::Evaluate(_) => "evaluate",
            Command::HopProfile(_) => "hop-profile",
            Command::Bddc { .. } => "bddc-simulate",
            Command::Oracle { .. } => "oracle",
            Command::Lse { .. } => "lse",
            Command::Stream(_) => "stream",
            Command::DbStudy { .. } => "db-study",
        }
    }
}

fn run(cli: &Cli) -> tsse_core::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    let mut run = output::Run::start(cli.name(), &cfg)?;
    match &cli.command {
        Command::Case { .. } => commands::case_validate(&cfg, &mut run),
        Command::Data { .. } => commands::data_generate(&cfg, &mut run),
        Command::Train(_) => commands::train(&cfg, &mut run),
        Command::Finetune(a) => commands::finetune(&cfg, &a.output, &mut run),
        Command::Estimate(a) => commands::estimate(&cfg, &a.input, &a.output, &mut run),
        Command::Evaluate(_) => commands::evaluate(&cfg, &mut run),
        Command::HopProfile(_) => commands::hop_profile(&cfg, &mut run),
        Command::Bddc { .. } => commands::bddc_simulate(&cfg, &mut run),
        Command::Oracle { .. } => commands::oracle(&cfg, &mut run),
        Command::Lse { .. } => commands::lse(&cfg, &mut run),
        Command::Stream(_) => commands::stream(&cfg, &mut run),
        Command::DbStudy { .. } => commands::db_study(&cfg, &mut run),
    }?;
    run.finish()
}

/// 2 for bad inputs, 3 for numerical failures, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_validation() => 2,
        Error::Divergence { .. }
        | Error::Singular(_)
        | Error::TrainingDiverged { .. }
        | Error::Unobservable { .. }
        | Error::Quadrature(_)
        | Error::Generation(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
