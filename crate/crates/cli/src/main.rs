//! `onionprint <subcommand> --config cfg.json`: drive the fingerprintability
//! pipeline from one JSON config.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig, OUT_ENV};
use pipeline::Pipeline;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Config { path: PathBuf, source: serde_json::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingDataset(PathBuf),
    #[error("`generate` needs a `world` section in the config")]
    MissingWorld,
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Dataset(#[from] onionprint::trace_store::DatasetError),
    #[error(transparent)]
    Feature(#[from] onionprint::netfeat::FeatureError),
    #[error(transparent)]
    Attack(#[from] onionprint::attacks::AttackError),
    #[error(transparent)]
    Evaluation(#[from] onionprint::evaluation::EvalError),
    #[error(transparent)]
    Variance(#[from] onionprint::variance::VarianceError),
    #[error(transparent)]
    Graph(#[from] onionprint::congraph::GraphError),
    #[error(transparent)]
    Site(#[from] onionprint::sitefeat::SiteError),
    #[error(transparent)]
    Synth(#[from] onionprint::synthgen::SynthError),
}

#[derive(Parser, Debug)]
#[command(name = "onionprint", version, about = "Per-site website fingerprintability analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the number of cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Override the dataset root.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic world to the dataset root.
    Generate,
    /// Load and sanitize the dataset; writes sanitization.json.
    Sanitize,
    /// Extract and cache the feature matrices.
    Features,
    /// Cross-validate, combine and score the classifiers.
    Evaluate,
    /// Feature variance ranking, z-scores, Tukey outliers, confusion sizes.
    Variance,
    /// Confusion graph, communities and degree statistics.
    Graph,
    /// Site-level features and the fingerprintability regressor.
    Sitefeat,
    /// Every stage except `generate`.
    All,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Invalid("--config is required".into()))?;
    let ov = Overrides { seed: cli.seed, folds: cli.folds, out: cli.out.clone(), dataset: cli.dataset.clone() };
    let cfg = RunConfig::load(path, &ov)?;
    let mut p = Pipeline::new(&cfg);
    match cli.command {
        Command::Generate => p.generate(),
        Command::Sanitize => p.sanitize(),
        Command::Features => p.features(),
        Command::Evaluate => p.evaluate(),
        Command::Variance => p.variance(),
        Command::Graph => p.graph(),
        Command::Sitefeat => p.sitefeat(),
        Command::All => p.all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
