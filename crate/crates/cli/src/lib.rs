//! `dermlens` command-line interface.
//!
//! Exit codes: 0 success, 1 fatal error, 2 finished with partial failures
//! (cases without a diagnosis, images that could not be perturbed).

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dermlens_core::raster::PerturbKind;
use dermlens_core::report::ReportStyle;
use dermlens_core::{Split, Variant};

pub mod commands;
pub mod config;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "dermlens", version, about = "Concept-first lesion diagnosis with vision-language models")]
pub struct Cli {
    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline over a manifest split and write a predictions file.
    Run(RunArgs),
    /// Run every ablation variant and tabulate their scores.
    Ablate(AblateArgs),
    /// Score a predictions file against the manifest.
    Metrics(MetricsArgs),
    /// Write noisy or blurred copies of every image plus a derived manifest.
    Perturb(PerturbArgs),
    /// Serve the rating workflow over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub split: Option<Split>,
    /// Comma-separated tags every selected case must carry.
    #[arg(long, value_delimiter = ',')]
    pub tags: Option<Vec<String>>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Predictions file (default: <output_dir>/predictions.<variant>.jsonl).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    pub report_style: ReportStyle,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Defaults to the manifest named in --config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    pub report_style: ReportStyle,
    /// Add the pooled concept-detection row (all concepts as one binary task).
    #[arg(long)]
    pub pooled: bool,
    /// Score only classes with at least one true case among the predictions.
    #[arg(long)]
    pub present_classes_only: bool,
    /// Add published comparison rows above our own.
    #[arg(long)]
    pub with_reference: bool,
    /// Add a table scoring each tagged subset separately.
    #[arg(long)]
    pub by_tag: bool,
    /// Also write a per-case rationale table to this file.
    #[arg(long)]
    pub rationales: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Defaults to the manifest named in --config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub kind: PerturbKind,
    #[arg(long)]
    pub strength: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Defaults to the manifest named in --config.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Rating log (default: ratings.jsonl next to the predictions file).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 2,
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    cli.config.as_deref().map(RunConfig::load).transpose()
}

fn require(config: Option<RunConfig>, command: &str) -> Result<RunConfig> {
    config.with_context(|| format!("`{command}` needs --config"))
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Run(args) => commands::run(&require(config, "run")?, args),
        Command::Ablate(args) => commands::ablate(&require(config, "ablate")?, args),
        Command::Metrics(args) => commands::metrics(config.as_ref(), args),
        Command::Perturb(args) => commands::perturb(config.as_ref(), args),
        Command::Serve(args) => commands::serve(config.as_ref(), args),
    }
}
