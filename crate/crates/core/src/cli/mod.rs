//! Command-line front end. Settings come from a `key=value` config file
//! and are overridden by flags; every run directory gets a config snapshot
//! and a content manifest.

mod commands;
mod config;

pub use commands::{file_sha256, run_dir_manifest, MANIFEST_FILE};
pub use config::ExperimentConfig;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "pfnn",
    version,
    about = "Train and inspect pooling-fusion classifiers on synthetic image data",
    after_help = "Precedence: built-in defaults < --config file < --set pairs < dedicated flags (--seed, --gagm, ...)."
)]
pub struct Cli {
    /// key=value settings file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization, splits and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (gen-data) or directory (other commands).
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_str(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    /// The whole dataset, e.g. a blind holdout file.
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run and write report tables.
    Eval(EvalArgs),
    /// Grad-CAM galleries of correct and misclassified cases.
    Gradcam(GradcamArgs),
    /// PCA projections of a feature layer.
    Pca(PcaArgs),
    /// Comparison tables across evaluated runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Samples per class: normal,benign,malignant.
    #[arg(long, default_value = "152,820,1028")]
    pub counts: String,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    /// Augment the normal class until it holds this share.
    #[arg(long)]
    pub augment_share: Option<f64>,
    /// Move this many stratified samples into a separate blind file.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Worker threads for generation.
    #[arg(long, env = "PFNN_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub gagm: Option<Switch>,
    #[arg(long)]
    pub sevector: Option<Switch>,
    #[arg(long)]
    pub lambda_fs: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file; overrides the `data` key.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset file; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Splits to evaluate; `train` together with `test` fills the overfit
    /// columns.
    #[arg(long, value_enum, default_values_t = [Split::Test])]
    pub split: Vec<Split>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Class name or index whose cases are shown.
    #[arg(long, default_value = "malignant")]
    pub class: String,
    #[arg(long, default_value_t = 3)]
    pub correct: usize,
    #[arg(long, default_value_t = 3)]
    pub wrong: usize,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// fused, attended, head, or auto (highest top-3 cumulative variance).
    #[arg(long, default_value = "auto")]
    pub layer: String,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluated run directories, one table row each.
    #[arg(long, num_args = 1.., required = true)]
    pub compare: Vec<PathBuf>,
}

/// Parses `args` and runs the command; errors are printed to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
