//! Command-line front end: teacher training, subspace extraction,
//! distillation runs, ablation suites, the synthetic band experiment and
//! aggregated reports.

mod commands;
mod config;
mod error;
mod pipeline;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfigFile;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "subdistill", version, about = "Subspace distillation of subtask-specific students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher named in the config on the full dataset.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute relevant subspaces of the teacher and save them.
    ExtractSubspaces {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: ExtractArgs,
    },
    /// Distill one student, or sweep α over the standard grid.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: DistillArgs,
        #[arg(long)]
        deterministic: bool,
    },
    /// Run the ablation and layer-subset suite over several seeds.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        args: DistillArgs,
        /// Comma-separated seeds; defaults to the suite seeds of the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Synthetic manifold experiment comparing kernel alignment.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Aggregate run directories into tables and figures.
    Report {
        /// Directories searched recursively for runs and synthetic reports.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Config used to compute attribution agreement with the teacher.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
    },
}

#[derive(Args)]
pub struct ExtractArgs {
    /// prca, pca or random.
    #[arg(long, default_value = "prca")]
    pub method: String,
    /// Student layers whose teacher counterparts are extracted, e.g. `1,3`.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DistillArgs {
    /// joint or decoupled.
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated student layers, or `none`.
    #[arg(long)]
    pub layers: Option<String>,
    /// subdistill, wb_baseline or output_only.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha_sweep: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation switches, comma-separated or repeated.
    #[arg(long)]
    pub ablation: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub training_fraction: Option<f64>,
    /// Directory of precomputed subspace files.
    #[arg(long)]
    pub subspaces: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainTeacher { config } => commands::train_teacher_cmd(&RunConfigFile::load(&config)?),
        Command::ExtractSubspaces { config, args } => {
            commands::extract_cmd(&RunConfigFile::load(&config)?, &args)
        }
        Command::Distill {
            config,
            args,
            deterministic,
        } => commands::distill_cmd(&RunConfigFile::load(&config)?, &args, deterministic),
        Command::Ablation {
            config,
            args,
            seeds,
            deterministic,
        } => commands::ablation_cmd(&RunConfigFile::load(&config)?, &args, seeds, deterministic),
        Command::Synth {
            config,
            out,
            deterministic,
        } => commands::synth_cmd(&RunConfigFile::load(&config)?, out, deterministic),
        Command::Report {
            inputs,
            out,
            config,
            deterministic,
        } => report::report_cmd(&inputs, &out, config.as_deref(), deterministic),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
