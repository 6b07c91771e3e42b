//! `cdcl`: data generation, training, evaluation, ablation and diagnostics
//! for cross-dataset segmentation experiments.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod failure;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cdcl", version, about = "Cross-dataset collaborative segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic datasets into a directory, one subdirectory each.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the strategy of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a generated dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        id: usize,
        /// Also report mIoU after recalibrating bank `id` on the dataset.
        #[arg(long)]
        precise_bn: bool,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Conv/BN sharing by DAT grid and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter-distribution report across checkpoints.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Restrict to these dataset ids (default: every id of each checkpoint).
        #[arg(long, num_args = 1..)]
        ids: Vec<usize>,
        /// Restrict to these layers, e.g. enc0 dec2.
        #[arg(long, num_args = 1..)]
        layers: Vec<String>,
        /// CSV destination (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Train { config, out } => commands::train(&config, out.as_deref()),
        Command::Eval { checkpoint, dataset, id, precise_bn, out } => {
            commands::eval(&checkpoint, &dataset, id, precise_bn, out.as_deref())
        }
        Command::Ablate { config, out } => commands::ablate(&config, out.as_deref()),
        Command::Diagnose { checkpoints, ids, layers, out } => {
            commands::diagnose(&checkpoints, &ids, &layers, out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(failure::exit_code(&e) as u8)
        }
    }
}
