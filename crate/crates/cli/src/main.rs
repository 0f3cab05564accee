use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "jigsaw", version, about = "Jigsaw-puzzle self-supervised pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a permutation set by greedy Hamming selection.
    Permgen {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 3)]
        grid: usize,
        #[arg(long, default_value = "max")]
        objective: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic puzzle and transfer datasets plus a run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        images: usize,
        #[arg(long, default_value_t = 100)]
        heldout: usize,
        #[arg(long, default_value_t = 180)]
        transfer_train: usize,
        #[arg(long, default_value_t = 450)]
        transfer_test: usize,
        #[arg(long, default_value_t = 8)]
        perms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a CFN on the pretext task.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        /// Override train.iterations.
        #[arg(long)]
        iterations: Option<u64>,
        /// Base for relative paths in the config (default: the config's directory).
        #[arg(long, env = "JIGSAW_DATA_ROOT")]
        data_root: Option<PathBuf>,
    },
    /// Puzzle accuracy of a checkpoint, and optionally transfer accuracy.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        permset: PathBuf,
        /// Defaults to normalization.txt next to the checkpoint.
        #[arg(long)]
        normalization: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score with the label-reading oracle instead of a network.
        #[arg(long)]
        oracle: bool,
        /// Labeled manifests for a lock-and-retrain transfer run.
        #[arg(long, requires = "transfer_test")]
        transfer_train: Option<PathBuf>,
        #[arg(long)]
        transfer_test: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        lock: usize,
        #[arg(long, default_value_t = 1000)]
        transfer_iters: u64,
        /// Write a CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a gallery by feature similarity to each query.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled manifest (`path label` per line).
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        normalization: Option<PathBuf>,
        /// Query ids; all gallery items when omitted.
        #[arg(long)]
        query: Vec<String>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Branch layers to run before reading features (default: up to fc6).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Puzzles-per-image accounting and tile-gap statistics.
    Stats {
        #[arg(long, default_value_t = 350_000)]
        iters: u64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 1_300_000)]
        images: usize,
        #[arg(long, default_value_t = 10_000)]
        gap_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("jigsaw-error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("jigsaw-error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
