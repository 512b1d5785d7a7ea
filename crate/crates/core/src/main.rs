use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use regroup::cli::{self, Command};
use regroup::parallel;

#[derive(Parser)]
#[command(name = "regroup", version, about = "Part-grouping recognition on synthetic scenes")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// key=value configuration file; unset keys keep their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data, initialization and shuffling (overrides `seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is fully deterministic
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Checkpoint to read for eval/visualize (default: <out>/checkpoint.rgt)
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train/fit/test splits as PPM images plus manifests
    Gen,
    /// Train a model and write the checkpoint and per-epoch metrics
    Train,
    /// Evaluate a checkpoint: accuracy, landmark error, pointing game
    Eval,
    /// Write assignment, attention and attribution overlays for test samples
    Visualize {
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Train full, unregularized and uniform-attention variants and compare them
    Ablate,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = match args.command {
        Cmd::Gen => Command::Gen,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Visualize { samples } => Command::Visualize { samples },
        Cmd::Ablate => Command::Ablate,
    };
    let result = cli::resolve(args.config.as_deref(), args.out.as_deref(), args.seed).and_then(|cfg| {
        parallel::with_threads(args.threads, || cli::run(&command, &cfg, args.checkpoint.as_deref()))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("regroup: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
