use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smudge_cli::{EditArgs, TrainDenoiserArgs, TrainPromptArgs};

/// Desk-scale guided diffusion editing.
#[derive(Parser)]
#[command(name = "smudge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural blob dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the attention denoiser on a dataset.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the image-prompt encoder against a frozen denoiser.
    TrainPrompt(TrainPromptArgs),
    /// Invert an image and report the reconstruction round trip.
    Invert {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an editing task; appends one metrics row per seed.
    Edit(EditArgs),
    /// Run a verification suite ("all" runs every fast suite).
    Verify {
        #[arg(long)]
        suite: String,
        /// Write the machine-readable JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a metrics CSV per task.
    Stats {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData {
            out,
            count,
            size,
            seed,
        } => smudge_cli::cmd_gen_data(out, *count, *size, *seed).map(|_| true),
        Command::TrainDenoiser(args) => smudge_cli::cmd_train_denoiser(args).map(|_| true),
        Command::TrainPrompt(args) => smudge_cli::cmd_train_prompt(args).map(|_| true),
        Command::Invert { config } => smudge_cli::cmd_invert(config).map(|_| true),
        Command::Edit(args) => smudge_cli::cmd_edit(args).map(|_| true),
        Command::Verify { suite, out } => smudge_cli::cmd_verify(suite, out.as_deref()),
        Command::Stats { metrics, out } => {
            smudge_cli::cmd_stats(metrics, out.as_deref()).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
