//! `manifold-recon`: phantom generation, acquisition simulation,
//! reconstruction, evaluation and figure rendering.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid configuration,
//! 4 input not found, 5 runtime failure.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use manifold_recon::trainer::TrainMode;

use crate::commands::ReconstructArgs;
use crate::error::{CliResult, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "manifold-recon",
    version,
    about = "Dynamic image reconstruction with a latent generative model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    FixedLatent,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Joint => TrainMode::Joint,
            Mode::FixedLatent => TrainMode::FixedLatent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dynamic phantom.
    Phantom {
        /// TOML phantom spec; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate an undersampled multi-coil acquisition of a phantom.
    Acquire {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit generator and latents to a measurement set.
    Reconstruct {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (checkpoints, images, history, manifest).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Train on all frames from the start.
        #[arg(long)]
        no_progressive: bool,
        /// Phantom truth archive used to log SER during training.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Overrides both the generator and the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute SER, latent correlations and time-to-threshold for runs.
    Evaluate {
        /// Reconstruction output directory; repeat to compare runs.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Measurement archive, to report the zero-filled baseline.
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// Magnitude SER threshold in dB; defaults to the first run's final value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG figures from an evaluate output directory.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Phantom { config, out, seed } => commands::phantom(config.as_deref(), &out, seed),
        Command::Acquire {
            truth,
            config,
            out,
            seed,
        } => commands::acquire(&truth, config.as_deref(), &out, seed),
        Command::Reconstruct {
            measurements,
            config,
            out,
            mode,
            no_progressive,
            reference,
            seed,
            resume,
        } => commands::reconstruct(ReconstructArgs {
            measurements: &measurements,
            config: config.as_deref(),
            out_dir: &out,
            mode: mode.map(Into::into),
            no_progressive,
            reference: reference.as_deref(),
            seed,
            resume,
        }),
        Command::Evaluate {
            runs,
            truth,
            measurements,
            threshold,
            out,
        } => commands::evaluate(&runs, &truth, measurements.as_deref(), threshold, &out),
        Command::Plot { report, out } => commands::plot(&report, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
