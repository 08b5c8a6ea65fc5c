//! Operator entry points for the motion-diffusion toolkit.
//!
//! Four commands cover the pipeline end to end: `prepare` turns a directory
//! of paired BVH/WAV clips into a feature store, `train` fits the denoiser
//! and writes checkpoints, `sample` synthesizes motion from a checkpoint
//! under classifier-free or interpolated style guidance, and `verify` runs
//! the closed-form Gaussian verification suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure.

mod config;
mod manifest;
mod prepare;
mod sample;
mod store;
mod train;
mod verify;

use clap::{Parser, Subcommand};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

/// Marker for operator mistakes (bad flags, unknown styles or suites,
/// malformed config): exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

/// Marker for verification-suite failures: exit code 3.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} verification suite(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

#[derive(Parser)]
#[command(
    name = "motiondiff",
    version,
    about = "Train and sample conditional denoising-diffusion models for audio-driven motion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a feature store from a directory of paired BVH and WAV clips.
    Prepare {
        /// Directory scanned recursively; a clip's style is its parent
        /// directory name.
        data_dir: PathBuf,
        /// Pipeline configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the feature store and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a prepared feature store.
    Train {
        /// Feature store directory (or its store.json).
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, the loss log, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample motion from a trained checkpoint and write BVH.
    Sample {
        /// Optional conditioning input: a WAV file or a precomputed
        /// feature CSV. Omitted = zero audio conditioning.
        input: Option<PathBuf>,
        /// Trained model to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the BVH file(s) and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Style name or index for classifier-free guidance.
        #[arg(long, conflicts_with = "styles")]
        style: Option<String>,
        /// Two comma-separated styles for guided interpolation.
        #[arg(long, value_delimiter = ',')]
        styles: Option<Vec<String>>,
        /// Guidance strength (single style) or interpolation weight
        /// (two styles). A comma-separated list writes one file per value.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        gamma: Option<Vec<f64>>,
        /// Interpolation temperature; only valid with --styles.
        #[arg(long)]
        temperature: Option<f64>,
        /// Output length in frames; defaults to the audio length, or the
        /// config value without audio.
        #[arg(long)]
        frames: Option<usize>,
        /// Sampling seed; defaults to the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed-form verification suites.
    Verify {
        /// One of: schedule, gauss, poe, guidance, all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare {
            data_dir,
            config,
            out,
        } => prepare::run(&data_dir, config.as_deref(), &out),
        Command::Train {
            store,
            config,
            out,
            seed,
            checkpoint,
        } => train::run(&store, config.as_deref(), &out, seed, checkpoint.as_deref()),
        Command::Sample {
            input,
            checkpoint,
            config,
            out,
            style,
            styles,
            gamma,
            temperature,
            frames,
            seed,
        } => sample::run(sample::SampleArgs {
            input,
            checkpoint,
            config,
            out,
            style,
            styles,
            gamma,
            temperature,
            frames,
            seed,
        }),
        Command::Verify { suite, seed } => verify::run(&suite, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(usage) = e.downcast_ref::<Usage>() {
                eprintln!("usage error: {usage}");
                ExitCode::from(1)
            } else if let Some(v) = e.downcast_ref::<VerifyFailed>() {
                eprintln!("{v}");
                ExitCode::from(3)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        }
    }
}
