mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigFile;

/// Multiplicative-noise removal with log-domain score-based diffusion.
#[derive(Parser, Debug)]
#[command(name = "despeckle", version)]
struct Cli {
    /// `key=value` settings file; command-line flags and environment variables win.
    #[arg(long, global = true, env = "DESPECKLE_CONFIG")]
    config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply the forward corruption to an image or a directory of images.
    Corrupt(CorruptArgs),
    /// Train a score network on a directory of images.
    Train(TrainArgs),
    /// Remove noise with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare a directory of results against clean references.
    Eval(EvalArgs),
    /// Run the built-in analytic and statistical checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Input PGM/PPM file or directory.
    #[arg(long, env = "DESPECKLE_INPUT")]
    pub input: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, env = "DESPECKLE_OUTPUT")]
    pub output: Option<PathBuf>,
    /// Diffusion step to corrupt to.
    #[arg(long, env = "DESPECKLE_STEP", conflicts_with = "level")]
    pub step: Option<usize>,
    /// Log-domain noise variance to corrupt to.
    #[arg(long, env = "DESPECKLE_LEVEL")]
    pub level: Option<f64>,
    /// Number of diffusion steps K.
    #[arg(long, env = "DESPECKLE_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "DESPECKLE_ETA_PER_STEP")]
    pub eta_per_step: Option<f64>,
    #[arg(long, env = "DESPECKLE_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of PGM/PPM training images.
    #[arg(long, env = "DESPECKLE_DATA")]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, env = "DESPECKLE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "DESPECKLE_EPOCHS")]
    pub epochs: Option<u64>,
    #[arg(long, env = "DESPECKLE_STEPS")]
    pub steps: Option<usize>,
    #[arg(long, env = "DESPECKLE_ETA_PER_STEP")]
    pub eta_per_step: Option<f64>,
    #[arg(long, env = "DESPECKLE_BATCH")]
    pub batch: Option<usize>,
    #[arg(long, env = "DESPECKLE_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "DESPECKLE_SEED")]
    pub seed: Option<u64>,
    /// Square crop size; a multiple of 4.
    #[arg(long, env = "DESPECKLE_PATCH")]
    pub patch: Option<usize>,
    /// Write `<out>.epoch-N` every this many epochs (0 = never).
    #[arg(long, env = "DESPECKLE_CHECKPOINT_INTERVAL")]
    pub checkpoint_interval: Option<u64>,
    /// U-Net width at full resolution.
    #[arg(long, env = "DESPECKLE_BASE_WIDTH")]
    pub base_width: Option<usize>,
    /// Number of U-Net resolutions.
    #[arg(long, env = "DESPECKLE_LEVELS")]
    pub levels: Option<usize>,
    #[arg(long, env = "DESPECKLE_EMB_DIM")]
    pub emb_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[arg(long, env = "DESPECKLE_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// Noisy PGM/PPM file or directory.
    #[arg(long, env = "DESPECKLE_INPUT")]
    pub input: Option<PathBuf>,
    #[arg(long, env = "DESPECKLE_OUTPUT")]
    pub output: Option<PathBuf>,
    /// ode, ddim or stochastic.
    #[arg(long, env = "DESPECKLE_METHOD")]
    pub method: Option<String>,
    /// Log-domain noise variance of the input.
    #[arg(long, env = "DESPECKLE_LEVEL", conflicts_with = "step")]
    pub level: Option<f64>,
    /// Start the reverse process at this step instead of a level.
    #[arg(long, env = "DESPECKLE_STEP")]
    pub step: Option<usize>,
    /// DDIM noise as a fraction z of its maximum: zeta_k^2 = z * eta(k-1).
    #[arg(long, env = "DESPECKLE_ZETA")]
    pub zeta: Option<f64>,
    /// DDIM step stride.
    #[arg(long, env = "DESPECKLE_STRIDE")]
    pub stride: Option<usize>,
    #[arg(long, env = "DESPECKLE_SEED")]
    pub seed: Option<u64>,
    /// Images evaluated together per network call.
    #[arg(long, env = "DESPECKLE_BATCH")]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of clean references.
    #[arg(long, env = "DESPECKLE_CLEAN")]
    pub clean: Option<PathBuf>,
    /// Directory of images to score, matched by file name.
    #[arg(long, env = "DESPECKLE_TEST")]
    pub test: Option<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long, env = "DESPECKLE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, env = "DESPECKLE_SEED")]
    pub seed: Option<u64>,
    /// Monte Carlo samples per statistical check.
    #[arg(long, env = "DESPECKLE_SAMPLES")]
    pub samples: Option<usize>,
    /// Random seeds per primitive in the gradient check.
    #[arg(long)]
    pub grad_seeds: Option<u64>,
    /// Flip the forward drift sign; a negative control that must fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let file = match cli.config.as_deref().map(ConfigFile::load).transpose() {
        Ok(f) => f.unwrap_or_default(),
        Err(e) => return report(&e),
    };
    let result = match cli.command {
        Command::Corrupt(a) => commands::corrupt(a, &file),
        Command::Train(a) => commands::train(a, &file),
        Command::Denoise(a) => commands::denoise(a, &file),
        Command::Eval(a) => commands::eval(a, &file),
        Command::Verify(a) => commands::verify(a, &file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &despeckle::Error) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error: {}: {msg}", e.category());
    ExitCode::from(1)
}
