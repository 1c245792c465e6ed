//! `dmem`: synthesize data, train the three-path ensemble, predict,
//! evaluate and check gradients.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 numerical failure,
//! 4 data mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dmem", version, about = "Cervical cell segmentation with a three-path dense U-Net ensemble")]
struct Cli {
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the three paths, or one network with --single-path.
    Train(TrainArgs),
    /// Segment images with a trained bundle.
    Predict(PredictArgs),
    /// Score predicted nucleus masks against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Image height and width.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub nuclei_min: Option<usize>,
    #[arg(long)]
    pub nuclei_max: Option<usize>,
    /// 1 (gray) or 3 (RGB).
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training data: an index file or a directory containing index.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation data, same forms as --data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Move the last N samples of --data to the validation set.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Bundle output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train only this variant (plain, deform-contract, deform-expand).
    #[arg(long, value_name = "VARIANT")]
    pub single_path: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Train the paths on separate threads.
    #[arg(long)]
    pub parallel: bool,
    /// Training precision: f64 (default) or f32, which is about twice as fast.
    #[arg(long)]
    pub precision: Option<String>,
    /// labels (class values 0..3) or raw (0/85/170/255 palette).
    #[arg(long)]
    pub mask_format: Option<String>,
    /// Nucleus area below which a raw-palette nucleus is abnormal.
    #[arg(long)]
    pub size_threshold: Option<usize>,
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub growth_rate: Option<usize>,
    #[arg(long)]
    pub layers_per_block: Option<usize>,
    #[arg(long)]
    pub initial_channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Bundle directory written by `train`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// An index file, a directory with index.tsv, or a directory of images.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output directory for labels/ and nuclei/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Resize images to the network input instead of rejecting them.
    #[arg(long)]
    pub resize: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground truth: a dataset (index or directory with index.tsv) or a
    /// directory of label masks.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Predictions as NAME=DIR or DIR; repeat to compare methods.
    #[arg(long = "pred", required = true)]
    pub preds: Vec<String>,
    /// Directory for per-method TSV reports and the summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Op name, or `all`.
    pub op: String,
    /// Scale analytic gradients by 1 + F (harness self-test).
    #[arg(long, hide = true, value_name = "F", default_value_t = 0.0)]
    pub corrupt_grad: f64,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        CliError { code: 4, msg: msg.into() }
    }
}

impl From<dmem::Error> for CliError {
    fn from(e: dmem::Error) -> Self {
        match e {
            dmem::Error::NonFinite(_) | dmem::Error::NonFiniteLoss { .. } => {
                CliError::numeric(e.to_string())
            }
            _ => CliError::usage(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(config::load_file).transpose()?;
    let file = file.as_ref();
    match cli.command {
        Command::Synth(a) => commands::synth(&a, file, cli.seed),
        Command::Train(a) => commands::train(&a, file, cli.seed),
        Command::Predict(a) => commands::predict(&a, file),
        Command::Eval(a) => commands::eval(&a, file),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
