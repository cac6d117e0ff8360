//! `exgan`: synthetic data, training, evaluation and in-painting.

mod commands;
mod grid;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exemplar-conditioned eye in-painting.
///
/// Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
/// runtime or numerical failures.
#[derive(Parser, Debug)]
#[command(name = "exgan", version)]
struct Cli {
    /// Omit wall-clock times from training records so repeated runs produce
    /// byte-identical checkpoints and curves.
    #[arg(long, global = true, env = "EXGAN_DETERMINISTIC", value_parser = clap::builder::BoolishValueParser::new(), default_value = "false")]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic face dataset (images, manifest and trait sidecar).
    Synth(SynthArgs),
    /// Train the eye compressor on a manifest's eye crops.
    TrainCompressor(TrainCompressorArgs),
    /// Train a GAN from an experiment TOML file.
    Train(TrainArgs),
    /// Evaluate a trained generator on a held-out manifest.
    Eval(EvalArgs),
    /// In-paint the eyes of one image and write a comparison grid.
    Inpaint(InpaintArgs),
    /// Merge evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of identities (at least 2).
    #[arg(long)]
    pub ids: usize,
    /// Images per identity (at least 3).
    #[arg(long, default_value_t = 3)]
    pub per_id: usize,
    /// Image side in pixels (at least 32).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minimum L2 distance between identity iris colours.
    #[arg(long)]
    pub min_iris_distance: Option<f64>,
    /// Maximum pose offset as a fraction of the image side.
    #[arg(long)]
    pub pose_jitter: Option<f64>,
    /// Identity id prefix (default `syn`); use distinct prefixes for
    /// training and held-out sets.
    #[arg(long)]
    pub id_prefix: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainCompressorArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment TOML file.
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Training checkpoint of the model to evaluate.
    #[arg(long, required_unless_present = "ground_truth")]
    pub checkpoint: Option<PathBuf>,
    /// Held-out manifest to evaluate on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training manifest: checked for identity overlap, and used to train the
    /// attribute classifier when `--classifier` is absent.
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// Attribute classifier checkpoint for FID and inception score.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Score the ground truth against itself instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub ground_truth: bool,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Padding of each eye's mask box in pixels.
    #[arg(long, default_value_t = 1)]
    pub mask_padding: u32,
    #[arg(long, default_value_t = 1)]
    pub inception_splits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InpaintArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image whose eyes are replaced.
    #[arg(long)]
    pub image: PathBuf,
    /// Another image of the same person (needed by exemplar models).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Eye boxes of `--image` as `lx,ly,lw,lh,rx,ry,rw,rh`.
    #[arg(long)]
    pub eyes: Option<String>,
    /// Eye boxes of `--reference`, same format.
    #[arg(long)]
    pub reference_eyes: Option<String>,
    /// Manifest to look annotations up in when boxes are not given.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub mask_padding: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `report.json` files written by `eval`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let det = cli.deterministic;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, det),
        Command::TrainCompressor(a) => commands::train_compressor(a, det),
        Command::Train(a) => commands::train(a, det),
        Command::Eval(a) => commands::eval(a, det),
        Command::Inpaint(a) => commands::inpaint(a, det),
        Command::Report(a) => commands::report(a, det),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
