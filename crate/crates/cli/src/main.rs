//! `spectraleaf`: generate plates, ingest annotations, train, evaluate and
//! predict. Exit status is 0 on success, 1 on a runtime failure and 2 on a
//! usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "spectraleaf", version, about = "Multi-spectral leaf anomaly segmentation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file; flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Globals {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a synthetic plate dataset.
    GenData(GenDataArgs),
    /// Convert LabelMe polygons and images into a dataset.
    Ingest(IngestArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Segment images and draw overlays.
    Predict(PredictArgs),
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::GenData(_) => "gen-data",
            Cmd::Ingest(_) => "ingest",
            Cmd::Train(_) => "train",
            Cmd::Eval(_) => "eval",
            Cmd::Predict(_) => "predict",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormatArg {
    F32,
    U16,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Number of plates.
    #[arg(long, default_value_t = 160, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    /// Plate side in pixels (multiple of 32).
    #[arg(long, default_value_t = 640)]
    pub size: usize,
    /// Chlorosis visible-band contrast relative to its NIR contrast.
    #[arg(long, default_value_t = 0.4)]
    pub contrast: f64,
    /// Draw acquisition days from `LO-HI` instead of the reference day.
    #[arg(long, value_name = "LO-HI")]
    pub days: Option<String>,
    #[arg(long, value_enum, default_value_t = SampleFormatArg::F32)]
    pub format: SampleFormatArg,
    #[arg(long, default_value_t = spectraleaf::annotation::DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IngestArgs {
    /// Directory of LabelMe `.json` files.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Where images are looked up as `<id>.tif`; defaults to each
    /// document's `imagePath`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = spectraleaf::annotation::DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadArg {
    Conv,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    /// Narrow network for CPU-scale runs.
    Tiny,
    /// Full-width network.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptArg {
    Replicate,
    Average,
    Zero,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory holding `dataset.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 9, value_parser = parse_channels)]
    pub channels: usize,
    #[arg(long, value_enum, default_value_t = HeadArg::Transformer)]
    pub head: HeadArg,
    #[arg(long, value_enum, default_value_t = ModelArg::Full)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Disable flips, rotations and colour jitter.
    #[arg(long)]
    pub no_augment: bool,
    /// Weight the semantic loss by inverse class frequency.
    #[arg(long)]
    pub class_weighting: bool,
    /// Start from a checkpoint, widening a 3-band stem if needed.
    #[arg(long, value_name = "CKPT")]
    pub init_from: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AdaptArg::Replicate)]
    pub adapt_mode: AdaptArg,
    #[arg(long, default_value_t = spectraleaf::annotation::DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Two checkpoints scored side by side, baseline first.
    #[arg(long, num_args = 1..=2, value_delimiter = ',', value_names = ["A", "B"])]
    pub compare: Vec<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value_t = SubsetArg::Val)]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = spectraleaf::annotation::DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Image path or glob pattern.
    #[arg(long)]
    pub input: String,
    /// Directory of ground-truth masks named `<id>.tif` or `<id>.pgm`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Second checkpoint drawn in its own panel.
    #[arg(long, value_name = "CKPT")]
    pub compare: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub semantic_threshold: f32,
}

fn parse_channels(s: &str) -> Result<usize, String> {
    match s {
        "3" => Ok(3),
        "9" => Ok(9),
        _ => Err(format!("channels must be 3 or 9, got {s}")),
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<spectraleaf::Error> for Failure {
    fn from(e: spectraleaf::Error) -> Self {
        match e {
            spectraleaf::Error::ChannelMismatch { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let mut argv: Vec<String> = std::env::args().collect();
    if let Some(path) = config::config_path(&argv) {
        let spliced = std::fs::read_to_string(&path)
            .map_err(|e| format!("cannot read config {path}: {e}"))
            .and_then(|text| config::parse(&text))
            .and_then(|pairs| config::splice(&Cli::command(), &argv, &pairs));
        match spliced {
            Ok(a) => argv = a,
            Err(msg) => {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
