//! Subcommands of the `xgans` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xgans::corruption::CorruptionKind;
use xgans::evaluation::MetricRegion;

pub use commands::{run, CliError, EXIT_CONFIG, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(name = "xgans", version, about = "Reconstruct images from extreme corruption with a conditional GAN")]
pub struct Cli {
    /// Seed for every random decision.
    #[arg(long, global = true, env = "XGANS_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write corrupted source, real image, mask and spec for every image in a folder.
    Corrupt(CorruptArgs),
    /// Train a generator and discriminators.
    Train(TrainArgs),
    /// Reconstruct corrupted images with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Measure PSNR/SSIM over a corruption sweep, or run the point-loss ablation.
    Evaluate(EvaluateArgs),
    /// Render metric CSV files as line charts.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    UniformPointsWhite,
    FeaturePointsWhite,
    UniformPointsColorNoise,
    CenterWhiteBlock,
    ClutterColorBlock,
}

impl From<KindArg> for CorruptionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::UniformPointsWhite => CorruptionKind::UniformPointsWhite,
            KindArg::FeaturePointsWhite => CorruptionKind::FeaturePointsWhite,
            KindArg::UniformPointsColorNoise => CorruptionKind::UniformPointsColorNoise,
            KindArg::CenterWhiteBlock => CorruptionKind::CenterWhiteBlock,
            KindArg::ClutterColorBlock => CorruptionKind::ClutterColorBlock,
        }
    }
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Keep fraction for point regimes.
    #[arg(long)]
    pub keep: Option<f64>,
    /// Block side for the white block, or the largest side for cluttered blocks.
    #[arg(long, alias = "max-block")]
    pub block: Option<usize>,
    /// Donor image folder for cluttered blocks.
    #[arg(long)]
    pub donor: Option<PathBuf>,
    /// Resize to this square side (native size if omitted).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment configuration (JSON); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long)]
    pub donor_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long, conflicts_with = "max_iterations")]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub sample_every: Option<u64>,
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long, alias = "max-block")]
    pub block: Option<usize>,
    /// Reuse each image's corruption in every epoch.
    #[arg(long)]
    pub frozen_corruption: bool,
    /// VGG-19 weights (safetensors, torchvision names).
    #[arg(long)]
    pub perceptual_weights: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A corrupted image or a folder of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output folder (defaults to next to each input).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write source | reconstruction | real strips. The real image is
    /// looked up as `<stem>_real.png` for inputs named `<stem>_source.png`.
    #[arg(long)]
    pub dump_triptych: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Validation image folder.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "uniform-points-white")]
    pub kind: KindArg,
    /// Keep fractions to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub keep: Vec<f64>,
    /// Block sizes to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub block: Vec<usize>,
    /// Evaluate several sampling strategies at each keep fraction (`uniform`, `feature`, `noise`).
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<String>,
    #[arg(long)]
    pub donor: Option<PathBuf>,
    /// Square side the images are resized to (defaults to the checkpoint's training size).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_enum, default_value = "whole")]
    pub region: RegionArg,
    /// Train L2, L1 and no-point-loss models from this experiment config, then evaluate each.
    #[arg(long)]
    pub ablate_point_loss: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Whole,
    Corrupted,
}

impl From<RegionArg> for MetricRegion {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Whole => MetricRegion::Whole,
            RegionArg::Corrupted => MetricRegion::Corrupted,
        }
    }
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Metric CSV files (`kind,param,image_id,psnr_db,ssim`).
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these sampling strategies (`uniform`, `feature`, `noise`) overlaid on one chart.
    #[arg(long, value_delimiter = ',')]
    pub compare: Vec<String>,
}
