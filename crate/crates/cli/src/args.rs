use std::path::PathBuf;

use bsunet::config::DATA_ENV;
use bsunet::datapipe::{Channels, LabelTarget, Scaling};
use bsunet::metrics::Connectivity;
use bsunet::trainer::{Boundary, Stage};
use bsunet::weightmap::{Exponent, RoiMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "bsunet",
    version,
    about = "Liver and liver-tumor CT segmentation with bottleneck-supervised U-Nets"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window, scale and slice labelled volumes into a training cache.
    Preprocess(PreprocessArgs),
    /// Compute the contour-distance weight map of a label volume.
    Weightmap(WeightmapArgs),
    /// Phase one: train the skip-less network on label maps.
    TrainEncoder(TrainEncoderArgs),
    /// Train a segmenter, with bottleneck supervision when w2 > 0.
    TrainSeg(TrainSegArgs),
    /// Predict binary masks for every volume in a directory.
    Predict(PredictArgs),
    /// Liver then tumor prediction on liver crops; writes 0/1/2 label volumes.
    CascadePredict(CascadePredictArgs),
    /// Score predicted label volumes against reference ones.
    Evaluate(EvaluateArgs),
    /// Print per-block and total trainable parameter counts.
    Params(ParamsArgs),
    /// Plot raw and smoothed loss curves from loss CSVs.
    PlotLosses(PlotLossesArgs),
    /// Run every stage from a configuration file into a resumable run directory.
    Pipeline(PipelineArgs),
    /// Write synthetic CT and label volumes with the LiTS file layout.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Liver,
    Tumor,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Liver => Stage::Liver,
            StageArg::Tumor => Stage::Tumor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelsArg {
    #[value(name = "1")]
    One,
    #[value(name = "3")]
    Three,
}

impl From<ChannelsArg> for Channels {
    fn from(c: ChannelsArg) -> Channels {
        match c {
            ChannelsArg::One => Channels::One,
            ChannelsArg::Three => Channels::Three,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalingArg {
    /// Each volume's own windowed minimum and maximum.
    PerVolume,
    /// The window bounds.
    Fixed,
}

impl From<ScalingArg> for Scaling {
    fn from(s: ScalingArg) -> Scaling {
        match s {
            ScalingArg::PerVolume => Scaling::PerVolume,
            ScalingArg::Fixed => Scaling::Fixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    /// Labels 1 and 2.
    Liver,
    /// Label 1 only.
    LiverOnly,
    /// Label 2.
    Tumor,
}

impl From<TargetArg> for LabelTarget {
    fn from(t: TargetArg) -> LabelTarget {
        match t {
            TargetArg::Liver => LabelTarget::Liver,
            TargetArg::LiverOnly => LabelTarget::LiverOnly,
            TargetArg::Tumor => LabelTarget::Tumor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundaryArg {
    Empty,
    Replicate,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Boundary {
        match b {
            BoundaryArg::Empty => Boundary::Empty,
            BoundaryArg::Replicate => Boundary::Replicate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoiArg {
    None,
    Tumor,
}

impl From<RoiArg> for RoiMode {
    fn from(r: RoiArg) -> RoiMode {
        match r {
            RoiArg::None => RoiMode::None,
            RoiArg::Tumor => RoiMode::Tumor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExponentArg {
    Linear,
    Squared,
}

impl From<ExponentArg> for Exponent {
    fn from(e: ExponentArg) -> Exponent {
        match e {
            ExponentArg::Linear => Exponent::Linear,
            ExponentArg::Squared => Exponent::Squared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "6")]
    Six,
    #[value(name = "18")]
    Eighteen,
    #[value(name = "26")]
    TwentySix,
}

impl From<ConnectivityArg> for Connectivity {
    fn from(c: ConnectivityArg) -> Connectivity {
        match c {
            ConnectivityArg::Six => Connectivity::Six,
            ConnectivityArg::Eighteen => Connectivity::Eighteen,
            ConnectivityArg::TwentySix => Connectivity::TwentySix,
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of volume-N / segmentation-N NIfTI files.
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "liver")]
    pub stage: StageArg,
    #[arg(long, value_enum, default_value = "1")]
    pub channels: ChannelsArg,
    #[arg(long, value_enum, default_value = "per-volume")]
    pub scaling: ScalingArg,
    /// Labels counted as foreground in the liver stage.
    #[arg(long, value_enum, default_value = "liver")]
    pub label_target: TargetArg,
    /// Cache file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WeightmapArgs {
    /// Label volume (0 background, 1 liver, 2 tumor).
    #[arg(long)]
    pub labels: PathBuf,
    /// Weight volume to write (NIfTI, float).
    #[arg(long)]
    pub out: PathBuf,
    /// Which labels form the binary map whose contour is used.
    #[arg(long, value_enum, default_value = "liver")]
    pub target: TargetArg,
    /// Emphasis of the region of interest.
    #[arg(long, default_value_t = 0.05)]
    pub w: f64,
    /// Distance decay constant in pixels.
    #[arg(long, default_value_t = 20.0)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value = "none")]
    pub roi: RoiArg,
    #[arg(long, value_enum, default_value = "linear")]
    pub exponent: ExponentArg,
    /// Directory for 8-bit PNG previews (255 · W) of slices with a contour.
    #[arg(long)]
    pub preview_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCommon {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Cache written by `preprocess`.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, value_enum, default_value = "liver")]
    pub stage: StageArg,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss CSV; defaults to the checkpoint path with a `_loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    #[command(flatten)]
    pub common: TrainCommon,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Encoder checkpoint from `train-encoder`; required when w2 > 0.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictCommon {
    /// Directory of volume-N NIfTI files.
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// Output directory for segmentation-N.nii files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "per-volume")]
    pub scaling: ScalingArg,
    /// Three-channel handling of the first and last slice.
    #[arg(long, value_enum, default_value = "empty")]
    pub boundary: BoundaryArg,
    /// Slices per forward pass.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Segmenter checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub common: PredictCommon,
    /// Label value written for foreground voxels.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub label: u8,
}

#[derive(Debug, Args)]
pub struct CascadePredictArgs {
    /// Liver-stage segmenter checkpoint.
    #[arg(long)]
    pub liver: PathBuf,
    /// Tumor-stage segmenter checkpoint.
    #[arg(long)]
    pub tumor: PathBuf,
    #[command(flatten)]
    pub common: PredictCommon,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of predicted segmentation-N files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference segmentation-N files.
    #[arg(long)]
    pub truth: PathBuf,
    /// 1 scores the liver (labels 1 and 2), 2 scores the tumor.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub label: u8,
    /// Per-case CSV with a trailing summary row.
    #[arg(long)]
    pub out: PathBuf,
    /// Neighborhood defining surface voxels.
    #[arg(long, value_enum, default_value = "6")]
    pub connectivity: ConnectivityArg,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Network description (TOML).
    pub spec: PathBuf,
    /// Fail unless the total equals this count.
    #[arg(long)]
    pub expect: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotLossesArgs {
    /// Run directory; every `*_loss.csv` below it is plotted.
    #[arg(long, required_unless_present = "csv")]
    pub run_dir: Option<PathBuf>,
    /// Individual loss CSVs.
    #[arg(long, num_args = 1..)]
    pub csv: Vec<PathBuf>,
    /// Output directory; defaults to `<run-dir>/plots` or the CSV's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exponential smoothing factor in [0, 1).
    #[arg(long, default_value_t = 0.9)]
    pub smoothing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineStage {
    Liver,
    Tumor,
    All,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving every artifact and the manifest.
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: PipelineStage,
    /// Redo steps that already completed.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub cases: usize,
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// In-plane size (height = width).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
