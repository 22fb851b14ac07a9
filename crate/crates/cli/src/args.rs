use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use intrinsic_core::synth::{Canvas, Formation};
use intrinsic_nets::ModelKind;

/// Intrinsic image decomposition toolkit.
#[derive(Debug, Parser)]
#[command(name = "intrinsic", version)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with exact ground truth.
    Dataset(DatasetArgs),
    /// Train IntrinsicNet or a RetiNet stage.
    Train(TrainArgs),
    /// Split images into reflectance and shading.
    Decompose(DecomposeArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Run gradient checks, formation round trips and metric oracles.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: $INTRINSIC_OUT/dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "diffuse", value_parser = parse_formation)]
    pub formation: Formation,
    /// Canvas as HxW (default 32x32, or 120x160 with --paper-scale).
    #[arg(long, value_parser = parse_canvas)]
    pub canvas: Option<Canvas>,
    /// Gently curved shapes under white light.
    #[arg(long)]
    pub smooth_shading: bool,
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_model)]
    pub model: ModelKind,
    /// Dataset manifest or the directory holding it.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// JSON with optional `arch` and `train` objects; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub imf: Option<Switch>,
    /// Stage 2 consumes ground-truth gradients (training and inference).
    #[arg(long)]
    pub gt_gradients: bool,
    /// Trained retinet-s1 model directory (needed by retinet-s2).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Output directory (default: $INTRINSIC_OUT/<model>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub augment: Option<Switch>,
    /// Widths and optimizer settings of the full-size networks.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("method").required(true).args(["model", "retinex"])))]
pub struct DecomposeArgs {
    /// Trained model directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the classical Retinex baseline.
    #[arg(long)]
    pub retinex: bool,
    /// Images (.pfm/.png) or dataset directories/manifests.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory (default: $INTRINSIC_OUT/decompose).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retinex gradient threshold.
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Display gamma of the PNG previews.
    #[arg(long, default_value_t = 2.2)]
    pub gamma: f32,
    /// Exponent that linearizes 8-bit PNG inputs.
    #[arg(long)]
    pub png_gamma: Option<f32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<name>_reflectance.pfm` / `<name>_shading.pfm`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset manifest, its directory, or a per-object benchmark directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// LMSE window size.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Output directory (default: $INTRINSIC_OUT/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub png_gamma: Option<f32>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn parse_formation(s: &str) -> Result<Formation, String> {
    s.parse().map_err(|e: intrinsic_core::Error| e.to_string())
}

fn parse_canvas(s: &str) -> Result<Canvas, String> {
    s.parse().map_err(|e: intrinsic_core::Error| e.to_string())
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: intrinsic_nets::Error| e.to_string())
}
