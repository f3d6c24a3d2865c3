use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "mscaps",
    version,
    about = "SAR change detection with a multiscale capsule network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic speckled scene pair with ground truth
    Synth(SynthArgs),
    /// Compute the log-ratio difference image of a scene pair
    Di(DiArgs),
    /// Label reliable pixels by hierarchical clustering
    Label(DiArgs),
    /// Train the capsule network on self-labeled patches
    Train(TrainArgs),
    /// Classify every pixel with a trained model
    Infer(InferArgs),
    /// Score a change map against ground truth
    Eval(EvalArgs),
    /// Re-run the pipeline across a list of parameter values
    Sweep(SweepArgs),
    /// Full pipeline: scene to metrics in one invocation
    Run(RunArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
pub struct Common {
    /// Output directory (created if missing)
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Base RNG seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// key=value defaults file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution
    #[arg(long)]
    pub deterministic: bool,
}

/// Training hyperparameters.
#[derive(Args)]
pub struct Knobs {
    /// Patch edge length r (odd, >= 9)
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    /// Training sample count n
    #[arg(long)]
    pub samples: Option<usize>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size
    #[arg(long)]
    pub batch: Option<usize>,
    /// Dynamic routing iterations
    #[arg(long = "routing-iters")]
    pub routing_iters: Option<usize>,
}

/// Synthetic scene parameters.
#[derive(Args)]
pub struct SynthKnobs {
    /// Scene size as WIDTHxHEIGHT, e.g. 128x128
    #[arg(long)]
    pub size: Option<String>,
    /// Changed rectangle as top,left,bottom,right (half-open); repeatable
    #[arg(long)]
    pub region: Vec<String>,
    /// Speckle looks (gamma shape)
    #[arg(long)]
    pub looks: Option<u32>,
    /// Reflectivity inside changed regions at time 2
    #[arg(long)]
    pub contrast: Option<f64>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthKnobs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct DiArgs {
    /// First acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img1: Option<PathBuf>,
    /// Second acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img2: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct TrainArgs {
    /// First acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img1: Option<PathBuf>,
    /// Second acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img2: Option<PathBuf>,
    /// Precomputed difference image (8-bit PGM) instead of a raw pair
    #[arg(long)]
    pub di: Option<PathBuf>,
    /// Precomputed label map (0/128/255 PGM); derived from the DI if absent
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct InferArgs {
    /// First acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img1: Option<PathBuf>,
    /// Second acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img2: Option<PathBuf>,
    /// Precomputed difference image (8-bit PGM) instead of a raw pair
    #[arg(long)]
    pub di: Option<PathBuf>,
    /// Trained model checkpoint
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Predicted change map (binary PGM or PNG)
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Ground truth (binary PGM or PNG)
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Vary the patch edge length r
    PatchSize,
    /// Vary the training sample count n
    Samples,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Which parameter the value list applies to
    #[arg(long, value_enum)]
    pub axis: Option<SweepAxis>,
    /// Comma-separated list of values, e.g. 9,13,17
    #[arg(long)]
    pub values: Option<String>,
    #[command(flatten)]
    pub scene: SceneSource,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub common: Common,
}

/// Either an existing pair (plus optional truth) or synth parameters.
#[derive(Args)]
pub struct SceneSource {
    /// First acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img1: Option<PathBuf>,
    /// Second acquisition (PGM or grayscale PNG)
    #[arg(long)]
    pub img2: Option<PathBuf>,
    /// Ground truth (binary PGM or PNG); enables the evaluation stage
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthKnobs,
}

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scene: SceneSource,
    #[command(flatten)]
    pub knobs: Knobs,
    #[command(flatten)]
    pub common: Common,
}
