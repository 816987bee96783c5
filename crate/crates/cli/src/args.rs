use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use ulsa_core::{PolicyKind, Reconstruction, VjpMode};

#[derive(Debug, Parser)]
#[command(name = "ulsa", version, about = "Closed-loop scan-line subsampling with diffusion posterior sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic beating-heart phantom with region labels.
    Phantom(PhantomArgs),
    /// Run one closed-loop episode over a frame sequence.
    Run(RunArgs),
    /// Time the pipeline stages on a short episode.
    Bench(BenchArgs),
    /// Train a noise-prediction denoiser or fit a Gaussian prior.
    Train(TrainArgs),
    /// Repeat a command from the manifest it wrote.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    /// Axial samples and scan lines per frame.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Elevation planes; makes a 3D volume sequence when set.
    #[arg(long)]
    pub elevation: Option<usize>,
    /// Frames per heartbeat.
    #[arg(long, default_value_t = 16)]
    pub period: usize,
    /// Fractional contraction of the ventricle at peak.
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 1.0)]
    pub speckle: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VjpArg {
    Exact,
    Identity,
}

impl From<VjpArg> for VjpMode {
    fn from(v: VjpArg) -> Self {
        match v {
            VjpArg::Exact => VjpMode::Exact,
            VjpArg::Identity => VjpMode::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconArg {
    First,
    Mean,
}

impl From<ReconArg> for Reconstruction {
    fn from(r: ReconArg) -> Self {
        match r {
            ReconArg::First => Reconstruction::First,
            ReconArg::Mean => Reconstruction::Mean,
        }
    }
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse::<PolicyKind>()
        .map_err(|_| format!("unknown policy '{s}', expected active, random or equispaced"))
}

fn parse_width(s: &str) -> Result<String, String> {
    if s == "auto" {
        return Ok(s.into());
    }
    match s.parse::<f64>() {
        Ok(w) if w > 0.0 && w.is_finite() => Ok(s.into()),
        _ => Err(format!("RBF width must be 'auto' or a positive number, got '{s}'")),
    }
}

/// Settings shared by `run` and `bench`.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EpisodeArgs {
    /// Region labels for gCNR; defaults to labels.ulsa beside the input.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// active, random or equispaced.
    #[arg(long, value_parser = parse_policy, default_value = "active")]
    pub policy: PolicyKind,
    #[arg(long = "lines-per-frame", default_value_t = 4)]
    pub lines_per_frame: usize,
    #[arg(long, default_value_t = 4)]
    pub particles: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Reverse diffusion steps per frame.
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long = "tau-max", default_value_t = 500)]
    pub tau_max: usize,
    #[arg(long = "tau-seqdiff", default_value_t = 450)]
    pub tau_seqdiff: usize,
    #[arg(long, default_value_t = 3.0)]
    pub gamma: f64,
    #[arg(long = "sigma-x2", default_value_t = 0.04)]
    pub sigma_x2: f64,
    /// 'auto' for max(1, (L / 4K)^2) or an explicit width.
    #[arg(long = "rbf-width", value_parser = parse_width, default_value = "auto")]
    pub rbf_width: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint directory, or 'gaussian' to fit a prior on training phantoms.
    #[arg(long, default_value = "gaussian")]
    pub denoiser: String,
    /// Guidance Jacobian; defaults to exact for Gaussian priors.
    #[arg(long, value_enum)]
    pub vjp: Option<VjpArg>,
    /// Clamp the denoised estimate to [-c, c].
    #[arg(long = "clip-x0", default_value_t = 1.0)]
    pub clip_x0: f64,
    #[arg(long = "no-clip")]
    pub no_clip: bool,
    /// Start every frame from pure noise instead of the previous beliefs.
    #[arg(long = "no-seqdiff")]
    pub no_seqdiff: bool,
    /// Use the raw guidance weight even when it exceeds the stable step.
    #[arg(long = "no-step-cap")]
    pub no_step_cap: bool,
    #[arg(long, value_enum, default_value_t = ReconArg::First)]
    pub reconstruction: ReconArg,
    /// Process only the first N frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Record wall times in the log; such logs differ between runs.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RunArgs {
    /// A sequence container, or a directory holding seq.ulsa.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub episode: EpisodeArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Sequence to run on; a default phantom when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub episode: EpisodeArgs,
    /// Frames timed per episode.
    #[arg(long = "bench-frames", default_value_t = 8)]
    pub bench_frames: usize,
    /// Repetitions of each entropy-map timing.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Also write bench.csv and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Learned,
    Gaussian,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Learned)]
    pub kind: ModelKind,
    /// Sequence containers or directories of them (searched one level deep).
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Add this many generated phantoms to the training set.
    #[arg(long, default_value_t = 0)]
    pub phantoms: usize,
    #[arg(long = "phantom-size", default_value_t = 32)]
    pub phantom_size: usize,
    #[arg(long = "phantom-frames", default_value_t = 64)]
    pub phantom_frames: usize,
    /// Seed of the first generated phantom; the rest count up from it.
    #[arg(long = "phantom-seed", default_value_t = 1000)]
    pub phantom_seed: u64,
    /// Spread generated phantom amplitudes evenly over [min, max].
    #[arg(long = "amplitude-min", default_value_t = 0.2)]
    pub amplitude_min: f64,
    #[arg(long = "amplitude-max", default_value_t = 0.2)]
    pub amplitude_max: f64,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long = "tau-max", default_value_t = 500)]
    pub tau_max: usize,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long = "learning-rate", default_value_t = 2e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A manifest.json written by another command.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
