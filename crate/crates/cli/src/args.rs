use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "evfi",
    about = "Event+frame video interpolation: simulate, train, interpolate, evaluate",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate events between two frames and write an EVT1 file
    Simulate(SimulateArgs),
    /// Accumulate an event file into a voxel grid and dump its bins
    Voxelize(VoxelizeArgs),
    /// Run one training stage on toy data
    Train(TrainArgs),
    /// Interpolate an intermediate frame from two frames plus events
    Interpolate(InterpolateArgs),
    /// Frame-skip evaluation on toy sequences
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable operator
    Gradcheck(GradcheckArgs),
    /// Structural property checks (events, blending, formats, metrics)
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// First key frame (PPM/PGM)
    #[arg(long)]
    pub frame_a: PathBuf,
    /// Second key frame (PPM/PGM)
    #[arg(long)]
    pub frame_b: PathBuf,
    /// Timestamp of the first frame in microseconds
    #[arg(long, default_value_t = 0)]
    pub t_a: u64,
    /// Timestamp of the second frame in microseconds
    #[arg(long, default_value_t = 10_000)]
    pub t_b: u64,
    /// Contrast threshold
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the CSV form
    #[arg(long, default_value_t = false)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    /// EVT1 event file
    #[arg(long)]
    pub events: PathBuf,
    /// Temporal bins
    #[arg(long, default_value_t = 16)]
    pub bins: usize,
    /// Window start (defaults to the stream window)
    #[arg(long)]
    pub t0: Option<u64>,
    /// Window end (defaults to the stream window)
    #[arg(long)]
    pub t1: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration file (key = value lines)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training stage, overrides the config
    #[arg(long)]
    pub stage: Option<u8>,
    /// Flow checkpoint for stage two (overrides the config path)
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    /// First key frame (PPM/PGM)
    #[arg(long)]
    pub frame_a: PathBuf,
    /// Second key frame (PPM/PGM)
    #[arg(long)]
    pub frame_b: PathBuf,
    /// EVT1 events spanning the pair
    #[arg(long)]
    pub events: PathBuf,
    /// Normalized interpolation time in (0, 1)
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    /// Flow checkpoint
    #[arg(long)]
    pub flow_ckpt: PathBuf,
    /// Synthesis checkpoint
    #[arg(long)]
    pub synth_ckpt: PathBuf,
    /// Run configuration (for network sizes)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also dump per-scale flows (FLO1) and confidence masks (PGM)
    #[arg(long, default_value_t = false)]
    pub dump_flows: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated skip list, e.g. 1,3,7 (overrides the config)
    #[arg(long, value_delimiter = ',')]
    pub skips: Option<Vec<usize>>,
    /// middle or whole (overrides the config)
    #[arg(long)]
    pub mode: Option<String>,
    /// Flow checkpoint
    #[arg(long)]
    pub flow_ckpt: PathBuf,
    /// Synthesis checkpoint
    #[arg(long)]
    pub synth_ckpt: PathBuf,
    /// Worker threads for the evaluation
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the random micro instances
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Optional directory for the text report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Seed for the randomized properties
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}
