//! `elastireg`: phantom generation, registration, amortizer training,
//! parameter sweeps and evaluation from the command line.
//!
//! ```bash
//! elastireg phantom --out data --count 4 --dims 32,32 --field bump --amplitude 2 --sigma 5
//! elastireg register --case data/case_000/case.cfg --lambda 0.1 --mu 0.1 --out reg
//! elastireg train --corpus data --steps 2000 --out model.ckpt
//! elastireg sweep --corpus data --engine amortized --model model.ckpt --out sweep
//! elastireg evaluate --case data/case_000/case.cfg --field reg/field.rvol
//! ```

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "elastireg",
    version,
    about = "Deformable registration with linear-elastic regularization"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file whose entries act as flags of the subcommand
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for sweeps (0 = all cores)
    #[arg(long, global = true, env = "ELASTIREG_JOBS", default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic image pairs with known ground truth
    Phantom(PhantomArgs),
    /// Register one pair and print its metrics as JSON
    Register(RegisterArgs),
    /// Train the hypernetwork on a corpus
    Train(TrainArgs),
    /// Grid search over the elasticity parameters
    Sweep(SweepArgs),
    /// Score a saved displacement field
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FieldKind {
    Identity,
    Bump,
    Affine,
    Rotation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PatternKind {
    Blobs,
    Checker,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory; cases go to <out>/case_000, <out>/case_001, ...
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub dims: Vec<usize>,
    /// Voxel spacing in mm (defaults to 1 per axis)
    #[arg(long, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "blobs")]
    pub pattern: PatternKind,
    /// Number of blobs for the blob pattern
    #[arg(long, default_value_t = 8)]
    pub blobs: usize,
    /// Period in voxels for the checker pattern
    #[arg(long, default_value_t = 8.0)]
    pub period: f64,
    #[arg(long, value_enum, default_value = "bump")]
    pub field: FieldKind,
    /// Bump amplitude in voxels
    #[arg(long, default_value_t = 3.0)]
    pub amplitude: f64,
    /// Bump width in voxels
    #[arg(long, default_value_t = 8.0)]
    pub sigma: f64,
    /// Rotation angle in degrees
    #[arg(long, default_value_t = 5.0)]
    pub angle: f64,
    /// Row-major D×D matrix for the affine field
    #[arg(long, value_delimiter = ',')]
    pub linear: Option<Vec<f64>>,
    /// Translation in voxels for the affine field
    #[arg(long, value_delimiter = ',')]
    pub translation: Option<Vec<f64>>,
    /// Keep ground-truth fields that fold
    #[arg(long)]
    pub allow_folding: bool,
}

/// Where a single pair comes from.
#[derive(Args, Debug)]
pub struct PairArgs {
    /// case.cfg describing the pair
    #[arg(long, conflicts_with_all = ["fixed", "moving"])]
    pub case: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    pub fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed")]
    pub moving: Option<PathBuf>,
    /// Skip clipping and min-max scaling for --fixed/--moving
    #[arg(long)]
    pub raw_intensities: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ObjectiveKind {
    /// (1−λ_α−μ_α)(1−NCC) + E_el(λ_α, μ_α)
    Absorbed,
    /// (1−α)(1−NCC) + α·E_el(λ, μ)
    Elastic,
    /// (1−α)(1−NCC) + α·E_diff
    Diffusion,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Args, Debug)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 250)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Resolution levels (1 = single resolution)
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleKind,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_enum, default_value = "absorbed")]
    pub objective: ObjectiveKind,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    /// Global weight for the elastic and diffusion objectives
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Tissue preset for the elastic objective (overrides --lambda/--mu)
    #[arg(long)]
    pub preset: Option<String>,
    /// Factor applied to the preset parameters
    #[arg(long, default_value_t = 1.0)]
    pub preset_scale: f64,
    /// NCC window edge length
    #[arg(long, default_value_t = 9)]
    pub window: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Directory for field.rvol and result.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A set of pairs: a corpus directory and/or explicit case files.
#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// Directory whose subdirectories each hold a case.cfg
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Explicit case.cfg files (repeatable)
    #[arg(long = "case")]
    pub cases: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "cosine")]
    pub schedule: ScheduleKind,
    /// Displacement scale of the predicted field, in voxels
    #[arg(long, default_value_t = 5.0)]
    pub max_displacement: f64,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON file for the per-step loss
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum EngineKind {
    Amortized,
    Instance,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 0.1)]
    pub resolution: f64,
    /// dice, tre, or weighted:<w_dice>,<w_tre>,<w_neg_jac> (repeatable)
    #[arg(long = "heuristic")]
    pub heuristics: Vec<String>,
    #[arg(long, value_enum, default_value = "instance")]
    pub engine: EngineKind,
    /// Shorthand for --engine amortized
    #[arg(long)]
    pub amortized: bool,
    /// Checkpoint for the amortized engine
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Second pass at resolution/5 around the optimum of the first heuristic
    #[arg(long)]
    pub refine: bool,
    /// Instead of the (λ_α, μ_α) grid, sweep α for every tissue preset at
    /// scales 1, 0.1 and 0.01 and for diffusion
    #[arg(long)]
    pub alpha_presets: bool,
    /// α values for --alpha-presets
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
    )]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output directory for sweep.json and sweep.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Displacement field RVOL
    #[arg(long)]
    pub field: PathBuf,
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return commands::report_error(&e),
    };
    let cli = Cli::parse_from(args);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report_error(&e),
    }
}
