use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use metaforge::capture::Noise;
use metaforge::kernels::ColorMode;

/// Metasurface front-end design: optimize, render, capture, evaluate, bench.
///
/// Flags override values from `--config`.
#[derive(Debug, Parser)]
#[command(name = "metaforge", version)]
pub struct Cli {
    /// Print the JSON report on stdout instead of a human summary.
    #[arg(long, global = true)]
    pub json: bool,

    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Direct kernel optimization.
    #[command(subcommand)]
    Dko(DkoCommand),
    /// Kernel utilities.
    #[command(subcommand)]
    Kernels(KernelsCommand),
    /// Simulated opto-electronic capture.
    #[command(subcommand)]
    Capture(CaptureCommand),
    /// Kernel-match and depth metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Parameter accounting and step timing.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run the embedded invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum DkoCommand {
    /// Design one metasurface per half-kernel of a first layer.
    Optimize(OptimizeArgs),
    /// Render the PSF of a phase map.
    RenderPsf(RenderPsfArgs),
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// First-layer weights, NPY [L, C, k, k] (cross-correlation convention).
    #[arg(long)]
    pub kernels: PathBuf,
    /// Array plan; inferred from C when omitted.
    #[arg(long)]
    pub plan: Option<ColorMode>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for the layer driver.
    #[arg(long, env = "METAFORGE_JOBS")]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Also write the loss gradient at each returned phase.
    #[arg(long)]
    pub dump_grad: bool,
}

#[derive(Debug, Args)]
pub struct RenderPsfArgs {
    /// Phase map, NPY [n, n] in radians.
    #[arg(long)]
    pub phase: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output PSF (NPY); a PGM preview and JSON report are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only the centered window of this size.
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum KernelsCommand {
    /// Split signed kernels into non-negative halves following a plan.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub kernels: PathBuf,
    #[arg(long)]
    pub plan: Option<ColorMode>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum CaptureCommand {
    /// Render a scene through a designed layer.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene: NPY [H, W] or [H, W, 3] linear intensity, or binary PGM/PPM.
    #[arg(long)]
    pub scene: PathBuf,
    /// Output directory of `dko optimize`.
    #[arg(long)]
    pub results: PathBuf,
    /// Feature maps, NPY [L, H', W'].
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// none, gaussian:<sigma> or poisson:<scale>.
    #[arg(long)]
    pub noise: Option<Noise>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub quantization_bits: Option<u32>,
    /// Also run the electronic layer and report the relative L2 difference.
    #[arg(long)]
    pub compare_electronic: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Compare realized kernels with their targets.
    Kernels(EvalKernelsArgs),
    /// Standard depth metrics.
    Depth(EvalDepthArgs),
}

#[derive(Debug, Args)]
pub struct EvalKernelsArgs {
    /// Output directory of `dko optimize`.
    #[arg(long)]
    pub realized: PathBuf,
    /// First-layer weights the design was made for.
    #[arg(long)]
    pub targets: PathBuf,
    /// JSON report; a CSV with per-kernel rows is written beside it.
    #[arg(long, default_value = "eval_kernels.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalDepthArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Validity mask (non-zero = valid); defaults to gt > 0.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value = "eval_depth.json")]
    pub report: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Optical versus electronic parameter counts.
    Accounting(AccountingArgs),
    /// Time one optimization step per mode.
    Steps(StepsArgs),
}

#[derive(Debug, Args)]
pub struct AccountingArgs {
    #[arg(long, default_value = "rgb-signed")]
    pub plan: ColorMode,
    /// Output channels.
    #[arg(long = "L", default_value_t = 64)]
    pub l: usize,
    /// Input channels; must match the plan.
    #[arg(long = "C")]
    pub c: Option<usize>,
    /// Phase samples per side.
    #[arg(long, default_value_t = 1025)]
    pub grid: usize,
    #[arg(long, default_value_t = 7)]
    pub k: usize,
    #[arg(long, default_value = "bench_accounting.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct StepsArgs {
    /// Comma-separated subset of dko, e2e, electronic.
    #[arg(long, value_delimiter = ',', default_value = "dko,e2e,electronic")]
    pub modes: Vec<String>,
    /// Overrides such as `grid=128,elements=12,scene=64,k=7,batch=4`.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Nominal DKO iterations for the convergence projection.
    #[arg(long, default_value_t = 2000)]
    pub dko_steps: usize,
    /// Nominal end-to-end steps for the convergence projection.
    #[arg(long, default_value_t = 2000)]
    pub e2e_steps: usize,
    #[arg(long, default_value = "bench.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "selftest.json")]
    pub report: PathBuf,
}
