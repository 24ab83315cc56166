//! `defwarp`: interpolate a middle frame from two references, audit the
//! warp gradients, run the overfit demo, generate synthetic inputs and
//! compare images.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "defwarp", version, about = "Deformable kernel-region frame interpolation")]
struct Cli {
    /// Worker threads; 0 uses one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Warp both reference frames towards the middle and blend them.
    Interpolate(InterpolateArgs),
    /// Compare analytic warp gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Optimize kernels, offsets and occlusion for one frame triple.
    Overfit(OverfitArgs),
    /// Write synthetic flows, maps or a frame triple.
    Synth(SynthArgs),
    /// Print PSNR and SSIM between two images.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct InterpolateArgs {
    /// Previous frame (image, or tensor with a .dkw extension).
    #[arg(long)]
    prev: PathBuf,
    /// Next frame.
    #[arg(long)]
    next: PathBuf,
    /// Flow from the middle frame to the next one; with --project-flows,
    /// flow from the previous frame to the next one.
    #[arg(long)]
    flow_fwd: PathBuf,
    /// Flow from the middle frame to the previous one; with --project-flows,
    /// flow from the next frame to the previous one.
    #[arg(long)]
    flow_bwd: PathBuf,
    /// Derive the middle-frame flows from the inter-frame flows.
    #[arg(long)]
    project_flows: bool,
    /// Kernel coefficients for the previous frame (16 channels); identity if omitted.
    #[arg(long)]
    kernels_prev: Option<PathBuf>,
    #[arg(long)]
    kernels_next: Option<PathBuf>,
    /// Offsets for the previous frame (32 channels, x then y); zero if omitted.
    #[arg(long)]
    offsets_prev: Option<PathBuf>,
    #[arg(long)]
    offsets_next: Option<PathBuf>,
    /// Visibility of the previous frame (1 channel, values in [0, 1]).
    #[arg(long)]
    occlusion: Option<PathBuf>,
    /// Occlusion value used when --occlusion is omitted.
    #[arg(long, default_value_t = 0.5)]
    occlusion_value: f64,
    /// Ground truth; prints PSNR and SSIM of the result against it.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Side of the kernel region.
    #[arg(long, default_value_t = 4)]
    kernel_size: usize,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Output image (.png, otherwise PPM) or tensor (.dkw).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Minimum distance of the evaluation point from any kink.
    #[arg(long, default_value_t = 1e-2)]
    exclusion: f64,
    /// Side of the random test frames.
    #[arg(long, default_value_t = 8)]
    size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MotionKind {
    Translation,
    Rotation,
}

#[derive(Debug, Args)]
struct MotionArgs {
    #[arg(long, value_enum, default_value_t = MotionKind::Translation)]
    motion: MotionKind,
    #[arg(long, default_value_t = 3.7, allow_negative_numbers = true)]
    dx: f64,
    #[arg(long, default_value_t = -2.2, allow_negative_numbers = true)]
    dy: f64,
    /// Rotation angle in degrees.
    #[arg(long, default_value_t = 6.0, allow_negative_numbers = true)]
    angle: f64,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Debug, Args)]
struct OverfitArgs {
    #[command(flatten)]
    motion: MotionArgs,
    /// Previous frame of a file triple; requires --gt, --next, --flow-fwd
    /// and --flow-bwd and replaces the synthetic triple.
    #[arg(long, requires_all = ["gt", "next", "flow_fwd", "flow_bwd"])]
    prev: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    next: Option<PathBuf>,
    /// Flow from the middle frame to the next one.
    #[arg(long)]
    flow_fwd: Option<PathBuf>,
    /// Flow from the middle frame to the previous one.
    #[arg(long)]
    flow_bwd: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Initial gradient-descent step.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Take every step, even when the loss rises.
    #[arg(long)]
    no_backtracking: bool,
    /// Control run with all gradients zeroed.
    #[arg(long)]
    zero_gradients: bool,
    /// Loss trace, one `iteration<TAB>loss<TAB>psnr` line per iteration.
    #[arg(long)]
    trace: PathBuf,
    /// Final interpolated frame.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthKind {
    /// Two-channel flow tensor.
    Flow,
    /// One-hot kernels at the region origin.
    Kernels,
    /// Zero offsets.
    Offsets,
    /// Constant occlusion map.
    Occlusion,
    /// prev/gt/next frames and the middle-frame flows, written into --out.
    Triple,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(value_enum)]
    kind: SynthKind,
    #[command(flatten)]
    motion: MotionArgs,
    /// Overrides --size for the height.
    #[arg(long)]
    height: Option<usize>,
    /// Overrides --size for the width.
    #[arg(long)]
    width: Option<usize>,
    /// Occlusion value.
    #[arg(long, default_value_t = 0.5)]
    value: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, or directory for `triple`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return ExitCode::from(1);
        }
    };
    let verbose = cli.verbose;
    let result = pool.install(|| match cli.command {
        Command::Interpolate(a) => commands::interpolate(a, verbose),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Overfit(a) => commands::overfit(a, verbose),
        Command::Synth(a) => commands::synth(a),
        Command::Metrics(a) => commands::metrics(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
