#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod scene_dir;
mod verify;

/// Scene-adapted GMM priors plugged into ADMM.
#[derive(Parser, Debug)]
#[command(name = "pnp", version, args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice (EM initialization, scene generation, draws).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the inner parallel loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file; keys are long option names of the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a zero-mean GMM on the patches of every band of an image.
    TrainGmm(TrainGmmArgs),
    /// Denoise a single-band image with a trained model.
    Denoise(DenoiseArgs),
    /// Hyperspectral sharpening of a scene directory.
    Sharpen(SharpenArgs),
    /// Deblur from a blurred/noisy image pair.
    DeblurPair(DeblurPairArgs),
    /// Generate a synthetic scene directory.
    GenScene(GenSceneArgs),
    /// PSNR, ERGAS and SAM between two cubes.
    Metrics(MetricsArgs),
    /// Check that the fixed-weight denoiser is a proximity operator.
    VerifyProx(VerifyProxArgs),
    /// Time the parallel kernels with one thread and with all threads.
    Bench(BenchArgs),
    /// Grid search over (tau, rho, lambda) for a synthetic pair scene.
    GridSearch(GridSearchArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Patch means removed before filtering and added back after.
    Practical,
    /// The linear operator W exactly.
    Pure,
}

impl From<Mode> for pnp_core::denoiser::MeanMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Practical => Self::Practical,
            Mode::Pure => Self::PureLinear,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct EmArgs {
    /// Patch side.
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    /// Mixture components.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub em_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub em_tol: f64,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub primal_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub dual_tol: f64,
    /// Denoiser mean handling.
    #[arg(long, value_enum, default_value_t = Mode::Practical)]
    pub mode: Mode,
}

#[derive(Args, Debug)]
pub struct TrainGmmArgs {
    /// PNPCUBE1 or PGM image; all bands are pooled.
    #[arg(long)]
    pub input: PathBuf,
    /// Noise std of the input, in image units.
    #[arg(long)]
    pub sigma: f64,
    #[command(flatten)]
    pub em: EmArgs,
    /// Train on raw patches instead of mean-removed ones (for `denoise --mode pure`).
    #[arg(long)]
    pub keep_means: bool,
    /// Output PNPGMM1 file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// PNPGMM1 model; its weights must cover the image's patches.
    #[arg(long)]
    pub model: PathBuf,
    /// Noise std, in image units.
    #[arg(long)]
    pub sigma: f64,
    /// Recompute the weights from the noisy input (exact MMSE, nonlinear).
    #[arg(long)]
    pub varying: bool,
    #[arg(long, value_enum, default_value_t = Mode::Practical)]
    pub mode: Mode,
    /// Output image (`.pgm` or PNPCUBE1).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SharpenArgs {
    /// Scene directory written by `gen-scene --kind hs` or by hand.
    #[arg(long)]
    pub scene: PathBuf,
    /// Subspace dimension L_s.
    #[arg(long, default_value_t = 4)]
    pub ls: usize,
    /// MS noise std, overriding the scene file.
    #[arg(long)]
    pub sigma_m: Option<f64>,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output cube.
    #[arg(long)]
    pub out: PathBuf,
    /// Residual history CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Metrics CSV against the scene's ground truth, when present.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DeblurPairArgs {
    /// Scene directory written by `gen-scene --kind pair`.
    #[arg(long, required_unless_present_all = ["blurred", "noisy", "psf"])]
    pub scene: Option<PathBuf>,
    #[arg(long, requires_all = ["noisy", "psf", "sigma_n"])]
    pub blurred: Option<PathBuf>,
    #[arg(long)]
    pub noisy: Option<PathBuf>,
    #[arg(long)]
    pub psf: Option<PathBuf>,
    /// Noise std of the noisy image, in image units.
    #[arg(long)]
    pub sigma_n: Option<f64>,
    #[arg(long)]
    pub sigma_b: Option<f64>,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Hs,
    Pair,
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    #[arg(long, value_enum)]
    pub kind: SceneKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 30)]
    pub hs_bands: usize,
    #[arg(long, default_value_t = 4)]
    pub ms_bands: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 4)]
    pub decimation: usize,
    #[arg(long, default_value_t = 50.0)]
    pub snr_h: f64,
    #[arg(long, default_value_t = 50.0)]
    pub snr_m: f64,
    /// Number of trailing HS bands with their own SNR.
    #[arg(long, default_value_t = 0)]
    pub tail_bands: usize,
    #[arg(long, default_value_t = 30.0)]
    pub tail_snr: f64,
    #[arg(long, default_value_t = 5)]
    pub psf_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub psf_sigma: f64,
    /// One of delta, gaussian, box, motion.
    #[arg(long, default_value = "motion")]
    pub kernel: String,
    /// Noisy-image std on the 0-255 scale.
    #[arg(long, default_value_t = 25.0)]
    pub sigma_n: f64,
    /// Blurred-image std on the 0-255 scale.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_b: f64,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    pub reference: PathBuf,
    pub estimate: PathBuf,
    /// PSNR peak; defaults to 255 for 8-bit-scaled data, else the reference maximum.
    #[arg(long)]
    pub peak: Option<f64>,
    /// Resolution ratio used by ERGAS.
    #[arg(long, default_value_t = 1.0)]
    pub ratio: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyProxArgs {
    /// Pixel count of the square test image.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Denoiser noise variance.
    #[arg(long, default_value_t = 0.01)]
    pub sigma2: f64,
    /// Independently trained models to check.
    #[arg(long, default_value_t = 5)]
    pub models: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

#[derive(Args, Debug)]
pub struct GridSearchArgs {
    /// Pair scene directory with ground truth.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    /// CSV of every grid point.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let result = config::parse(std::env::args().collect()).and_then(commands::run);
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::from(2)
        }
    }
}

/// Everything that ends the process with status 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(pnp_core::Error),
}

impl Failure {
    pub fn category(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Core(e) => e.category(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<pnp_core::Error> for Failure {
    fn from(e: pnp_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}
