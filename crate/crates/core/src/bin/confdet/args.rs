use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use confdet::calibration::CalibrationScope;
use confdet::pipeline::Regime;
use confdet::regression::Scaling;

#[derive(Debug, Parser)]
#[command(name = "confdet", version, about = "Conformal boxes and class sets for object detectors")]
pub struct Cli {
    /// Worker threads for concurrent runs (1 = sequential).
    #[arg(long, global = true, env = "CONFDET_WORKERS")]
    pub workers: Option<usize>,

    /// Log progress and warnings (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded calibration/evaluation splits on a prediction file.
    Run(RunArgs),
    /// Generate a synthetic dataset and run on it.
    Simulate(SimulateArgs),
    /// Paired t-tests between two report JSONs produced with the same seed.
    Compare(CompareArgs),
    /// Fit isotonic sigma calibration maps and save them as JSON.
    CalibrateSigma(CalibrateArgs),
    /// Recovery rate against IoU threshold per method and alpha (CSV).
    Recovery(RecoveryArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScalingArg {
    Unscaled,
    Scaled,
}

impl From<ScalingArg> for Scaling {
    fn from(v: ScalingArg) -> Self {
        match v {
            ScalingArg::Unscaled => Scaling::Unscaled,
            ScalingArg::Scaled => Scaling::Scaled,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Raw,
    Global,
    PerClass,
}

impl From<ScopeArg> for CalibrationScope {
    fn from(v: ScopeArg) -> Self {
        match v {
            ScopeArg::Raw => CalibrationScope::Raw,
            ScopeArg::Global => CalibrationScope::GlobalRelative,
            ScopeArg::PerClass => CalibrationScope::PerCoordinatePerClassRelative,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    ClassAgnostic,
    ClassWise,
    TwoStep,
    NaiveWorstCase,
}

impl From<RegimeArg> for Regime {
    fn from(v: RegimeArg) -> Self {
        match v {
            RegimeArg::ClassAgnostic => Regime::ClassAgnostic,
            RegimeArg::ClassWise => Regime::ClassWise,
            RegimeArg::TwoStep => Regime::TwoStep,
            RegimeArg::NaiveWorstCase => Regime::NaiveWorstCase,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Unscaled,
    Scaled,
    RelIr,
    RelIrPcoPc,
}

/// Options shared by every command that runs the experiment pipeline.
#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Miscoverage per box corner (box-level nominal coverage is 1 - 4a).
    #[arg(long, default_value_t = 0.025)]
    pub alpha_corner: f64,
    /// Miscoverage of the class prediction sets.
    #[arg(long, default_value_t = 0.01)]
    pub alpha_class: f64,
    #[arg(long, value_enum, default_value = "unscaled")]
    pub scaling: ScalingArg,
    /// Sigma calibration applied before scaled scoring.
    #[arg(long, value_enum, default_value = "raw")]
    pub scope: ScopeArg,
    /// Fit one global map per corner instead of pooling the corners.
    #[arg(long)]
    pub per_corner: bool,
    /// Fit the sigma calibrator on this share of the calibration split only.
    #[arg(long)]
    pub calib_fit_frac: Option<f64>,
    #[arg(long, value_enum, default_value = "class-agnostic")]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub calib_frac: f64,
    /// Classes with fewer calibration records are flagged.
    #[arg(long, default_value_t = 20)]
    pub min_per_class: usize,
    /// Stratify the split by class (always on for class-wise regimes).
    #[arg(long)]
    pub stratified: bool,
    #[arg(long, default_value_t = 0.01)]
    pub raps_a: f64,
    #[arg(long, default_value_t = 5)]
    pub raps_b: usize,
    /// Calibrate the class and box heads on disjoint halves (two-step).
    #[arg(long)]
    pub disjoint_heads: bool,
    /// Box used for infinite quantiles, as x0,y0,x1,y1.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub image_bounds: Option<Vec<f64>>,
    /// Abort on the first invalid input record instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Report JSON path (stdout if neither output is given).
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Report CSV path (one row per run plus an aggregate row).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Prediction file (JSONL, one detection per line).
    #[arg(long)]
    pub input: PathBuf,
    /// Separate evaluation file, e.g. from a shifted domain.
    #[arg(long)]
    pub eval_input: Option<PathBuf>,
    /// Master seed for all splits.
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Oracle specification as JSON; replaces the generator flags below.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub records: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Corner noise scale per class (one value applies to all).
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub noise_scales: Vec<f64>,
    /// Per-record scale multiplier spread, in decades.
    #[arg(long, default_value_t = 0.0)]
    pub hetero_decades: f64,
    /// Reported sigma = factor * true scale.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    pub accuracy: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.0)]
    pub corner_correlation: f64,
    /// Evaluation-time noise multiplier; generates a separate evaluation set.
    #[arg(long)]
    pub shift: Option<f64>,
    /// Seed for data generation and splits.
    #[arg(long)]
    pub seed: u64,
    /// Write the generated records here.
    #[arg(long)]
    pub write_data: Option<PathBuf>,
    /// Write the true per-record noise scales here.
    #[arg(long)]
    pub write_truth: Option<PathBuf>,
    /// Write the shifted evaluation records here.
    #[arg(long)]
    pub write_eval: Option<PathBuf>,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report JSON (a).
    pub a: PathBuf,
    /// Report JSON (b); differences are a - b.
    pub b: PathBuf,
    /// Write the table as CSV instead of printing it.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "global")]
    pub scope: ScopeArg,
    #[arg(long)]
    pub per_corner: bool,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecoveryArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub eval_input: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "unscaled,scaled")]
    pub methods: Vec<MethodArg>,
    /// Per-corner miscoverage levels.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub thresholds: Vec<f64>,
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long)]
    pub output: PathBuf,
}
