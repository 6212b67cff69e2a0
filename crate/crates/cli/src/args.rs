use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curveband_core::designs::DesignKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "curveband", version, about = "Survey sampling of curves: designs, estimators and confidence bands")]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "CURVEBAND_THREADS")]
    pub threads: Option<usize>,

    /// TOML file of default flag values; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic curve population.
    GenPop(GenPopArgs),
    /// Draw one sample from a population.
    Sample(SampleArgs),
    /// Horvitz-Thompson mean curve and Hajek covariance from a sample.
    Estimate(EstimateArgs),
    /// Simultaneous confidence band for the mean curve.
    Bands(BandsArgs),
    /// Replicated-sampling study of the covariance estimator and band coverage.
    McStudy(McStudyArgs),
    /// Compare a sampler and its design against exact enumeration.
    OracleCheck(OracleArgs),
    /// Exact convergence-rate study on enumerable designs.
    RateStudy(RateArgs),
    /// Re-run a command from its manifest and compare output digests.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenPop(_) => "gen-pop",
            Command::Sample(_) => "sample",
            Command::Estimate(_) => "estimate",
            Command::Bands(_) => "bands",
            Command::McStudy(_) => "mc-study",
            Command::OracleCheck(_) => "oracle-check",
            Command::RateStudy(_) => "rate-study",
            Command::Replay(_) => "replay",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::GenPop(a) => Some(a.seed),
            Command::Sample(a) => Some(a.seed),
            Command::Bands(a) => Some(a.seed),
            Command::McStudy(a) => Some(a.seed),
            Command::OracleCheck(a) => Some(a.seed),
            Command::Estimate(_) | Command::RateStudy(_) | Command::Replay(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenPopArgs {
    #[arg(long)]
    pub units: usize,
    #[arg(long)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Curves exactly proportional to the auxiliary variable.
    #[arg(long)]
    pub proportional: bool,
    #[arg(long)]
    pub size_sigma: Option<f64>,
    #[arg(long)]
    pub idio_scale: Option<f64>,
    #[arg(long)]
    pub x_noise: Option<f64>,
    /// Small units given a sharp consumption peak.
    #[arg(long)]
    pub influential_units: Option<usize>,
    #[arg(long)]
    pub influential_peak: Option<f64>,
    /// JSON summary of the population (mean curve, regularity, planted units).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub design: DesignKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub pop: PathBuf,
    /// Auxiliary values below this threshold are raised to it.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// One-column CSV of selected ids.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of `id,pi` for every unit.
    #[arg(long)]
    pub pi_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimatorFlags {
    /// Rescale the covariance estimate by d / d_hat.
    #[arg(long)]
    pub star: bool,
    /// Multiply the covariance estimate by n / (n - 1).
    #[arg(long)]
    pub berger_correction: bool,
    /// Evaluate sampled curves through their linear interpolant.
    #[arg(long)]
    pub discretized: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub pi: PathBuf,
    /// One-column CSV of grid points overriding the population file.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out_mean: PathBuf,
    #[arg(long)]
    pub out_cov: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BandsArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub sample: PathBuf,
    #[arg(long)]
    pub pi: PathBuf,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 3000)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub eigen_floor: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub sigma_floor: f64,
    /// CSV with columns t, mean, sigma_hat, lower, upper; c_alpha goes to a
    /// JSON file with the same stem.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct McStudyArgs {
    #[arg(long)]
    pub pop: PathBuf,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value = "rejective")]
    pub design: DesignKind,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 10_000)]
    pub reps_gamma: usize,
    #[arg(long, default_value_t = 10_000)]
    pub reps_risk: usize,
    /// Outer replicates for band coverage; 0 skips the coverage study.
    #[arg(long, default_value_t = 0)]
    pub reps_coverage: usize,
    #[arg(long, default_value_t = 3000)]
    pub band_reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Layout of the summary table.
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub design: DesignKind,
    #[arg(long = "N")]
    #[serde(rename = "N")]
    pub big_n: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated auxiliary values, recycled over the units
    /// (default 1, 2, ..., N).
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000.0)]
    pub max_support: f64,
    /// Sampler draws compared with the enumerated distribution.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantityArg {
    A5,
    HajekPiklError,
    VarEstimatorMse,
    All,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RateArgs {
    #[arg(long, default_value = "rejective")]
    pub design: DesignKind,
    #[arg(long, value_enum, default_value = "all")]
    pub quantity: QuantityArg,
    /// Comma-separated population sizes; the sample size is half of each.
    #[arg(long, value_delimiter = ',', default_value = "8,12,16")]
    pub sizes: Vec<usize>,
    /// Comma-separated auxiliary pattern recycled over the units.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub pattern: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000.0)]
    pub max_support: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long = "from")]
    pub from: PathBuf,
}
