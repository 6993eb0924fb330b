use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ising-hs", version, about = "Estimate and sample Ising models with a few outlier eigenvalues")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "ISING_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a model file for one of the built-in families.
    GenModel(GenModelArgs),
    /// Estimate log Z.
    Estimate(EstimateArgs),
    /// Draw samples as JSON lines.
    Sample(SampleArgs),
    /// Run the pipeline next to exact enumeration (n ≤ 25).
    OracleCompare(CompareArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    CurieWeiss,
    Hopfield,
    SkFerro,
    Graph,
    Posterior,
    SubsetSum,
}

#[derive(Args, Debug)]
pub struct GenModelArgs {
    #[arg(long, value_enum, required_unless_present = "recipe")]
    pub kind: Option<Kind>,
    /// JSON recipe instead of flags.
    #[arg(long, conflicts_with = "kind")]
    pub recipe: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Hopfield pattern count.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Graph coupling sign: -1 antiferromagnetic, 1 ferromagnetic.
    #[arg(long, allow_negative_numbers = true, default_value_t = -1)]
    pub sign: i8,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Feature dimension of the block model.
    #[arg(long)]
    pub p: Option<usize>,
    /// Subset-sum weights.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub a: Vec<i64>,
    /// Subset-sum target.
    #[arg(long, allow_negative_numbers = true)]
    pub b: Option<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PipelineArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Spectral split parameter; `inf` keeps every negative eigenvalue in the bulk.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "grid-L")]
    pub grid_l: Option<f64>,
    #[arg(long)]
    pub grid_eta: Option<f64>,
    #[arg(long)]
    pub cell_budget: Option<u64>,
    /// Build the grid even past the cell budget.
    #[arg(long)]
    pub force: bool,
    /// Samples per annealing level.
    #[arg(long)]
    pub samples: Option<u64>,
    /// Independent annealing runs per cell (median taken).
    #[arg(long)]
    pub trials: Option<usize>,
    /// Glauber steps per annealing sample.
    #[arg(long)]
    pub glauber_steps: Option<u64>,
    #[arg(long)]
    pub tilt_iterations: Option<u64>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long, default_value_t = 0.2)]
    pub eps: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Target total-variation error.
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, default_value_t = 1000)]
    pub num_samples: usize,
    /// Cell ladders from an earlier `estimate` of the same model.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Tempering steps per trial.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Trials allowed per sample.
    #[arg(long)]
    pub trial_budget: Option<u64>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Estimator accuracy.
    #[arg(long, default_value_t = 0.2)]
    pub eps: f64,
    /// Sampler total-variation target.
    #[arg(long, default_value_t = 0.05)]
    pub tv_eps: f64,
    #[arg(long, default_value_t = 10_000)]
    pub num_samples: usize,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub trial_budget: Option<u64>,
    /// Allowed |Δ log Z|; defaults to `eps`.
    #[arg(long)]
    pub tol_log_z: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub tol_tv: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tol_residual: f64,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}
