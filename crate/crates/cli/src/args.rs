use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hjbac::pde::TruncationMode;
use hjbac::trainer::{OptimizerName, Scheduler};

#[derive(Debug, Parser)]
#[command(name = "hjbac", version, about = "Neural actor-critic solver for stationary HJB equations")]
pub struct Cli {
    /// Worker threads for data-parallel evaluation.
    #[arg(long, global = true, env = "HJBAC_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an actor-critic pair on a problem preset.
    Train(TrainArgs),
    /// Fit network outer layers to a preset's analytic solution.
    Fit(FitArgs),
    /// Compare critic, analytic value and Monte Carlo value of the actor.
    VerifyMc(VerifyArgs),
    /// Wide-network studies.
    Study(StudyCmd),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
    /// List the problem presets.
    Problems,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for OptimizerName {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerName::Sgd,
            OptimizerArg::Adam => OptimizerName::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationArg {
    Smooth,
    Identity,
}

impl From<TruncationArg> for TruncationMode {
    fn from(t: TruncationArg) -> Self {
        match t {
            TruncationArg::Smooth => TruncationMode::Smooth,
            TruncationArg::Identity => TruncationMode::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerArg {
    Constant,
    InverseCycle,
}

impl From<SchedulerArg> for Scheduler {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::Constant => Scheduler::Constant,
            SchedulerArg::InverseCycle => Scheduler::InverseCycle,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub problem: String,
    /// State dimension (lqr and problem1 only).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Flat JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Width of both networks.
    #[arg(long)]
    pub width: Option<usize>,
    /// Critic width, when it should differ from --width.
    #[arg(long)]
    pub width_critic: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    #[arg(long)]
    pub actor_steps: Option<usize>,
    /// Batch size of both phases.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_actor: Option<f64>,
    #[arg(long)]
    pub lr_critic: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    pub scheduler: Option<SchedulerArg>,
    #[arg(long, allow_negative_numbers = true)]
    pub loss_floor: Option<f64>,
    #[arg(long, value_enum)]
    pub truncation: Option<TruncationArg>,
    #[arg(long)]
    pub truncation_delta: Option<f64>,
    /// Multiply both gradients by N^{2β−1}.
    #[arg(long)]
    pub rate_factor: bool,
    #[arg(long)]
    pub eval_points: Option<usize>,
    /// Log elapsed time and timestamps as absent, for byte-identical replays.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    /// Number of μ-samples used for the fit.
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/fit")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub problem: String,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub actor_ckpt: PathBuf,
    #[arg(long)]
    pub critic_ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    #[arg(long, default_value_t = 2000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 200.0)]
    pub max_time: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/verify")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest file or the directory containing it.
    pub manifest: PathBuf,
    /// Output directory of the replay.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyCmd {
    #[command(subcommand)]
    pub study: Study,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "kebab-case")]
pub enum Study {
    /// Variance of the empirical NTK against width.
    NtkVariance(NtkVarianceArgs),
    /// Size of the initial network output against width.
    InitError(InitErrorArgs),
    /// Parameter drift under SGD with the rate factor.
    ParamDrift(ParamDriftArgs),
    /// Grid integration of the limit ODE.
    LimitOde(LimitOdeArgs),
    /// Finite-width training compared with the limit ODE.
    WidthConsistency(WidthConsistencyArgs),
}

fn pow2_widths(lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|k| 1usize << k).collect()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NtkVarianceArgs {
    #[arg(long, value_delimiter = ',', default_values_t = pow2_widths(6, 12))]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = vec![0.3, -0.5])]
    pub x: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = vec![-0.2, 0.4])]
    pub y: Vec<f64>,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/ntk-variance")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InitErrorArgs {
    #[arg(long, value_delimiter = ',', default_values_t = pow2_widths(6, 12))]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// μ-samples on which ‖U_0‖ is measured.
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs/init-error")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ParamDriftArgs {
    #[arg(long, default_value = "problem1")]
    pub problem: String,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = pow2_widths(7, 10))]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 2)]
    pub cycles: usize,
    #[arg(long, default_value_t = 25)]
    pub critic_steps: usize,
    #[arg(long, default_value_t = 50)]
    pub actor_steps: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr_actor: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_critic: f64,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long, value_enum, default_value_t = TruncationArg::Smooth)]
    pub truncation: TruncationArg,
    #[arg(long, default_value = "runs/param-drift")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LimitOdeArgs {
    #[arg(long, default_value = "toy1d")]
    pub problem: String,
    #[arg(long = "T", default_value_t = 50.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Grid intervals per axis.
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    /// Neuron samples for the kernel matrix.
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Snapshot interval in steps (0: first and last only).
    #[arg(long, default_value_t = 1000)]
    pub record_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory caching kernel matrices between runs.
    #[arg(long)]
    pub kernel_cache: Option<PathBuf>,
    #[arg(long, default_value = "runs/limit-ode")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct WidthConsistencyArgs {
    #[arg(long, default_value = "toy1d")]
    pub problem: String,
    #[arg(long, value_delimiter = ',', default_values_t = pow2_widths(6, 12))]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 5.0])]
    pub times: Vec<f64>,
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub omega: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Seed of the kernel samples.
    #[arg(long, default_value_t = 0)]
    pub kernel_seed: u64,
    #[arg(long, default_value = "runs/width-consistency")]
    pub out: PathBuf,
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::NtkVariance(_) => "ntk-variance",
            Study::InitError(_) => "init-error",
            Study::ParamDrift(_) => "param-drift",
            Study::LimitOde(_) => "limit-ode",
            Study::WidthConsistency(_) => "width-consistency",
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            Study::NtkVariance(a) => &a.out,
            Study::InitError(a) => &a.out,
            Study::ParamDrift(a) => &a.out,
            Study::LimitOde(a) => &a.out,
            Study::WidthConsistency(a) => &a.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Study::NtkVariance(a) => a.out = out,
            Study::InitError(a) => a.out = out,
            Study::ParamDrift(a) => a.out = out,
            Study::LimitOde(a) => a.out = out,
            Study::WidthConsistency(a) => a.out = out,
        }
    }
}
