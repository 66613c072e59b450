//! The alternating actor-critic training loop, schedulers, metric records
//! and evaluation against analytic solutions.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{validate_beta, CriticNet, InitSpec, ShallowNet, DEFAULT_BETA};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pde::{
    actor_gradient_step, applied_action, critic_gradient_step, ntk_rate, Policy, StepEstimate, TruncationFamily,
    TruncationMode, ValueModel,
};
use crate::problems::ProblemSpec;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Seed offsets of the independent random streams derived from `seed`.
const CRITIC_INIT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
pub const EVAL_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Constant,
    /// base / (1 + n) in the cycle count n.
    InverseCycle,
}

impl Scheduler {
    pub fn factor(&self, cycle: usize) -> f64 {
        match self {
            Scheduler::Constant => 1.0,
            Scheduler::InverseCycle => 1.0 / (1.0 + cycle as f64),
        }
    }
}

/// Flat training configuration. Every field has a default, so partial JSON
/// files are accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub width_actor: usize,
    pub width_critic: usize,
    pub beta: f64,
    pub critic_steps_per_cycle: usize,
    pub actor_steps_per_cycle: usize,
    pub m_critic: usize,
    pub m_actor: usize,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub base_lr_actor: f64,
    pub base_lr_critic: f64,
    pub scheduler: Scheduler,
    pub total_cycles: usize,
    pub truncation: TruncationMode,
    /// δ of the truncation family; (1 − β)/5 when absent.
    pub truncation_delta: Option<f64>,
    pub loss_floor: Option<f64>,
    pub include_ntk_rate_factor: bool,
    pub seed: u64,
    /// Size of the fixed evaluation sample used for the per-phase metrics.
    pub eval_points: usize,
    /// When false, elapsed time is logged as 0 so that outputs are replayable byte for byte.
    pub record_elapsed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width_actor: 512,
            width_critic: 512,
            beta: DEFAULT_BETA,
            critic_steps_per_cycle: 100,
            actor_steps_per_cycle: 200,
            m_critic: 1024,
            m_actor: 1024,
            optimizer: OptimizerName::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            base_lr_actor: 1e-3,
            base_lr_critic: 1e-3,
            scheduler: Scheduler::Constant,
            total_cycles: 30,
            truncation: TruncationMode::Identity,
            truncation_delta: None,
            loss_floor: None,
            include_ntk_rate_factor: false,
            seed: 0,
            eval_points: 4096,
            record_elapsed: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_beta(self.beta)?;
        if self.width_actor == 0 || self.width_critic == 0 {
            return Err(Error::config("widths must be positive"));
        }
        if self.m_critic == 0 || self.m_actor == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        for (name, lr) in [("base_lr_actor", self.base_lr_actor), ("base_lr_critic", self.base_lr_critic)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be a finite non-negative number")));
            }
        }
        if self.loss_floor.is_some_and(f64::is_nan) {
            return Err(Error::config("loss_floor must not be NaN"));
        }
        self.truncation_family(self.width_actor).validate(self.beta)?;
        Ok(())
    }

    pub fn truncation_family(&self, width: usize) -> TruncationFamily {
        match self.truncation {
            TruncationMode::Smooth => TruncationFamily::smooth(
                width,
                self.truncation_delta.unwrap_or(TruncationFamily::default_delta(self.beta)),
            ),
            TruncationMode::Identity => TruncationFamily::identity(width),
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn actor_init(&self) -> InitSpec {
        InitSpec::with_seed(self.seed)
    }

    pub fn critic_init(&self) -> InitSpec {
        InitSpec::with_seed(self.seed ^ CRITIC_INIT_STREAM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Critic,
    Actor,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Critic => "critic",
            Phase::Actor => "actor",
        }
    }
}

/// MSE and RE of critic and actor against (V, u*).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse_c: f64,
    pub re_c: f64,
    pub mse_a: f64,
    pub re_a: f64,
}

/// One row of the training log, written after each phase of each cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub cycle: usize,
    /// Total optimizer steps taken so far.
    pub step: usize,
    pub phase: Phase,
    /// Mean over the phase of the batch mean of (L^U Q)².
    pub critic_loss: f64,
    /// Mean over the phase of the batch mean of H(U, Q).
    pub actor_loss: f64,
    pub eval: Option<Evaluation>,
    pub elapsed_s: f64,
}

pub const CSV_HEADER: &str = "cycle,step,phase,critic_loss,actor_loss,mse_c,re_c,mse_a,re_a,elapsed_s";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.cycle,
            self.step,
            self.phase.as_str(),
            self.critic_loss,
            self.actor_loss,
            na(self.eval.map(|e| e.mse_c)),
            na(self.eval.map(|e| e.re_c)),
            na(self.eval.map(|e| e.mse_a)),
            na(self.eval.map(|e| e.re_a)),
            self.elapsed_s
        )
    }
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()>;

    /// Called after the actor phase of each cycle with the current networks.
    fn on_cycle_end(&mut self, _cycle: usize, _actor: &ShallowNet, _critic: &CriticNet) -> Result<()> {
        Ok(())
    }
}

/// Keeps records in memory only.
#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records as CSV rows.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(CsvSink { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Training stopped; the returned networks are the last finite ones.
    Diverged { cycle: usize, step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub actor: ShallowNet,
    pub critic: CriticNet,
    pub records: Vec<MetricsRecord>,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }

    /// Mean of the actor-phase evaluations over the last `frac` of cycles.
    pub fn final_window(&self, frac: f64) -> Option<Evaluation> {
        let evals: Vec<Evaluation> = self
            .records
            .iter()
            .filter(|r| r.phase == Phase::Actor)
            .filter_map(|r| r.eval)
            .collect();
        if evals.is_empty() {
            return None;
        }
        let n = ((evals.len() as f64 * frac).ceil() as usize).clamp(1, evals.len());
        let tail = &evals[evals.len() - n..];
        let m = tail.len() as f64;
        Some(Evaluation {
            mse_c: tail.iter().map(|e| e.mse_c).sum::<f64>() / m,
            re_c: tail.iter().map(|e| e.re_c).sum::<f64>() / m,
            mse_a: tail.iter().map(|e| e.mse_a).sum::<f64>() / m,
            re_a: tail.iter().map(|e| e.re_a).sum::<f64>() / m,
        })
    }
}

/// Fresh networks for `problem` as configured.
pub fn init_networks(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<(ShallowNet, CriticNet)> {
    let d = problem.dim();
    let actor = ShallowNet::init(cfg.width_actor, d, problem.action_dim, cfg.beta, cfg.actor_init())?;
    let z = ShallowNet::init(cfg.width_critic, d, 1, cfg.beta, cfg.critic_init())?;
    let critic = CriticNet::new(z, Arc::new(problem.domain), problem.boundary.clone())?;
    Ok((actor, critic))
}

pub fn train(problem: &ProblemSpec, cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
    let (actor, critic) = init_networks(problem, cfg)?;
    train_from(problem, cfg, actor, critic, sink)
}

fn step_failure(est: &Result<StepEstimate>) -> Option<String> {
    match est {
        Err(e) => Some(e.to_string()),
        Ok(s) => {
            let bad = |v: f64| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD;
            if bad(s.critic_loss) || bad(s.actor_loss) {
                Some(format!("loss out of range (critic {}, actor {})", s.critic_loss, s.actor_loss))
            } else if s.delta.iter().any(|v| !v.is_finite()) {
                Some("non-finite gradient".into())
            } else {
                None
            }
        }
    }
}

/// Runs the training loop from the given networks.
pub fn train_from(
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    mut actor: ShallowNet,
    mut critic: CriticNet,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if actor.input_dim() != problem.dim() || actor.output_dim() != problem.action_dim {
        return Err(Error::Dimension("actor shape does not match the problem".into()));
    }
    if critic.z.input_dim() != problem.dim() {
        return Err(Error::Dimension("critic shape does not match the problem".into()));
    }
    let start = Instant::now();
    let fam_critic = cfg.truncation_family(critic.z.width());
    let fam_actor = cfg.truncation_family(actor.width());
    let kind = cfg.optimizer_kind();
    let mut opt_critic: Optimizer = kind.build(critic.z.num_params());
    let mut opt_actor: Optimizer = kind.build(actor.num_params());
    let (rate_c, rate_a) = if cfg.include_ntk_rate_factor {
        (ntk_rate(critic.z.width(), cfg.beta), ntk_rate(actor.width(), cfg.beta))
    } else {
        (1.0, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_set = if problem.analytic.is_some() && cfg.eval_points > 0 {
        let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
        Some(problem.domain.sample_interior(cfg.eval_points, &mut erng))
    } else {
        None
    };
    let mut records = Vec::new();
    let mut step = 0usize;
    for cycle in 0..cfg.total_cycles {
        let sched = cfg.scheduler.factor(cycle);
        for phase in [Phase::Critic, Phase::Actor] {
            let (n_steps, m) = match phase {
                Phase::Critic => (cfg.critic_steps_per_cycle, cfg.m_critic),
                Phase::Actor => (cfg.actor_steps_per_cycle, cfg.m_actor),
            };
            let (mut sum_c, mut sum_a) = (0.0, 0.0);
            for _ in 0..n_steps {
                let batch = problem.domain.sample_interior(m, &mut rng);
                let est = match phase {
                    Phase::Critic => critic_gradient_step(problem, &critic, &actor, &fam_critic, &batch, rate_c),
                    Phase::Actor => {
                        actor_gradient_step(problem, &critic, &actor, &fam_actor, &batch, cfg.loss_floor, rate_a)
                    }
                };
                if let Some(reason) = step_failure(&est) {
                    return Ok(TrainOutcome {
                        actor,
                        critic,
                        records,
                        status: TrainStatus::Diverged { cycle, step, reason },
                    });
                }
                let est = est?;
                sum_c += est.critic_loss;
                sum_a += est.actor_loss;
                let ok = match phase {
                    Phase::Critic => {
                        let before = critic.z.params().to_vec();
                        opt_critic.apply(critic.z.params_mut(), &est.delta, cfg.base_lr_critic * sched);
                        let ok = critic.z.is_finite();
                        if !ok {
                            critic.z.params_mut().copy_from_slice(&before);
                        }
                        ok
                    }
                    Phase::Actor => {
                        let before = actor.params().to_vec();
                        opt_actor.apply(actor.params_mut(), &est.delta, cfg.base_lr_actor * sched);
                        let ok = actor.is_finite();
                        if !ok {
                            actor.params_mut().copy_from_slice(&before);
                        }
                        ok
                    }
                };
                if !ok {
                    return Ok(TrainOutcome {
                        actor,
                        critic,
                        records,
                        status: TrainStatus::Diverged {
                            cycle,
                            step,
                            reason: "non-finite parameters".into(),
                        },
                    });
                }
                step += 1;
            }
            let denom = n_steps.max(1) as f64;
            let eval = match &eval_set {
                Some(pts) => Some(evaluate_on(problem, &actor, &critic, pts)?),
                None => None,
            };
            let rec = MetricsRecord {
                cycle,
                step,
                phase,
                critic_loss: sum_c / denom,
                actor_loss: sum_a / denom,
                eval,
                elapsed_s: if cfg.record_elapsed { start.elapsed().as_secs_f64() } else { 0.0 },
            };
            sink.record(&rec)?;
            records.push(rec);
        }
        sink.on_cycle_end(cycle, &actor, &critic)?;
    }
    Ok(TrainOutcome {
        actor,
        critic,
        records,
        status: TrainStatus::Completed,
    })
}

/// MSE_K and RE_K on `k` fresh μ-samples.
pub fn evaluate<R: rand::Rng + ?Sized>(
    problem: &ProblemSpec,
    actor: &dyn Policy,
    critic: &dyn ValueModel,
    k: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    if k == 0 {
        return Err(Error::config("evaluation needs at least one point"));
    }
    let pts = problem.domain.sample_interior(k, rng);
    evaluate_on(problem, actor, critic, &pts)
}

/// MSE = (1/K)Σ(Q − V)², RE = Σ(Q − V)² / ΣV², and the same for the actor with
/// Euclidean norms. The actor is evaluated after the action clamp.
pub fn evaluate_on(
    problem: &ProblemSpec,
    actor: &dyn Policy,
    critic: &dyn ValueModel,
    pts: &[Vec<f64>],
) -> Result<Evaluation> {
    let sol = problem.solution()?;
    let k = problem.action_dim;
    // [Σ(Q−V)², ΣV², Σ|U−u*|², Σ|u*|²] per chunk, reduced in order.
    let parts: Vec<[f64; 4]> = pts
        .par_chunks(256)
        .map(|chunk| {
            let mut acc = [0.0; 4];
            for x in chunk {
                let v = sol.value.value(x);
                let q = critic.jet_at(x).value();
                acc[0] += (q - v) * (q - v);
                acc[1] += v * v;
                let (a, _) = applied_action(problem, actor, x);
                let u = sol.control_at(x, k);
                for (ai, ui) in a.iter().zip(&u) {
                    acc[2] += (ai - ui) * (ai - ui);
                    acc[3] += ui * ui;
                }
            }
            acc
        })
        .collect();
    let mut s = [0.0; 4];
    for p in parts {
        for i in 0..4 {
            s[i] += p[i];
        }
    }
    let n = pts.len() as f64;
    Ok(Evaluation {
        mse_c: s[0] / n,
        re_c: s[0] / s[1],
        mse_a: s[2] / n,
        re_a: s[2] / s[3],
    })
}
