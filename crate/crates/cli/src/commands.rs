use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hjbac::fit::{fit_actor, fit_critic};
use hjbac::mc::{agreement_report, write_histogram_csv, McConfig};
use hjbac::nn::{Checkpoint, CriticNet, ShallowNet};
use hjbac::problems::{preset, Preset, ProblemSpec};
use hjbac::trainer::{self, init_networks, CsvSink, TrainConfig, TrainStatus};
use hjbac::Error;

use crate::args::{FitArgs, ReplayArgs, TrainArgs, VerifyArgs};
use crate::manifest::RunManifest;
use crate::{study, Exit};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ACTOR_FILE: &str = "actor.json";
pub const CRITIC_FILE: &str = "critic.json";

fn catalog() -> String {
    let mut s = String::from("available problems:\n");
    for p in Preset::ALL {
        s.push_str(&format!("  {:<20} {}\n", p.name(), p.description()));
    }
    s
}

pub fn list_problems() -> Result<Exit> {
    print!("{}", catalog());
    Ok(Exit::Ok)
}

/// Looks up a preset, listing the catalog when the name is unknown.
pub fn load_problem(name: &str, dim: Option<usize>) -> Result<ProblemSpec> {
    let which: Preset = match name.parse() {
        Ok(p) => p,
        Err(e) => {
            eprint!("{}", catalog());
            return Err(e.into());
        }
    };
    Ok(preset(which, dim)?)
}

pub fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn csv_writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn save_checkpoint(ck: &Checkpoint, dir: &Path, name: &str) -> Result<()> {
    ck.save(&dir.join(name)).with_context(|| format!("writing {name}"))
}

/// Default config, then the config file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(w) = a.width {
        cfg.width_actor = w;
        cfg.width_critic = w;
    }
    if let Some(w) = a.width_critic {
        cfg.width_critic = w;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.cycles {
        cfg.total_cycles = v;
    }
    if let Some(v) = a.critic_steps {
        cfg.critic_steps_per_cycle = v;
    }
    if let Some(v) = a.actor_steps {
        cfg.actor_steps_per_cycle = v;
    }
    if let Some(v) = a.batch {
        cfg.m_critic = v;
        cfg.m_actor = v;
    }
    if let Some(v) = a.lr_actor {
        cfg.base_lr_actor = v;
    }
    if let Some(v) = a.lr_critic {
        cfg.base_lr_critic = v;
    }
    if let Some(v) = a.optimizer {
        cfg.optimizer = v.into();
    }
    if let Some(v) = a.scheduler {
        cfg.scheduler = v.into();
    }
    if let Some(v) = a.loss_floor {
        cfg.loss_floor = Some(v);
    }
    if let Some(v) = a.truncation {
        cfg.truncation = v.into();
    }
    if let Some(v) = a.truncation_delta {
        cfg.truncation_delta = Some(v);
    }
    if a.rate_factor {
        cfg.include_ntk_rate_factor = true;
    }
    if let Some(v) = a.eval_points {
        cfg.eval_points = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.no_timing {
        cfg.record_elapsed = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, threads: Option<usize>) -> Result<Exit> {
    let problem = load_problem(&a.problem, a.dim)?;
    let cfg = resolve_train_config(a)?;
    run_train(a, &problem, &cfg, threads)
}

fn run_train(a: &TrainArgs, problem: &ProblemSpec, cfg: &TrainConfig, threads: Option<usize>) -> Result<Exit> {
    let timing = cfg.record_elapsed;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("train", cfg.seed, threads, &a.out, serde_json::to_value(a)?, timing);
    manifest.config = Some(serde_json::to_value(cfg)?);

    let mut sink = CsvSink::new(csv_writer(&a.out, METRICS_FILE)?)?;
    let outcome = trainer::train(problem, cfg, &mut sink)?;
    sink.into_inner().flush()?;
    save_checkpoint(&outcome.actor.to_checkpoint(), &a.out, ACTOR_FILE)?;
    save_checkpoint(&outcome.critic.z.to_checkpoint(), &a.out, CRITIC_FILE)?;
    manifest.outputs = vec![METRICS_FILE.into(), ACTOR_FILE.into(), CRITIC_FILE.into()];

    let exit = match &outcome.status {
        TrainStatus::Completed => {
            manifest.finish("completed", timing);
            match outcome.final_window(0.1) {
                Some(e) => println!(
                    "completed {} cycles: mse_c {:.3e} re_c {:.3e} mse_a {:.3e} re_a {:.3e}",
                    cfg.total_cycles, e.mse_c, e.re_c, e.mse_a, e.re_a
                ),
                None => println!("completed {} cycles", cfg.total_cycles),
            }
            Exit::Ok
        }
        TrainStatus::Diverged { cycle, step, reason } => {
            manifest.finish("diverged", timing);
            eprintln!("diverged at cycle {cycle}, step {step}: {reason}");
            Exit::Diverged
        }
    };
    manifest.write(&a.out)?;
    Ok(exit)
}

pub fn fit(a: &FitArgs, threads: Option<usize>) -> Result<Exit> {
    let problem = load_problem(&a.problem, a.dim)?;
    let cfg = TrainConfig {
        width_actor: a.width,
        width_critic: a.width,
        beta: a.beta,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if a.points == 0 {
        bail!("--points must be positive");
    }
    let (mut actor, mut critic) = init_networks(&problem, &cfg)?;
    let pts = problem.domain.sample_interior(a.points, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let rc = fit_critic(&problem, &mut critic, &pts)?;
    let ra = fit_actor(&problem, &mut actor, &pts)?;

    create_out(&a.out)?;
    let mut manifest = RunManifest::new("fit", a.seed, threads, &a.out, serde_json::to_value(a)?, true);
    save_checkpoint(&actor.to_checkpoint(), &a.out, ACTOR_FILE)?;
    save_checkpoint(&critic.z.to_checkpoint(), &a.out, CRITIC_FILE)?;
    manifest.outputs = vec![ACTOR_FILE.into(), CRITIC_FILE.into()];
    manifest.finish("completed", true);
    manifest.write(&a.out)?;
    println!("fit residual rms: critic {rc:.3e}, actor {ra:.3e}");
    Ok(Exit::Ok)
}

fn load_net(path: &Path) -> Result<ShallowNet> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(ShallowNet::from_checkpoint(&ck)?)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6e}"))
}

pub const AGREEMENT_FILE: &str = "agreement.csv";
pub const HIST_FILES: [&str; 3] = ["hist_true_mc.csv", "hist_true_critic.csv", "hist_critic_mc.csv"];

pub fn verify_mc(a: &VerifyArgs, threads: Option<usize>) -> Result<Exit> {
    let problem = load_problem(&a.problem, a.dim)?;
    let actor = load_net(&a.actor_ckpt)?;
    let z = load_net(&a.critic_ckpt)?;
    let d = problem.dim();
    if actor.input_dim() != d || actor.output_dim() != problem.action_dim {
        return Err(Error::Dimension(format!(
            "actor checkpoint maps R^{} to R^{}, problem {} needs R^{d} to R^{}",
            actor.input_dim(),
            actor.output_dim(),
            problem.name,
            problem.action_dim
        ))
        .into());
    }
    if z.input_dim() != d || z.output_dim() != 1 {
        return Err(Error::Dimension(format!(
            "critic checkpoint maps R^{} to R^{}, problem {} needs R^{d} to R",
            z.input_dim(),
            z.output_dim(),
            problem.name
        ))
        .into());
    }
    let critic = CriticNet::new(z, Arc::new(problem.domain), problem.boundary.clone())?;
    let mc = McConfig {
        dt: a.dt,
        paths_per_point: a.paths,
        eval_points: a.points,
        max_time: a.max_time,
        seed: a.seed,
    };
    let report = agreement_report(&problem, &actor, &critic, &mc)?;

    create_out(&a.out)?;
    let mut manifest = RunManifest::new("verify-mc", a.seed, threads, &a.out, serde_json::to_value(a)?, true);
    manifest.config = Some(serde_json::to_value(mc)?);
    let mut w = csv_writer(&a.out, AGREEMENT_FILE)?;
    report.write_points_csv(&mut w)?;
    w.flush()?;
    for (name, bins) in HIST_FILES.iter().zip([&report.hist_true_mc, &report.hist_true_critic, &report.hist_critic_mc]) {
        let mut w = csv_writer(&a.out, name)?;
        write_histogram_csv(bins, &mut w)?;
        w.flush()?;
    }
    manifest.outputs = std::iter::once(AGREEMENT_FILE).chain(HIST_FILES).map(String::from).collect();
    manifest.finish("completed", true);
    manifest.write(&a.out)?;

    println!("E1 = {}", fmt_opt(report.e1));
    println!("E2 = {}", fmt_opt(report.e2));
    println!("E3 = {}", fmt_opt(Some(report.e3)));
    Ok(Exit::Ok)
}

pub fn replay(a: &ReplayArgs, threads: Option<usize>) -> Result<Exit> {
    let m = RunManifest::read(&a.manifest)?;
    match m.command.as_str() {
        "train" => {
            let mut args: TrainArgs = serde_json::from_value(m.args)?;
            args.out = a.out.clone();
            let cfg: TrainConfig = match m.config {
                Some(c) => serde_json::from_value(c)?,
                None => bail!("train manifest has no resolved config"),
            };
            args.config = None;
            let problem = load_problem(&args.problem, args.dim)?;
            run_train(&args, &problem, &cfg, threads)
        }
        "fit" => {
            let mut args: FitArgs = serde_json::from_value(m.args)?;
            args.out = a.out.clone();
            fit(&args, threads)
        }
        "verify-mc" => {
            let mut args: VerifyArgs = serde_json::from_value(m.args)?;
            args.out = a.out.clone();
            verify_mc(&args, threads)
        }
        name if name.starts_with("study ") => {
            let mut s: crate::args::Study = serde_json::from_value(m.args)?;
            s.set_out(a.out.clone());
            study::run(&s, threads)
        }
        other => bail!("cannot replay command `{other}`"),
    }
}
