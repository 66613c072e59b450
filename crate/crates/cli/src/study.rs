use std::io::Write;

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hjbac::ntk::{
    init_error_study, inversions, ntk_variance_study, parameter_drift_study, width_consistency_study, LimitOde,
    LimitOdeConfig,
};
use hjbac::trainer::{OptimizerName, TrainConfig};
use hjbac::{Domain, Error, InitSpec};

use crate::args::{InitErrorArgs, LimitOdeArgs, NtkVarianceArgs, ParamDriftArgs, Study, WidthConsistencyArgs};
use crate::commands::{create_out, csv_writer, load_problem};
use crate::manifest::RunManifest;
use crate::Exit;

pub fn run(study: &Study, threads: Option<usize>) -> Result<Exit> {
    let out = study.out().clone();
    create_out(&out)?;
    let command = format!("study {}", study.name());
    let seed = match study {
        Study::NtkVariance(a) => a.seed,
        Study::InitError(a) => a.seed,
        Study::ParamDrift(a) => a.seeds.first().copied().unwrap_or(0),
        Study::LimitOde(a) => a.seed,
        Study::WidthConsistency(a) => a.kernel_seed,
    };
    let mut manifest = RunManifest::new(&command, seed, threads, &out, serde_json::to_value(study)?, true);
    let result = match study {
        Study::NtkVariance(a) => ntk_variance(a),
        Study::InitError(a) => init_error(a),
        Study::ParamDrift(a) => param_drift(a),
        Study::LimitOde(a) => limit_ode(a),
        Study::WidthConsistency(a) => width_consistency(a),
    };
    let (exit, outputs) = match result {
        Ok(files) => (Exit::Ok, files),
        Err(e) if matches!(e.downcast_ref::<Error>(), Some(Error::Unstable { .. })) => {
            eprintln!("error: {e}");
            (Exit::Diverged, Vec::new())
        }
        Err(e) => return Err(e),
    };
    manifest.outputs = outputs.into_iter().map(String::from).collect();
    manifest.finish(if exit == Exit::Ok { "completed" } else { "diverged" }, true);
    manifest.write(&out)?;
    Ok(exit)
}

fn ntk_variance(a: &NtkVarianceArgs) -> Result<Vec<&'static str>> {
    if a.x.len() != a.y.len() {
        bail!("--x and --y must have the same length");
    }
    let s = ntk_variance_study(&a.widths, a.reps, &a.x, &a.y, a.beta, a.seed)?;
    let mut w = csv_writer(&a.out, "ntk_variance.csv")?;
    writeln!(w, "width,mean,variance,slope")?;
    for r in &s.rows {
        writeln!(w, "{},{},{},{}", r.width, r.mean, r.variance, s.slope)?;
    }
    w.flush()?;
    println!("log-log slope of Var[K_N] against N: {:.4}", s.slope);
    Ok(vec!["ntk_variance.csv"])
}

fn init_error(a: &InitErrorArgs) -> Result<Vec<&'static str>> {
    let domain = Domain::ball(1.0, a.dim)?;
    let pts = domain.sample_interior(a.points, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let s = init_error_study(&a.widths, a.reps, &pts, a.beta, a.seed)?;
    let mut w = csv_writer(&a.out, "init_error.csv")?;
    writeln!(w, "width,rms,slope")?;
    for r in &s.rows {
        writeln!(w, "{},{},{}", r.width, r.rms, s.slope)?;
    }
    w.flush()?;
    println!("log-log slope of ||U_0|| against N: {:.4} (reference 1/2 - beta = {:.4})", s.slope, 0.5 - a.beta);
    Ok(vec!["init_error.csv"])
}

fn param_drift(a: &ParamDriftArgs) -> Result<Vec<&'static str>> {
    let problem = load_problem(&a.problem, Some(a.dim))?;
    let base = TrainConfig {
        beta: a.beta,
        total_cycles: a.cycles,
        critic_steps_per_cycle: a.critic_steps,
        actor_steps_per_cycle: a.actor_steps,
        m_critic: a.batch,
        m_actor: a.batch,
        base_lr_actor: a.lr_actor,
        base_lr_critic: a.lr_critic,
        optimizer: OptimizerName::Sgd,
        truncation: a.truncation.into(),
        ..TrainConfig::default()
    };
    let s = parameter_drift_study(&problem, &base, &a.widths, &a.seeds)?;

    let mut w = csv_writer(&a.out, "drift.csv")?;
    writeln!(w, "width,seed,cycle,actor_outer,actor_inner,actor_bias,critic_outer,critic_inner,critic_bias,max")?;
    for r in &s.rows {
        let d = &r.drift;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.width,
            r.seed,
            r.cycle,
            d.actor_outer,
            d.actor_inner,
            d.actor_bias,
            d.critic_outer,
            d.critic_inner,
            d.critic_bias,
            d.max()
        )?;
    }
    w.flush()?;

    let finals: Vec<f64> = s.final_by_width.iter().map(|r| r.1).collect();
    let monotone = inversions(&finals) == 0;
    let mut w = csv_writer(&a.out, "drift_summary.csv")?;
    writeln!(w, "width,final_drift,monotone,slope")?;
    for (n, d) in &s.final_by_width {
        writeln!(w, "{n},{d},{monotone},{}", s.slope)?;
    }
    w.flush()?;
    println!("final drift slope {:.4}, monotone in width: {monotone}", s.slope);
    Ok(vec!["drift.csv", "drift_summary.csv"])
}

fn x_header(dim: usize) -> String {
    (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",")
}

fn join(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn limit_ode(a: &LimitOdeArgs) -> Result<Vec<&'static str>> {
    let problem = load_problem(&a.problem, None)?;
    let init = InitSpec::with_seed(a.seed);
    let ode = LimitOde::with_cache(&problem, a.grid, a.samples, &init, a.kernel_cache.as_deref())?;
    let cfg = LimitOdeConfig {
        intervals: a.grid,
        kernel_samples: a.samples,
        dt: a.dt,
        t_end: a.t_end,
        omega: a.omega,
        alpha: a.alpha,
        record_every: a.record_every,
        init,
    };
    let run = ode.integrate(&cfg)?;
    let grid = &run.grid;
    let v: Option<Vec<f64>> = problem.analytic.as_ref().map(|s| grid.nodes.iter().map(|x| s.value.value(x)).collect());

    let mut w = csv_writer(&a.out, "trajectory.csv")?;
    writeln!(w, "t,node,{},on_boundary,q,u", x_header(grid.dim))?;
    for s in &run.trajectory {
        for (k, x) in grid.nodes.iter().enumerate() {
            writeln!(w, "{},{k},{},{},{},{}", s.t, join(x), grid.on_boundary[k], s.q[k], s.u[k])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&a.out, "residuals.csv")?;
    writeln!(w, "t,critic_residual,actor_residual,value_l2_error")?;
    for s in &run.trajectory {
        let err = v.as_ref().map_or("NA".to_string(), |v| {
            let diff: Vec<f64> = s.q.iter().zip(v).map(|(q, v)| q - v).collect();
            grid.norm(&diff).to_string()
        });
        writeln!(w, "{},{},{},{err}", s.t, s.critic_residual, s.actor_residual)?;
    }
    w.flush()?;

    let last = run.last();
    println!(
        "t = {}: critic residual {:.3e}, actor residual {:.3e}, boundary drift {:.1e}",
        last.t, last.critic_residual, last.actor_residual, run.boundary_drift
    );
    if problem.analytic.is_some() {
        println!("grid L2 distance to V: {:.3e}", run.value_error(&problem)?);
    }
    Ok(vec!["trajectory.csv", "residuals.csv"])
}

fn width_consistency(a: &WidthConsistencyArgs) -> Result<Vec<&'static str>> {
    let problem = load_problem(&a.problem, None)?;
    let init = InitSpec::with_seed(a.kernel_seed);
    let ode = LimitOde::new(&problem, a.grid, a.samples, &init)?;
    let cfg = LimitOdeConfig {
        intervals: a.grid,
        kernel_samples: a.samples,
        dt: a.dt,
        omega: a.omega,
        alpha: a.alpha,
        init,
        ..LimitOdeConfig::default()
    };
    let s = width_consistency_study(&ode, &cfg, &a.widths, &a.seeds, a.beta, &a.times)?;

    let mut w = csv_writer(&a.out, "consistency.csv")?;
    writeln!(w, "width,seed,t,critic_l2,actor_l2,critic_h2_proxy")?;
    for r in &s.rows {
        writeln!(w, "{},{},{},{},{},{}", r.width, r.seed, r.t, r.critic_l2, r.actor_l2, r.critic_h2_proxy)?;
    }
    w.flush()?;

    let mut w = csv_writer(&a.out, "consistency_summary.csv")?;
    writeln!(w, "t,width,distance,inversions")?;
    for &t in &a.times {
        let d = s.distances_at(t);
        let inv = inversions(&d.iter().map(|r| r.1).collect::<Vec<_>>());
        for (n, dist) in &d {
            writeln!(w, "{t},{n},{dist},{inv}")?;
        }
        println!("t = {t}: {inv} width inversions");
    }
    w.flush()?;
    println!("t = 0 log-log slope: {:.4}", s.t0_slope);
    Ok(vec!["consistency.csv", "consistency_summary.csv"])
}
