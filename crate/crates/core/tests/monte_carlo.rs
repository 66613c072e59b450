use std::sync::Arc;

use hjbac::field::Constant;
use hjbac::mc::{agreement_report, simulate_value, McConfig};
use hjbac::pde::{AnalyticPolicy, AnalyticValue};
use hjbac::problems::{problem1, Diffusion, Dynamics, ProblemSpec};
use hjbac::trainer::{init_networks, TrainConfig};
use hjbac::Domain;

/// b = 0, Φ = √2, c = 1 on (−1, 1), γ = 0, g = 0: V(x) = (1 − x²)/2.
fn poisson() -> ProblemSpec {
    struct Poisson;
    impl Dynamics for Poisson {
        fn drift(&self, _x: &[f64], _a: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion(&self, _x: &[f64], _a: &[f64]) -> Diffusion {
            Diffusion::Diagonal(vec![std::f64::consts::SQRT_2])
        }
        fn running_cost(&self, _x: &[f64], _a: &[f64]) -> f64 {
            1.0
        }
    }
    ProblemSpec {
        name: "poisson_1d".into(),
        domain: Domain::ball(1.0, 1).unwrap(),
        action_dim: 1,
        noise_dim: 1,
        gamma: 0.0,
        dynamics: Arc::new(Poisson),
        boundary: Arc::new(Constant { dim: 1, value: 0.0 }),
        action_clamp: None,
        analytic: None,
        zeta: None,
    }
}

fn zero_policy() -> AnalyticPolicy {
    AnalyticPolicy {
        control: Arc::new(|_x: &[f64], u: &mut [f64]| u[0] = 0.0),
        action_dim: 1,
    }
}

#[test]
fn exact_critic_gives_zero_e2_and_e1_equal_e3() {
    let p = problem1(2);
    let actor = AnalyticPolicy::optimal(&p).unwrap();
    let critic = AnalyticValue(p.solution().unwrap().value.clone());
    let cfg = McConfig {
        paths_per_point: 20,
        eval_points: 15,
        seed: 3,
        ..McConfig::default()
    };
    let r = agreement_report(&p, &actor, &critic, &cfg).unwrap();
    assert_eq!(r.e2, Some(0.0));
    assert_eq!(r.e1, Some(r.e3));
    assert!(r.rows.iter().all(|row| row.v == Some(row.q)));
}

#[test]
fn e3_is_bounded_by_e1_and_e2() {
    let p = problem1(2);
    let cfg = TrainConfig {
        width_actor: 16,
        width_critic: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let (actor, critic) = init_networks(&p, &cfg).unwrap();
    let mc = McConfig {
        paths_per_point: 10,
        eval_points: 40,
        seed: 5,
        ..McConfig::default()
    };
    let r = agreement_report(&p, &actor, &critic, &mc).unwrap();
    let (e1, e2) = (r.e1.unwrap(), r.e2.unwrap());
    // (a + b)² ≤ 2a² + 2b² per point, so the means obey the same bound.
    assert!(r.e3 <= 2.0 * (e1 + e2) * (1.0 + 1e-12), "{} vs {e1} {e2}", r.e3);
    assert!(e2 > 0.0);
}

#[test]
fn poisson_oracle_is_stable_under_smaller_steps() {
    let p = poisson();
    let mut estimates = Vec::new();
    for dt in [1e-3, 2.5e-4] {
        let cfg = McConfig {
            dt,
            paths_per_point: 2000,
            seed: 6,
            ..McConfig::default()
        };
        estimates.push(simulate_value(&p, &zero_policy(), &[0.3], &cfg, 0).unwrap());
    }
    let (a, b) = (&estimates[0], &estimates[1]);
    let se = (a.std_error.unwrap().powi(2) + b.std_error.unwrap().powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() < 3.0 * se, "{} vs {} (se {se})", a.mean, b.mean);
    let v = 0.5 * (1.0 - 0.3f64 * 0.3);
    assert!((b.mean - v).abs() < 3.0 * b.std_error.unwrap() + 0.6 * (2.0 * 2.5e-4f64).sqrt());
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let p = problem1(2);
    let actor = AnalyticPolicy::optimal(&p).unwrap();
    let cfg = McConfig {
        paths_per_point: 64,
        seed: 7,
        ..McConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_value(&p, &actor, &[0.2, -0.1], &cfg, 3).unwrap())
    };
    assert_eq!(run(1), run(4));
}
