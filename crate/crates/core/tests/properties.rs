use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hjbac::ntk::kernel_a;
use hjbac::pde::generator;
use hjbac::{preset, CriticNet, Domain, InitSpec, Preset, ProblemSpec, ShallowNet};

const WIDTH: usize = 6;

fn presets() -> Vec<ProblemSpec> {
    Preset::ALL
        .iter()
        .map(|p| preset(*p, if p.takes_dim() { Some(3) } else { None }).unwrap())
        .collect()
}

fn preset_index() -> impl Strategy<Value = usize> {
    0..Preset::ALL.len()
}

/// Outer, inner and bias blocks for a width-6 net on up to 10 inputs, scaled
/// up to 1e3 so saturation is exercised too.
fn raw_params() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (
        prop::collection::vec(-1.0f64..1.0, WIDTH),
        prop::collection::vec(-1.0f64..1.0, WIDTH * 10),
        prop::collection::vec(-1.0f64..1.0, WIDTH),
        prop_oneof![Just(1.0), Just(10.0), Just(1e3)],
    )
}

fn critic_for(p: &ProblemSpec, (outer, inner, bias, scale): &(Vec<f64>, Vec<f64>, Vec<f64>, f64)) -> CriticNet {
    let d = p.dim();
    let s = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
    let z = ShallowNet::from_parts(0.75, s(outer), s(&inner[..WIDTH * d]), s(bias), 1).unwrap();
    CriticNet::new(z, Arc::new(p.domain), p.boundary.clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn critic_matches_boundary_exactly(i in preset_index(), params in raw_params(), seed in any::<u64>()) {
        let p = &presets()[i];
        let critic = critic_for(p, &params);
        for x in p.domain.sample_boundary(8, &mut ChaCha8Rng::seed_from_u64(seed)) {
            let (q, g) = (critic.value(&x), p.boundary.value(&x));
            prop_assert!((q - g).abs() <= 1e-12 * g.abs().max(1.0), "{}: {q} vs {g}", p.name);
        }
    }

    #[test]
    fn eta_is_positive_inside_and_zero_on_boundary(i in preset_index(), seed in any::<u64>()) {
        let p = &presets()[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.domain.sample_interior(8, &mut rng) {
            prop_assert!(p.domain.eta(&x) > 0.0);
        }
        for x in p.domain.sample_boundary(8, &mut rng) {
            prop_assert!(p.domain.eta(&x).abs() <= 1e-12);
        }
    }

    #[test]
    fn zeta_is_nonnegative_and_vanishes_at_optimum(i in preset_index(), seed in any::<u64>(), offset in -3.0f64..3.0) {
        let p = &presets()[i];
        let Some(zeta) = &p.zeta else { return Ok(()) };
        let sol = p.solution().unwrap();
        for x in p.domain.sample_interior(4, &mut ChaCha8Rng::seed_from_u64(seed)) {
            let u = sol.control_at(&x, p.action_dim);
            prop_assert!(zeta(&x, &u).abs() <= 1e-12);
            let mut a = u.clone();
            a[0] += offset;
            let z = zeta(&x, &a);
            prop_assert!(z >= 0.0);
            if offset.abs() > 1e-3 {
                prop_assert!(z > 0.0, "{}: zeta vanishes off the optimum", p.name);
            }
        }
    }

    #[test]
    fn hamiltonian_minus_generator_is_discounted_value(i in preset_index(), params in raw_params(), seed in any::<u64>()) {
        let p = &presets()[i];
        let critic = critic_for(p, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.domain.sample_interior(4, &mut rng) {
            let mut a: Vec<f64> = (0..p.action_dim).map(|j| (x[j % x.len()] * 0.7).sin()).collect();
            p.clamp_action(&mut a);
            let e = generator(p, &critic.jet(&x), &x, &a).unwrap();
            let gq = p.gamma * critic.value(&x);
            prop_assert!((e.hamiltonian - e.value - gq).abs() <= 1e-12 * e.hamiltonian.abs().max(gq.abs()).max(1.0));
        }
    }

    #[test]
    fn segment_exit_lands_on_boundary(
        cube in any::<bool>(),
        d in 1usize..6,
        r in 0.5f64..3.0,
        seed in any::<u64>(),
        step in 0.01f64..2.0,
    ) {
        let dom = if cube { Domain::cube(r, d) } else { Domain::ball(r, d) }.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inside = dom.sample_interior(1, &mut rng).remove(0);
        let dir = dom.sample_boundary(1, &mut rng).remove(0);
        let outside: Vec<f64> = inside.iter().zip(&dir).map(|(x, v)| x + v * (1.0 + step)).collect();
        prop_assume!(!dom.contains(&outside));
        let (theta, p) = dom.segment_exit(&inside, &outside);
        prop_assert!((0.0..=1.0).contains(&theta));
        let gap = if cube {
            (p.iter().fold(0.0f64, |m, v| m.max(v.abs())) - r).abs()
        } else {
            (p.iter().map(|v| v * v).sum::<f64>().sqrt() - r).abs()
        };
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn kernel_estimate_is_symmetric_with_shared_samples(
        x in prop::collection::vec(-1.0f64..1.0, 2),
        y in prop::collection::vec(-1.0f64..1.0, 2),
        seed in any::<u64>(),
    ) {
        let init = InitSpec::with_seed(seed);
        let kxy = kernel_a(&x, &y, &init, 200, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let kyx = kernel_a(&y, &x, &init, 200, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((kxy.mean - kyx.mean).abs() <= 1e-14 * kxy.mean.abs().max(1.0));
        prop_assert!(kxy.std_error >= 0.0);
    }
}
