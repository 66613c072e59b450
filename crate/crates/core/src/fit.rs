//! Least-squares fits of the outer layer to a known solution, keeping the
//! hidden layer as drawn at initialization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{CriticNet, ShallowNet};
use crate::problems::ProblemSpec;

/// Relative singular-value cutoff for the least-squares solves.
pub const SVD_EPS: f64 = 1e-12;

fn features(net: &ShallowNet, points: &[Vec<f64>], row_scale: impl Fn(&[f64]) -> f64) -> DMatrix<f64> {
    let n = net.width();
    let s = net.scale();
    DMatrix::from_fn(points.len(), n, |r, i| {
        row_scale(&points[r]) * s * net.pre_activation(i, &points[r]).tanh()
    })
}

fn solve(phi: &DMatrix<f64>, y: DVector<f64>) -> Result<DVector<f64>> {
    let svd = phi.clone().svd(true, true);
    let cutoff = SVD_EPS * svd.singular_values.max();
    svd.solve(&y, cutoff).map_err(|e| Error::config(format!("least-squares solve failed: {e}")))
}

fn rms(phi: &DMatrix<f64>, c: &DVector<f64>, y: &DVector<f64>) -> f64 {
    ((phi * c - y).norm_squared() / y.len() as f64).sqrt()
}

/// Sets the outer weights of Z so that Z·η + ḡ ≈ V at `points`; returns the
/// RMS residual there.
pub fn fit_critic(problem: &ProblemSpec, critic: &mut CriticNet, points: &[Vec<f64>]) -> Result<f64> {
    let v = &problem.solution()?.value;
    let eta = critic.eta.clone();
    let phi = features(&critic.z, points, |x| eta.value(x));
    let y = DVector::from_iterator(points.len(), points.iter().map(|x| v.value(x) - critic.gbar.value(x)));
    let c = solve(&phi, y.clone())?;
    critic.z.outer_mut().copy_from_slice(c.as_slice());
    Ok(rms(&phi, &c, &y))
}

/// Sets the outer weights of the actor so that U ≈ u* at `points`; returns the
/// RMS residual over all action coordinates.
pub fn fit_actor(problem: &ProblemSpec, actor: &mut ShallowNet, points: &[Vec<f64>]) -> Result<f64> {
    let sol = problem.solution()?;
    let k = actor.output_dim();
    if k != problem.action_dim {
        return Err(Error::Dimension(format!("actor has {k} outputs, problem has {} actions", problem.action_dim)));
    }
    let n = actor.width();
    let phi = features(actor, points, |_| 1.0);
    let targets: Vec<Vec<f64>> = points.iter().map(|x| sol.control_at(x, k)).collect();
    let mut ss = 0.0;
    for l in 0..k {
        let y = DVector::from_iterator(points.len(), targets.iter().map(|u| u[l]));
        let c = solve(&phi, y.clone())?;
        actor.outer_mut()[l * n..(l + 1) * n].copy_from_slice(c.as_slice());
        ss += rms(&phi, &c, &y).powi(2);
    }
    Ok((ss / k as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitSpec;
    use crate::problems::{preset, Preset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn critic_fit_reproduces_representable_target() {
        // Build a target that lies exactly in the feature span.
        let p = preset(Preset::Toy1d, None).unwrap();
        let z = ShallowNet::init(16, 1, 1, 0.75, InitSpec::with_seed(1)).unwrap();
        let truth = CriticNet::new(z.clone(), Arc::new(p.domain), p.boundary.clone()).unwrap();
        let pts = p.domain.sample_interior(200, &mut ChaCha8Rng::seed_from_u64(2));
        let mut blank = truth.clone();
        blank.z.outer_mut().iter_mut().for_each(|c| *c = 0.0);
        let phi = features(&blank.z, &pts, |x| blank.eta.value(x));
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|x| truth.value(x) - truth.gbar.value(x)));
        let c = solve(&phi, y.clone()).unwrap();
        assert!(rms(&phi, &c, &y) < 1e-10);
    }

    #[test]
    fn fits_shrink_errors() {
        let p = preset(Preset::Problem1, Some(2)).unwrap();
        let pts = p.domain.sample_interior(800, &mut ChaCha8Rng::seed_from_u64(3));
        let z = ShallowNet::init(64, 2, 1, 0.75, InitSpec::with_seed(4)).unwrap();
        let mut critic = CriticNet::new(z, Arc::new(p.domain), p.boundary.clone()).unwrap();
        let mut actor = ShallowNet::init(64, 2, 2, 0.75, InitSpec::with_seed(5)).unwrap();
        assert!(fit_critic(&p, &mut critic, &pts).unwrap() < 1e-4);
        assert!(fit_actor(&p, &mut actor, &pts).unwrap() < 1e-3);
        let held_out = p.domain.sample_interior(200, &mut ChaCha8Rng::seed_from_u64(6));
        let v = &p.solution().unwrap().value;
        let worst = held_out.iter().map(|x| (critic.value(x) - v.value(x)).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }
}
