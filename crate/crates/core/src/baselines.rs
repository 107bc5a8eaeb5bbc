//! Random-sampling comparison algorithms.
//!
//! FedADMM is the same round loop as the controlled variant with the selection
//! operator replaced by [`sample_uniform`]. FedAvg and FedProx drop the duals
//! (`λ = 0`), run a local solve from `ω` and average the participants' models;
//! FedAvg additionally drops the proximal term and uses plain gradient steps.
//! The round loop itself lives in [`crate::engine::Engine`].

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::objectives::{Objective, ProxProblem};

/// Uniform sampling without replacement of a fixed fraction of clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub rate: f64,
}

/// Number of clients drawn per round, `⌈rate·N⌉` clamped to `[1, N]`.
///
/// The product is nudged down by 1e-9 so that e.g. `0.07 · 100` (which is
/// `7.000000000000001` in binary) still yields 7.
pub fn sample_size(clients: usize, rate: f64) -> usize {
    ((rate * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients)
}

/// Draws `⌈rate·N⌉` distinct client indices uniformly at random, sorted.
pub fn sample_uniform<R: Rng + ?Sized>(clients: usize, rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(Error::contract("cannot sample from zero clients"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::contract(format!("sampling rate must lie in (0,1], got {rate}")));
    }
    let mut picked = rand::seq::index::sample(rng, clients, sample_size(clients, rate)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `1/r_i`, or 1 for a flat objective.
pub fn default_lr(obj: &Objective) -> f64 {
    let r = obj.smoothness_constant();
    if r > 0.0 {
        1.0 / r
    } else {
        1.0
    }
}

/// `steps` full-gradient steps on `f_i` starting from `ω`.
pub fn fedavg_local(obj: &Objective, omega: &DVector<f64>, steps: usize, lr: f64) -> Result<DVector<f64>> {
    check_dim(obj.dim(), omega.len())?;
    if steps == 0 || !(lr > 0.0) {
        return Err(Error::contract("fedavg needs steps >= 1 and lr > 0"));
    }
    let mut theta = omega.clone();
    for _ in 0..steps {
        let g = obj.gradient(&theta)?;
        theta.axpy(-lr, &g, 1.0);
    }
    Ok(theta)
}

/// Solves `min f_i(θ) + (μ/2)|θ − ω|²` to residual `eps`, warm-started at `ω`.
pub fn fedprox_local(obj: &Objective, omega: &DVector<f64>, mu: f64, eps: f64) -> Result<DVector<f64>> {
    let prob = ProxProblem::new(omega.clone(), mu, eps, omega.clone())?;
    obj.prox_solve(&prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64) -> Objective {
        Objective::quadratic(DMatrix::from_element(1, 1, a), DVector::from_element(1, b)).unwrap()
    }

    #[test]
    fn full_rate_selects_everyone() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_uniform(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn sample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_uniform(100, 0.05, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_size(100, 0.07), 7);
        assert_eq!(sample_size(100, 0.071), 8);
        assert_eq!(sample_size(10, 0.01), 1);
        assert!(sample_uniform(10, 0.0, &mut rng).is_err());
        assert!(sample_uniform(0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = [0usize; 100];
        for _ in 0..10_000 {
            for i in sample_uniform(100, 0.1, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        for &h in &hits {
            let freq = h as f64 / 10_000.0;
            assert!((0.08..=0.12).contains(&freq), "frequency {freq}");
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_uniform(50, 0.2, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn fedavg_examples() {
        let omega = DVector::from_element(1, 0.7);
        assert_eq!(fedavg_local(&scalar(0.0, 0.0), &omega, 5, 0.3).unwrap(), omega);
        let one = fedavg_local(&scalar(1.0, 3.0), &DVector::zeros(1), 1, 0.5).unwrap();
        assert_relative_eq!(one[0], 1.5);
        // 1−lr contraction towards the minimizer 3
        let many = fedavg_local(&scalar(1.0, 3.0), &DVector::zeros(1), 200, 0.5).unwrap();
        assert_relative_eq!(many[0], 3.0, epsilon = 3.0 * 0.5f64.powi(200) + 1e-12);
    }

    #[test]
    fn fedprox_examples() {
        let omega = DVector::from_element(1, -0.4);
        assert_eq!(fedprox_local(&scalar(0.0, 0.0), &omega, 1.0, 1e-9).unwrap(), omega);
        let x = fedprox_local(&scalar(1.0, 3.0), &DVector::zeros(1), 1.0, 1e-9).unwrap();
        assert_relative_eq!(x[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn fedprox_meets_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..25).map(|k| k % 3).collect();
        let f = Objective::logistic(x, labels, 3).unwrap();
        let omega = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let theta = fedprox_local(&f, &omega, 0.5, 1e-7).unwrap();
        let prob = ProxProblem::new(omega.clone(), 0.5, 1e-7, omega).unwrap();
        assert!(f.prox_residual(&prob, &theta).unwrap() <= 1e-7);
    }
}
