#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use stackpost::localfit::RunOutput;
use stackpost::{GaussianComponent, GaussianMixture, ParamTransform};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Single-component run `N(mean, diag(var))` with identity transform.
pub fn gaussian_run(mean: &[f64], var: &[f64], i_hat: f64, j: f64) -> RunOutput {
    let comp = GaussianComponent::from_diag(mean, var).unwrap();
    let elbo = i_hat + comp.entropy();
    let q = GaussianMixture::single(comp);
    RunOutput::new(q, ParamTransform::identity(mean.len()), None, vec![i_hat], DMatrix::from_element(1, 1, j), elbo, true, None).unwrap()
}

/// Mixture run over 1-D components with the given means, unit variances and
/// uniform weights.
pub fn mixture_run(means: &[f64], i_hat: Vec<f64>) -> RunOutput {
    let k = means.len();
    let comps: Vec<_> = means.iter().map(|&m| GaussianComponent::from_diag(&[m], &[1.0]).unwrap()).collect();
    let q = GaussianMixture::new(comps, vec![1.0 / k as f64; k]).unwrap();
    let elbo = i_hat.iter().sum::<f64>() / k as f64;
    RunOutput::new(q, ParamTransform::identity(1), None, i_hat, DMatrix::identity(k, k) * 0.01, elbo, true, None).unwrap()
}

/// `m` copies of `N(0, I₂)` whose estimates are `i_true + N(0, j)` noise.
pub fn identical_runs<R: Rng>(m: usize, i_true: f64, j: f64, rng: &mut R) -> Vec<RunOutput> {
    (0..m)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            gaussian_run(&[0.0, 0.0], &[1.0, 1.0], i_true + j.sqrt() * e, j)
        })
        .collect()
}

/// Entropy of `N(0, I₂)`.
pub fn standard_entropy_2d() -> f64 {
    (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

/// `E[max]` of `m` independent standard normals by quadrature of
/// `x m φ(x) Φ(x)^(m−1)`.
pub fn expected_max_normal(m: usize) -> f64 {
    let n = Normal::standard();
    let f = |x: f64| x * m as f64 * n.pdf(x) * n.cdf(x).powi(m as i32 - 1);
    quadrature::integrate(f, -12.0, 12.0, 1e-12).integral
}
