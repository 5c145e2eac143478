//! Closed-form Bayesian quadrature of the GP surrogate against Gaussian
//! components.

use nalgebra::{DMatrix, DVector};

use super::gp::GpModel;
use crate::error::{check_dim, Error, Result};
use crate::mixture::{GaussianComponent, GaussianMixture};

/// Per-component expected log-joint estimates and their posterior covariance.
#[derive(Debug, Clone)]
pub struct BqEstimate {
    pub i_hat: Vec<f64>,
    pub j: DMatrix<f64>,
}

/// Kernel mean `z_i = ∫ k(x, x_i) N(x; μ, Σ) dx` for every training input.
pub fn kernel_mean(gp: &GpModel, comp: &GaussianComponent) -> Result<DVector<f64>> {
    check_dim(gp.dim(), comp.dim())?;
    let d = gp.dim();
    let ls2: Vec<f64> = gp.inv_ls2().iter().map(|v| 1.0 / v).collect();
    let mut s = comp.cov().clone();
    for k in 0..d {
        s[(k, k)] += ls2[k];
    }
    let ch = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ + Λ in kernel mean".into()))?;
    let log_det_s: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_l: f64 = ls2.iter().map(|v| v.ln()).sum();
    let sf2 = gp.hypers().output_scale.powi(2);
    let pre = sf2 * (0.5 * (log_det_l - log_det_s)).exp();
    let mu = comp.mean();
    Ok(DVector::from_fn(gp.n_train(), |i, _| {
        let xi = gp.train_input(i);
        let diff = DVector::from_fn(d, |k, _| xi[k] - mu[k]);
        let sol = ch.solve(&diff);
        pre * (-0.5 * diff.dot(&sol)).exp()
    }))
}

/// `E[m(x)]` of the negative-quadratic mean under `N(μ, Σ)`.
pub fn mean_function_expectation(gp: &GpModel, mu: &DVector<f64>, cov_diag: &[f64]) -> f64 {
    let h = gp.hypers();
    let mut q = 0.0;
    for k in 0..gp.dim() {
        let t = mu[k] - h.mean_location[k];
        q += (t * t + cov_diag[k]) * gp.inv_w2()[k];
    }
    h.mean_peak - 0.5 * q
}

/// Posterior mean of `∫ f(x) N(x; μ, Σ) dx` under the GP.
pub fn expected_log_joint(gp: &GpModel, comp: &GaussianComponent) -> Result<f64> {
    let z = kernel_mean(gp, comp)?;
    let diag: Vec<f64> = comp.cov().diagonal().iter().copied().collect();
    Ok(mean_function_expectation(gp, comp.mean(), &diag) + z.dot(gp.alpha()))
}

fn prior_cross(gp: &GpModel, a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    let d = gp.dim();
    let mut s = a.cov() + b.cov();
    let mut log_det_l = 0.0;
    for k in 0..d {
        let l2 = 1.0 / gp.inv_ls2()[k];
        s[(k, k)] += l2;
        log_det_l += l2.ln();
    }
    let ch = s
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Σ_k + Σ_k' + Λ".into()))?;
    let log_det_s: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = a.mean() - b.mean();
    let q = diff.dot(&ch.solve(&diff));
    Ok(gp.hypers().output_scale.powi(2) * (0.5 * (log_det_l - log_det_s) - 0.5 * q).exp())
}

/// BQ estimates `Î_k` for all mixture components and the joint posterior
/// covariance `J` of the component integrals.
pub fn bq_expected_log_joint(gp: &GpModel, q: &GaussianMixture) -> Result<BqEstimate> {
    check_dim(gp.dim(), q.dim())?;
    let comps = q.components();
    let mut i_hat = Vec::with_capacity(comps.len());
    let mut v = Vec::with_capacity(comps.len());
    for c in comps {
        let z = kernel_mean(gp, c)?;
        let diag: Vec<f64> = c.cov().diagonal().iter().copied().collect();
        i_hat.push(mean_function_expectation(gp, c.mean(), &diag) + z.dot(gp.alpha()));
        v.push(gp.solve_lower(&z));
    }
    let k = comps.len();
    let mut j = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let val = prior_cross(gp, &comps[a], &comps[b])? - v[a].dot(&v[b]);
            j[(a, b)] = val;
            j[(b, a)] = val;
        }
    }
    Ok(BqEstimate { i_hat, j })
}

/// `Î` for a diagonal Gaussian with its gradient with respect to the mean
/// and the per-dimension standard deviations.
pub fn diag_expected_log_joint_grad(gp: &GpModel, mu: &[f64], sd: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d = gp.dim();
    let h = gp.hypers();
    let inv_w2 = gp.inv_w2();
    let c: Vec<f64> = (0..d).map(|k| sd[k] * sd[k] + 1.0 / gp.inv_ls2()[k]).collect();
    let mut log_pre = 2.0 * h.output_scale.ln();
    for k in 0..d {
        log_pre += 0.5 * ((1.0 / gp.inv_ls2()[k]).ln() - c[k].ln());
    }
    let mut value = h.mean_peak;
    let mut g_mu = vec![0.0; d];
    let mut g_sd = vec![0.0; d];
    for k in 0..d {
        let t = mu[k] - h.mean_location[k];
        value -= 0.5 * (t * t + sd[k] * sd[k]) * inv_w2[k];
        g_mu[k] -= t * inv_w2[k];
        g_sd[k] -= sd[k] * inv_w2[k];
    }
    let alpha = gp.alpha();
    for i in 0..gp.n_train() {
        let xi = gp.train_input(i);
        let mut q = 0.0;
        for k in 0..d {
            let t = xi[k] - mu[k];
            q += t * t / c[k];
        }
        let za = alpha[i] * (log_pre - 0.5 * q).exp();
        value += za;
        for k in 0..d {
            let t = xi[k] - mu[k];
            g_mu[k] += za * t / c[k];
            g_sd[k] += za * (-sd[k] / c[k] + t * t * sd[k] / (c[k] * c[k]));
        }
    }
    (value, g_mu, g_sd)
}
