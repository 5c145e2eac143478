//! Diagonal-covariance variational mixture optimized against a GP surrogate.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::numerics::LN_2PI;
use crate::surrogate::bq::diag_expected_log_joint_grad;
use crate::surrogate::GpModel;

const MIN_LOG_SD: f64 = -9.0;

#[derive(Debug, Clone)]
pub(crate) struct DiagMixture {
    pub means: Vec<Vec<f64>>,
    pub log_sd: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Box constraints for component means and log-scales.
#[derive(Debug, Clone)]
pub(crate) struct ParamBox {
    pub mean_lo: Vec<f64>,
    pub mean_hi: Vec<f64>,
    pub max_log_sd: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

impl DiagMixture {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|a| (a - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Moments of the mixture.
    pub fn moments(&self) -> (DVector<f64>, nalgebra::DMatrix<f64>) {
        self.to_mixture().expect("valid diagonal mixture").moments()
    }

    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        let comps = self
            .means
            .iter()
            .zip(&self.log_sd)
            .map(|(m, ls)| {
                let var: Vec<f64> = ls.iter().map(|l| (2.0 * l).exp()).collect();
                GaussianComponent::from_diag(m, &var)
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(comps, self.weights())
    }

    /// Splits component `k` into two halves displaced along its widest axis.
    pub fn split(&mut self, k: usize) {
        let d = self.dim();
        let axis = (0..d)
            .max_by(|&a, &b| self.log_sd[k][a].total_cmp(&self.log_sd[k][b]))
            .unwrap_or(0);
        let delta = 0.5 * self.log_sd[k][axis].exp();
        let mut m2 = self.means[k].clone();
        self.means[k][axis] -= delta;
        m2[axis] += delta;
        let mut ls2 = self.log_sd[k].clone();
        for v in self.log_sd[k].iter_mut().chain(ls2.iter_mut()) {
            *v -= 0.1;
        }
        self.logits[k] -= std::f64::consts::LN_2;
        self.means.push(m2);
        self.log_sd.push(ls2);
        self.logits.push(self.logits[k]);
    }

    /// Drops components whose weight falls below `min_weight`.
    pub fn prune(&mut self, min_weight: f64) {
        let w = self.weights();
        if w.iter().filter(|v| **v >= min_weight).count() == 0 {
            return;
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&k| w[k] >= min_weight).collect();
        self.means = keep.iter().map(|&k| self.means[k].clone()).collect();
        self.log_sd = keep.iter().map(|&k| self.log_sd[k].clone()).collect();
        self.logits = keep.iter().map(|&k| self.logits[k]).collect();
    }

    /// `log q(x)` and, when requested, `∇ₓ log q(x)` and the responsibilities.
    fn log_pdf_grad(&self, lw: &[f64], x: &[f64], grad: &mut [f64], resp: &mut [f64]) -> f64 {
        let d = self.dim();
        let k = self.len();
        let mut max = f64::NEG_INFINITY;
        for j in 0..k {
            let mut q = 0.0;
            let mut ld = 0.0;
            for i in 0..d {
                let t = (x[i] - self.means[j][i]) * (-self.log_sd[j][i]).exp();
                q += t * t;
                ld += self.log_sd[j][i];
            }
            resp[j] = lw[j] - 0.5 * q - ld - 0.5 * d as f64 * LN_2PI;
            max = max.max(resp[j]);
        }
        let mut s = 0.0;
        for r in resp.iter_mut() {
            *r = (*r - max).exp();
            s += *r;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for j in 0..k {
            resp[j] /= s;
            for i in 0..d {
                grad[i] -= resp[j] * (x[i] - self.means[j][i]) * (-2.0 * self.log_sd[j][i]).exp();
            }
        }
        max + s.ln()
    }

    /// ELBO with the supplied standard-normal draws, plus per-component `Î`.
    pub fn elbo(&self, gp: &GpModel, eps: &[Vec<Vec<f64>>]) -> (f64, Vec<f64>, f64) {
        let d = self.dim();
        let k = self.len();
        let w = self.weights();
        let lw: Vec<f64> = w.iter().map(|v| v.max(1e-300).ln()).collect();
        let mut i_hat = Vec::with_capacity(k);
        let mut entropy = 0.0;
        let mut x = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut r = vec![0.0; k];
        for j in 0..k {
            let sd: Vec<f64> = self.log_sd[j].iter().map(|v| v.exp()).collect();
            i_hat.push(diag_expected_log_joint_grad(gp, &self.means[j], &sd).0);
            let es = &eps[j];
            let mut acc = 0.0;
            for e in es {
                for i in 0..d {
                    x[i] = self.means[j][i] + sd[i] * e[i];
                }
                acc += self.log_pdf_grad(&lw, &x, &mut g, &mut r);
            }
            entropy -= w[j] * acc / es.len() as f64;
        }
        let e_term: f64 = w.iter().zip(&i_hat).map(|(a, b)| a * b).sum();
        (e_term + entropy, i_hat, entropy)
    }

    /// Stochastic ascent on the surrogate ELBO.
    pub fn optimize(
        &mut self,
        gp: &GpModel,
        bounds: &ParamBox,
        steps: usize,
        samples: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let d = self.dim();
        let k = self.len();
        let n = k * (2 * d + 1);
        let mut adam = Adam::new(n);
        let mut params = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let mut x = vec![0.0; d];
        let mut gx = vec![0.0; d];
        let mut resp = vec![0.0; k];
        let mut eps = vec![0.0; d];
        for step in 0..steps {
            let w = self.weights();
            let lw: Vec<f64> = w.iter().map(|v| v.max(1e-300).ln()).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gk = vec![0.0; k];
            for j in 0..k {
                let sd: Vec<f64> = self.log_sd[j].iter().map(|v| v.exp()).collect();
                let (ij, g_mu, g_sd) = diag_expected_log_joint_grad(gp, &self.means[j], &sd);
                let mut h = 0.0;
                for _ in 0..samples {
                    for e in eps.iter_mut() {
                        *e = rng.sample(StandardNormal);
                    }
                    for i in 0..d {
                        x[i] = self.means[j][i] + sd[i] * eps[i];
                    }
                    h -= self.log_pdf_grad(&lw, &x, &mut gx, &mut resp);
                    for i in 0..d {
                        grad[j * d + i] -= w[j] * gx[i] / samples as f64;
                        grad[k * d + j * d + i] -= w[j] * gx[i] * eps[i] * sd[i] / samples as f64;
                    }
                }
                for i in 0..d {
                    grad[j * d + i] += w[j] * g_mu[i];
                    grad[k * d + j * d + i] += w[j] * g_sd[i] * sd[i];
                }
                gk[j] = ij + h / samples as f64;
            }
            let gbar: f64 = w.iter().zip(&gk).map(|(a, b)| a * b).sum();
            for j in 0..k {
                grad[2 * k * d + j] = w[j] * (gk[j] - gbar);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                log::debug!("non-finite variational gradient at step {step}; stopping early");
                break;
            }
            for j in 0..k {
                params[j * d..(j + 1) * d].copy_from_slice(&self.means[j]);
                params[k * d + j * d..k * d + (j + 1) * d].copy_from_slice(&self.log_sd[j]);
                params[2 * k * d + j] = self.logits[j];
            }
            let rate = lr * (1.0 - 0.9 * step as f64 / steps as f64);
            adam.step(&mut params, &grad, rate);
            for j in 0..k {
                for i in 0..d {
                    self.means[j][i] = params[j * d + i].clamp(bounds.mean_lo[i], bounds.mean_hi[i]);
                    self.log_sd[j][i] = params[k * d + j * d + i].clamp(MIN_LOG_SD, bounds.max_log_sd[i]);
                }
                self.logits[j] = params[2 * k * d + j];
            }
            let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for a in &mut self.logits {
                *a = (*a - max).max(-30.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::GpHypers;
    use rand::SeedableRng;

    #[test]
    fn recovers_gaussian_surrogate() {
        // log-joint exactly N(0.5, 0.8²) × N(−0.3, 0.5²) up to a constant: fits the mean function
        let h = GpHypers {
            lengthscales: vec![1.0, 1.0],
            output_scale: 1e-3,
            mean_peak: 0.0,
            mean_location: vec![0.5, -0.3],
            mean_widths: vec![0.8, 0.5],
        };
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3 - 0.6, 0.2 * i as f64 - 0.5]).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|p| -0.5 * ((p[0] - 0.5f64).powi(2) / 0.64 + (p[1] + 0.3f64).powi(2) / 0.25))
            .collect();
        let gp = GpModel::new(&x, &y, &vec![1e-6; 6], h).unwrap();
        let mut q = DiagMixture {
            means: vec![vec![0.0, 0.0]],
            log_sd: vec![vec![0.0, 0.0]],
            logits: vec![0.0],
        };
        let bounds = ParamBox {
            mean_lo: vec![-5.0; 2],
            mean_hi: vec![5.0; 2],
            max_log_sd: vec![2.0; 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        q.optimize(&gp, &bounds, 1500, 10, 0.05, &mut rng);
        assert!((q.means[0][0] - 0.5).abs() < 0.05);
        assert!((q.means[0][1] + 0.3).abs() < 0.05);
        assert!((q.log_sd[0][0].exp() - 0.8).abs() < 0.05);
        assert!((q.log_sd[0][1].exp() - 0.5).abs() < 0.05);
    }
}
