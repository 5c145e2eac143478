//! GP regression with an exponentiated-quadratic kernel and a
//! negative-quadratic mean function.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::optim::minimize_box;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{stream_rng, LN_2PI};

/// Jitter ladder on the Gram diagonal, relative to the output variance.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Kernel and mean-function hyperparameters.
///
/// `k(x, x') = σ_f² exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)` and
/// `m(x) = m₀ − ½ Σ_d (x_d − x_m,d)² / ω_d²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHypers {
    pub lengthscales: Vec<f64>,
    pub output_scale: f64,
    pub mean_peak: f64,
    pub mean_location: Vec<f64>,
    pub mean_widths: Vec<f64>,
}

impl GpHypers {
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_dim(d, self.mean_location.len())?;
        check_dim(d, self.mean_widths.len())?;
        let positive = self.lengthscales.iter().chain(&self.mean_widths).all(|v| *v > 0.0)
            && self.output_scale > 0.0;
        if !positive {
            return Err(Error::Argument("GP scales must be strictly positive".into()));
        }
        Ok(())
    }

    /// Approximate hyperparameters after the input map `x ↦ A x + b` and an
    /// output shift; lengthscales and widths use the diagonal of the mapped
    /// quadratic forms.
    pub fn affine_image(&self, a: &DMatrix<f64>, b: &DVector<f64>, y_shift: f64) -> Self {
        let d = self.dim();
        let map_scales = |s: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| (a[(i, j)] * s[j]).powi(2)).sum::<f64>().sqrt().max(1e-12))
                .collect()
        };
        let loc = a * DVector::from_column_slice(&self.mean_location) + b;
        Self {
            lengthscales: map_scales(&self.lengthscales),
            output_scale: self.output_scale,
            mean_peak: self.mean_peak + y_shift,
            mean_location: loc.iter().copied().collect(),
            mean_widths: map_scales(&self.mean_widths),
        }
    }

    /// Packs into `[log ℓ, log σ_f, m₀, x_m, log ω]`.
    fn pack(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.dim() + 2);
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.output_scale.ln());
        v.push(self.mean_peak);
        v.extend(&self.mean_location);
        v.extend(self.mean_widths.iter().map(|w| w.ln()));
        v
    }

    fn unpack(p: &[f64], d: usize) -> Self {
        Self {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            output_scale: p[d].exp(),
            mean_peak: p[d + 1],
            mean_location: p[d + 2..2 * d + 2].to_vec(),
            mean_widths: p[2 * d + 2..3 * d + 2].iter().map(|v| v.exp()).collect(),
        }
    }

    /// Data-driven starting point: peak at the best observation, widths and
    /// lengthscales from the spread of the inputs.
    pub fn initial(x: &[Vec<f64>], y: &[f64]) -> Self {
        let d = x.first().map_or(1, |r| r.len());
        let n = y.len().max(1) as f64;
        let best = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(0, |(i, _)| i);
        let spread: Vec<f64> = (0..d)
            .map(|k| {
                let m = x.iter().map(|r| r[k]).sum::<f64>() / n;
                let v = x.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-3)
            })
            .collect();
        let ymean = y.iter().sum::<f64>() / n;
        let ysd = (y.iter().map(|v| (v - ymean).powi(2)).sum::<f64>() / n).sqrt().max(1e-2);
        Self {
            lengthscales: spread.iter().map(|s| 0.5 * s).collect(),
            output_scale: ysd.min(10.0),
            mean_peak: y.get(best).copied().unwrap_or(0.0),
            mean_location: x.get(best).cloned().unwrap_or_else(|| vec![0.0; d]),
            mean_widths: spread,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GpFitOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iter: 200,
            seed: 0,
        }
    }
}

/// A GP conditioned on `(X, y, S)` with its Gram factorization cached.
#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    /// Row-major `N × D` training inputs.
    x: Vec<f64>,
    y: DVector<f64>,
    noise: DVector<f64>,
    hypers: GpHypers,
    inv_ls2: Vec<f64>,
    inv_w2: Vec<f64>,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    /// Conditions on the data with fixed hyperparameters. `x` may be empty.
    pub fn new(x: &[Vec<f64>], y: &[f64], noise: &[f64], hypers: GpHypers) -> Result<Self> {
        hypers.validate()?;
        let d = hypers.dim();
        check_dim(x.len(), y.len())?;
        check_dim(x.len(), noise.len())?;
        for r in x {
            check_dim(d, r.len())?;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("training values must be finite".into()));
        }
        if noise.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Argument("noise variances must be nonnegative".into()));
        }
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        Self::condition(d, flat, DVector::from_column_slice(y), DVector::from_column_slice(noise), hypers)
    }

    fn condition(d: usize, x: Vec<f64>, y: DVector<f64>, noise: DVector<f64>, hypers: GpHypers) -> Result<Self> {
        let inv_ls2 = hypers.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let inv_w2 = hypers.mean_widths.iter().map(|w| 1.0 / (w * w)).collect();
        let mut gp = Self {
            dim: d,
            x,
            y,
            noise,
            hypers,
            inv_ls2,
            inv_w2,
            chol: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter: 0.0,
        };
        let gram = gp.gram();
        let (chol, jitter) = gp.factor(&gram)?;
        let resid = gp.residuals();
        let alpha = chol_solve(&chol, &resid);
        gp.chol = chol;
        gp.alpha = alpha;
        gp.jitter = jitter;
        Ok(gp)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn hypers(&self) -> &GpHypers {
        &self.hypers
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn train_input(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn train_values(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    pub(crate) fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub(crate) fn inv_ls2(&self) -> &[f64] {
        &self.inv_ls2
    }

    pub(crate) fn inv_w2(&self) -> &[f64] {
        &self.inv_w2
    }

    #[inline]
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut q = 0.0;
        for k in 0..self.dim {
            let t = a[k] - b[k];
            q += t * t * self.inv_ls2[k];
        }
        self.hypers.output_scale.powi(2) * (-0.5 * q).exp()
    }

    #[inline]
    pub fn prior_mean(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for k in 0..self.dim {
            let t = x[k] - self.hypers.mean_location[k];
            q += t * t * self.inv_w2[k];
        }
        self.hypers.mean_peak - 0.5 * q
    }

    /// Row-major Gram matrix `K(X, X)`.
    fn gram(&self) -> Vec<f64> {
        let n = self.n_train();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.kernel(self.train_input(i), self.train_input(j));
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }

    fn residuals(&self) -> DVector<f64> {
        DVector::from_fn(self.n_train(), |i, _| self.y[i] - self.prior_mean(self.train_input(i)))
    }

    fn factor(&self, gram: &[f64]) -> Result<(DMatrix<f64>, f64)> {
        let n = self.n_train();
        if n == 0 {
            return Ok((DMatrix::zeros(0, 0), 0.0));
        }
        let sf2 = self.hypers.output_scale.powi(2);
        for jitter in std::iter::once(0.0).chain(JITTER_LADDER.iter().map(|r| r * sf2)) {
            let mut a = gram.to_vec();
            for i in 0..n {
                a[i * n + i] += self.noise[i] + jitter;
            }
            if cholesky_flat(&mut a, n) {
                return Ok((DMatrix::from_row_slice(n, n, &a), jitter));
            }
        }
        Err(Error::GpFit(format!(
            "Gram matrix of {n} points not positive definite after jitter {:e}·σ_f² \
             (lengthscales {:?}, output scale {})",
            JITTER_LADDER[JITTER_LADDER.len() - 1],
            self.hypers.lengthscales,
            self.hypers.output_scale
        )))
    }

    /// Cross-covariance vector `k(X, x*)`.
    pub fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.n_train(), |i, _| self.kernel(self.train_input(i), x))
    }

    /// Posterior mean and variance at `x`; the variance is clamped at zero.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let kx = self.cross(x);
        let mean = self.prior_mean(x) + kx.dot(&self.alpha);
        let v = self.solve_lower(&kx);
        let var = self.hypers.output_scale.powi(2) - v.dot(&v);
        (mean, var.max(0.0))
    }

    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n_train() {
            acc += self.alpha[i] * self.kernel(self.train_input(i), x);
        }
        self.prior_mean(x) + acc
    }

    /// Posterior covariance between two test inputs.
    pub fn posterior_cov(&self, a: &[f64], b: &[f64]) -> f64 {
        let va = self.solve_lower(&self.cross(a));
        let vb = self.solve_lower(&self.cross(b));
        self.kernel(a, b) - va.dot(&vb)
    }

    /// `L⁻¹ v` for the cached Gram factor.
    pub fn solve_lower(&self, v: &DVector<f64>) -> DVector<f64> {
        if v.is_empty() {
            return v.clone();
        }
        self.chol.solve_lower_triangular(v).expect("cholesky factor has a positive diagonal")
    }

    /// Log marginal likelihood of the training data.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n_train();
        let resid = self.residuals();
        let logdet: f64 = 2.0 * self.chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * resid.dot(&self.alpha) - 0.5 * logdet - 0.5 * n as f64 * LN_2PI
    }

    /// Log marginal likelihood and its gradient in packed coordinates.
    fn lml_and_grad(&self) -> (f64, Vec<f64>) {
        let n = self.n_train();
        let d = self.dim;
        let lml = self.log_marginal_likelihood();
        let lt = self.chol.transpose();
        let kinv = spd_inverse_from_chol(lt.as_slice(), n);
        let a = &self.alpha;
        let mut grad = vec![0.0; 3 * d + 2];
        // kernel terms: ½ tr((ααᵀ − K⁻¹) ∂K)
        for i in 0..n {
            let xi = self.train_input(i);
            for j in 0..=i {
                let xj = self.train_input(j);
                let kij = self.kernel(xi, xj);
                let w = a[i] * a[j] - kinv[i * n + j];
                let mult = if i == j { 0.5 } else { 1.0 };
                grad[d] += mult * w * 2.0 * kij;
                for k in 0..d {
                    let t = xi[k] - xj[k];
                    grad[k] += mult * w * kij * t * t * self.inv_ls2[k];
                }
            }
        }
        // mean terms: αᵀ ∂m
        for i in 0..n {
            let xi = self.train_input(i);
            grad[d + 1] += a[i];
            for k in 0..d {
                let t = xi[k] - self.hypers.mean_location[k];
                grad[d + 2 + k] += a[i] * t * self.inv_w2[k];
                grad[2 * d + 2 + k] += a[i] * t * t * self.inv_w2[k];
            }
        }
        (lml, grad)
    }

    fn with_hypers(&self, hypers: GpHypers) -> Result<Self> {
        Self::condition(self.dim, self.x.clone(), self.y.clone(), self.noise.clone(), hypers)
    }

    /// Draws `count` joint posterior samples at `points`.
    pub fn sample_posterior(&self, points: &[Vec<f64>], count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let p = points.len();
        let mean = DVector::from_fn(p, |i, _| self.posterior_mean(&points[i]));
        let vs: Vec<DVector<f64>> = points.iter().map(|x| self.solve_lower(&self.cross(x))).collect();
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..=i {
                let c = self.kernel(&points[i], &points[j]) - vs[i].dot(&vs[j]);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let scale = cov.diagonal().max().max(1e-300);
        let mut l = None;
        for rel in [1e-12, 1e-10, 1e-8, 1e-6] {
            let mut c = cov.clone();
            for i in 0..p {
                c[(i, i)] += rel * scale;
            }
            if let Some(ch) = c.cholesky() {
                l = Some(ch.l());
                break;
            }
        }
        let l = l.ok_or_else(|| Error::NotPositiveDefinite("GP posterior covariance".into()))?;
        let mut rng = stream_rng(seed, 0);
        Ok((0..count)
            .map(|_| {
                let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                &mean + &l * e
            })
            .collect())
    }
}

/// In-place lower Cholesky factor of a row-major SPD matrix. Returns false
/// when a pivot is not positive.
fn cholesky_flat(a: &mut [f64], n: usize) -> bool {
    let mut rj = vec![0.0; n];
    for j in 0..n {
        rj[..j].copy_from_slice(&a[j * n..j * n + j]);
        let piv = a[j * n + j] - dot(&rj[..j], &rj[..j]);
        if !(piv > 0.0) || !piv.is_finite() {
            return false;
        }
        let djj = piv.sqrt();
        a[j * n + j] = djj;
        for i in j + 1..n {
            let v = (a[i * n + j] - dot(&a[i * n..i * n + j], &rj[..j])) / djj;
            a[i * n + j] = v;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `(L Lᵀ)⁻¹` from a row-major lower factor, as a full row-major matrix.
fn spd_inverse_from_chol(l: &[f64], n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        v[..=i].iter_mut().for_each(|x| *x = 0.0);
        v[i] = 1.0;
        for k in 0..i {
            let c = l[i * n + k];
            if c != 0.0 {
                let wk = &w[k * n..k * n + k + 1];
                for (vj, wj) in v[..=k].iter_mut().zip(wk) {
                    *vj -= c * wj;
                }
            }
        }
        let inv = 1.0 / l[i * n + i];
        for j in 0..=i {
            w[i * n + j] = v[j] * inv;
        }
    }
    let mut kinv = vec![0.0; n * n];
    for i in 0..n {
        let wi = &w[i * n..i * n + i + 1];
        for a in 0..=i {
            let wa = wi[a];
            if wa != 0.0 {
                let row = &mut kinv[a * n..a * n + a + 1];
                for (r, wb) in row.iter_mut().zip(&wi[..=a]) {
                    *r += wa * wb;
                }
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            kinv[b * n + a] = kinv[a * n + b];
        }
    }
    kinv
}

fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if b.is_empty() {
        return b.clone();
    }
    let t = l.solve_lower_triangular(b).expect("positive diagonal");
    l.tr_solve_lower_triangular(&t).expect("positive diagonal")
}

fn hyper_bounds(x: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let span: Vec<f64> = (0..d)
        .map(|k| {
            let (lo, hi) = x.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| (lo.min(r[k]), hi.max(r[k])));
            (hi - lo).max(1e-6)
        })
        .collect();
    let xmin: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).fold(f64::MAX, f64::min)).collect();
    let xmax: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).fold(f64::MIN, f64::max)).collect();
    let (ylo, yhi) = y.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let yr = (yhi - ylo).max(1.0);
    let mut lo = Vec::with_capacity(3 * d + 2);
    let mut hi = Vec::with_capacity(3 * d + 2);
    for s in &span {
        lo.push((s * 1e-3).ln());
        hi.push((s * 10.0).ln());
    }
    lo.push(1e-4f64.ln());
    hi.push((1e4 * yr).ln());
    lo.push(ylo - 10.0 * yr);
    hi.push(yhi + 0.5 * yr);
    for k in 0..d {
        lo.push(xmin[k] - 0.5 * span[k]);
        hi.push(xmax[k] + 0.5 * span[k]);
    }
    for s in &span {
        lo.push((s * 1e-3).ln());
        hi.push((s * 1e3).ln());
    }
    (lo, hi)
}

/// Fits hyperparameters by maximizing the log marginal likelihood from
/// `options.restarts` starting points (the first is `init`).
pub fn gp_fit(x: &[Vec<f64>], y: &[f64], noise: &[f64], init: &GpHypers, options: GpFitOptions) -> Result<GpModel> {
    let d = init.dim();
    if x.len() < d + 2 {
        return Err(Error::Argument(format!(
            "GP fit needs at least D + 2 = {} points, got {}",
            d + 2,
            x.len()
        )));
    }
    let base = GpModel::new(x, y, noise, init.clone())?;
    let (lo, hi) = hyper_bounds(x, y);
    let objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
        let gp = base.with_hypers(GpHypers::unpack(p, d)).ok()?;
        let (lml, g) = gp.lml_and_grad();
        if !lml.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((-lml, g.iter().map(|v| -v).collect()))
    };
    let start = init.pack();
    let mut rng = stream_rng(options.seed, 0x6770);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..options.restarts.max(1) {
        let mut p0 = start.clone();
        if r > 0 {
            for (i, v) in p0.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                let scale = if i == d + 1 { 0.0 } else if (d + 2..2 * d + 2).contains(&i) { 0.0 } else { 0.7 };
                *v += scale * e;
            }
        }
        let (p, f) = minimize_box(objective, &p0, &lo, &hi, options.max_iter);
        if f.is_finite() && best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((p, f));
        }
    }
    let init_value = base.log_marginal_likelihood();
    match best {
        Some((p, f)) if -f >= init_value => base.with_hypers(GpHypers::unpack(&p, d)),
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                let p = vec![-2.0 + 0.8 * i as f64, -2.0 + 0.8 * j as f64];
                y.push(1.0 - 0.5 * (p[0] * p[0] / 1.5 + (p[1] - 0.3).powi(2)) + 0.3 * (2.0 * p[0]).sin());
                x.push(p);
            }
        }
        (x, y)
    }

    #[test]
    fn interpolates_noise_free_points() {
        let (x, y) = toy();
        let s = vec![0.0; y.len()];
        let gp = gp_fit(&x, &y, &s, &GpHypers::initial(&x, &y), GpFitOptions::default()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (m, v) = gp.posterior(xi);
            assert!((m - yi).abs() < 1e-6, "{m} vs {yi}");
            assert!(v < 1e-6);
        }
    }

    #[test]
    fn fit_never_decreases_lml() {
        let (x, y) = toy();
        let s = vec![1e-4; y.len()];
        let init = GpHypers::initial(&x, &y);
        let before = GpModel::new(&x, &y, &s, init.clone()).unwrap().log_marginal_likelihood();
        let after = gp_fit(&x, &y, &s, &init, GpFitOptions::default()).unwrap().log_marginal_likelihood();
        assert!(after >= before);
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let (x, y) = toy();
        let s = vec![1e-6; y.len()];
        let gp = GpModel::new(&x, &y, &s, GpHypers::initial(&x, &y)).unwrap();
        let far = [60.0, -45.0];
        let (m, v) = gp.posterior(&far);
        assert!((m - gp.prior_mean(&far)).abs() < 1e-9 * m.abs().max(1.0));
        assert!((v - gp.hypers().output_scale.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = toy();
        let s = vec![1e-3; y.len()];
        let gp = GpModel::new(&x, &y, &s, GpHypers::initial(&x, &y)).unwrap();
        let (_, g) = gp.lml_and_grad();
        let p = gp.hypers().pack();
        for i in 0..p.len() {
            let h = 1e-6;
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[i] += h;
            pm[i] -= h;
            let fp = gp.with_hypers(GpHypers::unpack(&pp, 2)).unwrap().log_marginal_likelihood();
            let fm = gp.with_hypers(GpHypers::unpack(&pm, 2)).unwrap().log_marginal_likelihood();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-4 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn flat_factor_and_inverse_match_dense() {
        let n = 7;
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 7) as f64 / 7.0 - 0.4);
        let k = &b * b.transpose() + DMatrix::identity(n, n);
        let mut flat: Vec<f64> = k.transpose().as_slice().to_vec();
        assert!(cholesky_flat(&mut flat, n));
        let l = k.clone().cholesky().unwrap().l();
        let inv = spd_inverse_from_chol(&flat, n);
        let dense_inv = k.try_inverse().unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((flat[i * n + j] - l[(i, j)]).abs() < 1e-12);
                assert!((inv[i * n + j] - dense_inv[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_few_points() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let y = vec![0.0, 1.0, 0.5];
        let r = gp_fit(&x, &y, &[0.0; 3], &GpHypers::initial(&x, &y), GpFitOptions::default());
        assert!(r.is_err());
    }
}
