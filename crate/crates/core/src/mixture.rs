//! Gaussian-mixture algebra: densities, sampling, marginals and moments.
//!
//! Every posterior in the crate (local fits, stacked posteriors, ground-truth
//! targets) is expressed through [`GaussianComponent`] and [`GaussianMixture`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{LN_2PI, WEIGHT_FLOOR};

const SYMMETRY_TOL: f64 = 1e-9;

/// A full-covariance multivariate normal with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    /// Row-major inverse of the lower Cholesky factor.
    inv_chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// Builds a component, rejecting non-symmetric or non-SPD covariances.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Argument("component dimension must be positive".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entries".into()));
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let cov = 0.5 * (&cov + cov.transpose());
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("cholesky factorization failed".into()))?
            .l();
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::NotPositiveDefinite("singular cholesky factor".into()))?;
        let mut inv_chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                inv_chol[i * d + j] = inv[(i, j)];
            }
        }
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite("degenerate determinant".into()));
        }
        Ok(Self {
            mean,
            cov,
            chol,
            inv_chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn from_diag(mean: &[f64], variances: &[f64]) -> Result<Self> {
        check_dim(mean.len(), variances.len())?;
        Self::new(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = Σ`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Row-major inverse Cholesky factor and log normalizer.
    pub(crate) fn whitening(&self) -> (&[f64], f64) {
        (&self.inv_chol, self.log_norm)
    }

    pub fn log_det(&self) -> f64 {
        -2.0 * self.log_norm - self.dim() as f64 * LN_2PI
    }

    /// Squared Mahalanobis distance; `x` must have the component's dimension.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mu = self.mean.as_slice();
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.inv_chol[i * d..i * d + i + 1];
            let mut v = 0.0;
            for j in 0..=i {
                v += row[j] * (x[j] - mu[j]);
            }
            acc += v * v;
        }
        acc
    }

    /// Log-density at `x` without a dimension check.
    #[inline]
    pub fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    /// Writes `μ + L ε` into `out` for a standard-normal `eps`.
    #[inline]
    pub fn transform_standard(&self, eps: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut v = self.mean[i];
            for j in 0..=i {
                v += self.chol[(i, j)] * eps[j];
            }
            out[i] = v;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; d];
        self.transform_standard(&eps, &mut out);
        out
    }

    /// Differential entropy `½ log det(2πe Σ)`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 + -self.log_norm
    }

    /// Pushes the component through `x ↦ A x + c`.
    pub fn affine_image(&self, a: &DMatrix<f64>, c: &DVector<f64>) -> Result<Self> {
        let mean = a * &self.mean + c;
        let cov = a * &self.cov * a.transpose();
        Self::new(mean, 0.5 * (&cov + cov.transpose()))
    }
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

/// A weighted mixture of Gaussian components sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
}

/// Plain-data view used for (de)serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureData {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    /// Weights must be nonnegative and sum to one within 1e-12.
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Argument("mixture needs at least one component".into()));
        }
        check_dim(components.len(), weights.len())?;
        let d = components[0].dim();
        for c in &components {
            check_dim(d, c.dim())?;
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            components,
            weights,
        })
    }

    /// Normalizes `weights` before building the mixture.
    pub fn from_unnormalized(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Validation("mixture weights have no positive mass".into()));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Self::new(components, weights)
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self {
            components: vec![component],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_pdf_unchecked(x))
    }

    pub fn log_pdf_unchecked(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.len());
        for (c, &w) in self.components.iter().zip(&self.weights) {
            if w <= WEIGHT_FLOOR {
                continue;
            }
            let t = w.ln() + c.log_pdf_unchecked(x);
            max = max.max(t);
            terms.push(t);
        }
        if !max.is_finite() {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Picks a component index with probability equal to its weight.
    pub fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w <= WEIGHT_FLOOR {
                continue;
            }
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let k = self.pick_component(rng);
                self.components[k].sample(rng)
            })
            .collect()
    }

    /// One-dimensional marginal along `dim`.
    pub fn marginal_1d(&self, dim: usize) -> Result<GaussianMixture> {
        if dim >= self.dim() {
            return Err(Error::Argument(format!(
                "marginal dimension {dim} out of range for D = {}",
                self.dim()
            )));
        }
        let components = self
            .components
            .iter()
            .map(|c| GaussianComponent::from_diag(&[c.mean[dim]], &[c.cov[(dim, dim)]]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            weights: self.weights.clone(),
        })
    }

    /// Density of the `dim` marginal at each grid point.
    pub fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let m = self.marginal_1d(dim)?;
        Ok(grid.iter().map(|&x| m.log_pdf_unchecked(&[x]).exp()).collect())
    }

    /// Mean and covariance; the covariance is symmetrized.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        for (c, &w) in self.components.iter().zip(&self.weights) {
            mean += w * &c.mean;
        }
        let mut cov = DMatrix::zeros(d, d);
        for (c, &w) in self.components.iter().zip(&self.weights) {
            let dm = &c.mean - &mean;
            cov += w * (&c.cov + &dm * dm.transpose());
        }
        let cov = 0.5 * (&cov + cov.transpose());
        (mean, cov)
    }

    /// Monte Carlo entropy estimate from `n` draws.
    pub fn entropy_mc<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        let draws = self.sample(n, rng);
        -draws.iter().map(|x| self.log_pdf_unchecked(x)).sum::<f64>() / n as f64
    }

    pub fn to_data(&self) -> MixtureData {
        MixtureData {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean.as_slice().to_vec()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| {
                    (0..c.dim())
                        .map(|i| (0..c.dim()).map(|j| c.cov[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_data(data: &MixtureData) -> Result<Self> {
        if data.means.len() != data.covariances.len() {
            return Err(Error::Parse {
                field: "covariances".into(),
                reason: format!(
                    "{} covariances for {} means",
                    data.covariances.len(),
                    data.means.len()
                ),
            });
        }
        let components = data
            .means
            .iter()
            .zip(&data.covariances)
            .enumerate()
            .map(|(k, (m, c))| {
                let d = m.len();
                if c.len() != d || c.iter().any(|row| row.len() != d) {
                    return Err(Error::Parse {
                        field: format!("covariances[{k}]"),
                        reason: format!("expected a {d}x{d} matrix"),
                    });
                }
                let cov = DMatrix::from_fn(d, d, |i, j| c[i][j]);
                GaussianComponent::new(DVector::from_column_slice(m), cov).map_err(|e| {
                    Error::Validation(format!("component {k}: {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components, data.weights.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{linspace, stream_rng, trapezoid};

    fn comp(m: &[f64], c: &[f64]) -> GaussianComponent {
        let d = m.len();
        GaussianComponent::new(
            DVector::from_column_slice(m),
            DMatrix::from_row_slice(d, d, c),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_mode_density() {
        let q = GaussianMixture::single(GaussianComponent::standard(2));
        let v = q.log_pdf(&[0.0, 0.0]).unwrap();
        assert!((v + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((v + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn identical_parts_collapse() {
        let c = comp(&[0.3, -1.0], &[2.0, 0.4, 0.4, 1.0]);
        let one = GaussianMixture::single(c.clone());
        let two = GaussianMixture::new(vec![c.clone(), c], vec![0.3, 0.7]).unwrap();
        for x in [[0.0, 0.0], [1.5, -2.0], [-4.0, 3.0]] {
            assert!((one.log_pdf(&x).unwrap() - two.log_pdf(&x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = GaussianMixture::single(GaussianComponent::standard(2));
        assert!(matches!(q.log_pdf(&[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_spd_rejected() {
        let r = GaussianComponent::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn weights_must_be_simplex() {
        let c = GaussianComponent::standard(1);
        assert!(GaussianMixture::new(vec![c.clone(), c.clone()], vec![0.5, 0.4]).is_err());
        assert!(GaussianMixture::new(vec![c.clone(), c], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn zero_weight_components_contribute_nothing() {
        let a = comp(&[0.0], &[1.0]);
        let b = comp(&[100.0], &[1e-6]);
        let q = GaussianMixture::new(vec![a.clone(), b], vec![1.0, 0.0]).unwrap();
        let p = GaussianMixture::single(a);
        assert_eq!(q.log_pdf(&[0.2]).unwrap(), p.log_pdf(&[0.2]).unwrap());
        let mut rng = stream_rng(3, 0);
        assert!(q.sample(10_000, &mut rng).iter().all(|x| x[0].abs() < 10.0));
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let q = GaussianMixture::new(
            vec![comp(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]), comp(&[4.0, 1.0], &[0.5, 0.1, 0.1, 2.0])],
            vec![0.4, 0.6],
        )
        .unwrap();
        let a = q.sample(50, &mut stream_rng(11, 2));
        let b = q.sample(50, &mut stream_rng(11, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let mu = [1.0, -2.0];
        let c = comp(&mu, &[2.0, 0.6, 0.6, 0.5]);
        let q = GaussianMixture::single(c);
        let n = 100_000;
        let xs = q.sample(n, &mut stream_rng(5, 0));
        for d in 0..2 {
            let m: f64 = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            let se = (q.components()[0].cov()[(d, d)] / n as f64).sqrt();
            assert!((m - mu[d]).abs() < 4.0 * se, "axis {d}: {m}");
        }
    }

    #[test]
    fn marginal_projection() {
        let q = GaussianMixture::single(comp(&[1.0, 2.0], &[4.0, 0.0, 0.0, 9.0]));
        let m = q.marginal_1d(1).unwrap();
        assert_eq!(m.components()[0].mean()[0], 2.0);
        assert_eq!(m.components()[0].cov()[(0, 0)], 9.0);
        assert!(q.marginal_1d(2).is_err());

        let q = GaussianMixture::new(
            vec![comp(&[0.0, 0.0], &[1.0, 0.3, 0.3, 1.0]), comp(&[3.0, 1.0], &[0.25, 0.0, 0.0, 4.0])],
            vec![0.25, 0.75],
        )
        .unwrap();
        let m = q.marginal_1d(0).unwrap();
        assert_eq!(m.weights(), q.weights());
        let grid = linspace(-10.0, 15.0, 20_001);
        let dens = q.marginal_pdf(0, &grid).unwrap();
        assert!((trapezoid(&grid, &dens) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn law_of_total_variance() {
        let q = GaussianMixture::new(vec![comp(&[-1.0], &[1.0]), comp(&[1.0], &[1.0])], vec![0.5, 0.5])
            .unwrap();
        let (m, c) = q.moments();
        assert!(m[0].abs() < 1e-15);
        assert!((c[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_component_moments() {
        let c = comp(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        let (m, s) = GaussianMixture::single(c.clone()).moments();
        assert_eq!(&m, c.mean());
        assert!((s - c.cov()).abs().max() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        let q = GaussianMixture::new(
            vec![comp(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]), comp(&[2.0, -1.0], &[0.5, -0.2, -0.2, 0.8])],
            vec![0.3, 0.7],
        )
        .unwrap();
        let xs = linspace(-9.0, 11.0, 801);
        let ys = linspace(-10.0, 9.0, 801);
        let rows: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let col: Vec<f64> = ys.iter().map(|&y| q.log_pdf_unchecked(&[x, y]).exp()).collect();
                trapezoid(&ys, &col)
            })
            .collect();
        assert!((trapezoid(&xs, &rows) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gaussian_entropy_closed_form() {
        let c = GaussianComponent::standard(2);
        assert!((c.entropy() - (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()).abs() < 1e-12);
    }
}
