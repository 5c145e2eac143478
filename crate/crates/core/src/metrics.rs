//! Posterior-quality metrics against ground truth, and bootstrap summaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::numerics::{derive_seed, median, stream_rng, trapezoid};
use crate::stacking::StackedPosterior;
use crate::targets::GroundTruth;

/// Values below this are treated as negligible for model selection.
pub const DELTA_LML_NEGLIGIBLE: f64 = 1.0;
pub const MMTV_THRESHOLD: f64 = 0.2;
pub const GSKL_THRESHOLD: f64 = 0.125;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Seed used when moments of a non-linear stack must be sampled.
const MOMENT_SEED: u64 = 0x6d6f_6d65_6e74;

/// Anything with 1-D marginals and first two moments.
pub trait Approximation {
    fn dim(&self) -> usize;
    fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>>;
    fn moments(&self) -> (DVector<f64>, DMatrix<f64>);
}

impl Approximation for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        GaussianMixture::marginal_pdf(self, dim, grid)
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        GaussianMixture::moments(self)
    }
}

impl Approximation for StackedPosterior {
    fn dim(&self) -> usize {
        StackedPosterior::dim(self)
    }

    fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        StackedPosterior::marginal_pdf(self, dim, grid)
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        StackedPosterior::moments(self, &mut stream_rng(MOMENT_SEED, 0))
    }
}

impl Approximation for GroundTruth {
    fn dim(&self) -> usize {
        GroundTruth::dim(self)
    }

    /// Linear interpolation of the tabulated marginal; zero outside the grid.
    fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let g = self
            .marginal_grids
            .get(dim)
            .ok_or_else(|| Error::Argument(format!("no marginal grid for dimension {dim}")))?;
        Ok(grid
            .iter()
            .map(|&x| {
                let i = g.grid.partition_point(|v| *v <= x);
                if i == 0 || i == g.grid.len() {
                    return if x == *g.grid.last().unwrap() { *g.density.last().unwrap() } else { 0.0 };
                }
                let t = (x - g.grid[i - 1]) / (g.grid[i] - g.grid[i - 1]);
                g.density[i - 1] * (1.0 - t) + g.density[i] * t
            })
            .collect())
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean.clone(), self.cov.clone())
    }
}

/// `|elbo − log Z|`.
pub fn delta_lml(elbo: f64, truth: &GroundTruth) -> f64 {
    (elbo - truth.log_marginal_likelihood).abs()
}

pub fn lml_negligible(delta: f64) -> bool {
    delta < DELTA_LML_NEGLIGIBLE
}

/// Mean over dimensions of half the L1 distance between marginals, on the
/// ground-truth grids. Truth mass is assumed to lie on its grid.
pub fn mmtv<A: Approximation + ?Sized>(q: &A, truth: &GroundTruth) -> Result<f64> {
    let d = truth.dim();
    if q.dim() != d {
        return Err(Error::Dimension { expected: d, got: q.dim() });
    }
    let mut total = 0.0;
    for k in 0..d {
        let g = truth
            .marginal_grids
            .get(k)
            .ok_or_else(|| Error::Argument(format!("ground truth has no marginal grid for dimension {k}")))?;
        let qd = q.marginal_pdf(k, &g.grid)?;
        let diff: Vec<f64> = g.density.iter().zip(&qd).map(|(p, q)| (p - q).abs()).collect();
        // approximation mass falling outside the truth grid counts fully
        let outside = (1.0 - trapezoid(&g.grid, &qd)).max(0.0);
        total += 0.5 * (trapezoid(&g.grid, &diff) + outside);
    }
    Ok((total / d as f64).clamp(0.0, 1.0))
}

/// Cholesky factor, or the first dimension at which the covariance is singular.
fn chol_or_dim(cov: &DMatrix<f64>, which: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let d = cov.nrows();
    for k in 1..=d {
        let block = cov.view((0, 0), (k, k)).into_owned();
        if block.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite(format!(
                "{which} covariance is degenerate in dimension {}",
                k - 1
            )));
        }
    }
    Ok(cov.clone().cholesky().expect("checked above"))
}

fn gauss_kl(m0: &DVector<f64>, c0: &DMatrix<f64>, l0: f64, m1: &DVector<f64>, ch1: &nalgebra::Cholesky<f64, nalgebra::Dyn>, l1: f64) -> f64 {
    let d = m0.len() as f64;
    let tr = ch1.solve(c0).trace();
    let dm = m1 - m0;
    let maha = dm.dot(&ch1.solve(&dm));
    0.5 * (tr + maha - d + l1 - l0)
}

fn log_det(ch: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Symmetric KL between moment-matched Gaussians, divided by `2D`.
pub fn gskl_moments(m_q: &DVector<f64>, c_q: &DMatrix<f64>, m_p: &DVector<f64>, c_p: &DMatrix<f64>) -> Result<f64> {
    let d = m_p.len();
    if m_q.len() != d || c_q.nrows() != d || c_p.nrows() != d {
        return Err(Error::Dimension { expected: d, got: m_q.len() });
    }
    let cq = chol_or_dim(c_q, "approximation")?;
    let cp = chol_or_dim(c_p, "ground-truth")?;
    let (lq, lp) = (log_det(&cq), log_det(&cp));
    let kl = gauss_kl(m_q, c_q, lq, m_p, &cp, lp) + gauss_kl(m_p, c_p, lp, m_q, &cq, lq);
    Ok((kl / (2.0 * d as f64)).max(0.0))
}

pub fn gskl<A: Approximation + ?Sized>(q: &A, truth: &GroundTruth) -> Result<f64> {
    let (m, c) = q.moments();
    gskl_moments(&m, &c, &truth.mean, &truth.cov)
}

pub fn gskl_pass(value: f64) -> bool {
    value < GSKL_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta_lml: f64,
    pub mmtv: f64,
    pub gskl: f64,
    pub elbo: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn score<A: Approximation + ?Sized>(q: &A, elbo: f64, truth: &GroundTruth, m: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            delta_lml: delta_lml(elbo, truth),
            mmtv: mmtv(q, truth)?,
            gskl: gskl(q, truth)?,
            elbo,
            m,
            seed,
        })
    }
}

/// Median with a percentile-bootstrap 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianCi {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Percentile of sorted data with linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile-bootstrap CI for the median of `values`; deterministic in `seed`.
pub fn bootstrap_median(values: &[f64], resamples: usize, seed: u64) -> Result<MedianCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Argument(format!("bootstrap needs at least 2 values, got {n}")));
    }
    if resamples == 0 {
        return Err(Error::Argument("bootstrap needs at least one resample".into()));
    }
    let mut stats: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(derive_seed(seed, "bootstrap", b as u64), 0);
            let draw: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
            median(&draw)
        })
        .collect();
    stats.sort_by(|a, b| a.total_cmp(b));
    let med = median(values);
    Ok(MedianCi {
        median: med,
        lower: percentile(&stats, 0.025).min(med),
        upper: percentile(&stats, 0.975).max(med),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub method: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub replicates: usize,
    pub resamples: usize,
    pub elbo: MedianCi,
    pub delta_lml: MedianCi,
    pub mmtv: MedianCi,
    pub gskl: MedianCi,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub rows: Vec<BootstrapRow>,
}

impl BootstrapSummary {
    /// Summarizes the finite replicates of one `(method, M)` cell.
    pub fn push(&mut self, method: &str, m: usize, reports: &[MetricsReport], resamples: usize, seed: u64) -> Result<()> {
        let col = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { reports.iter().map(f).filter(|v| v.is_finite()).collect() };
        let cell_seed = derive_seed(seed, method, m as u64);
        self.rows.push(BootstrapRow {
            method: method.to_string(),
            m,
            replicates: reports.len(),
            resamples,
            elbo: bootstrap_median(&col(|r| r.elbo), resamples, cell_seed)?,
            delta_lml: bootstrap_median(&col(|r| r.delta_lml), resamples, cell_seed ^ 1)?,
            mmtv: bootstrap_median(&col(|r| r.mmtv), resamples, cell_seed ^ 2)?,
            gskl: bootstrap_median(&col(|r| r.gskl), resamples, cell_seed ^ 3)?,
        });
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 16] = [
        "method",
        "M",
        "replicates",
        "resamples",
        "elbo_median",
        "elbo_lo",
        "elbo_hi",
        "delta_lml_median",
        "delta_lml_lo",
        "delta_lml_hi",
        "mmtv_median",
        "mmtv_lo",
        "mmtv_hi",
        "gskl_median",
        "gskl_lo",
        "gskl_hi",
    ];

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.m.to_string(), r.replicates.to_string(), r.resamples.to_string()];
            for ci in [r.elbo, r.delta_lml, r.mmtv, r.gskl] {
                rec.extend([ci.median, ci.lower, ci.upper].iter().map(|v| format!("{v}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianComponent;

    fn normal(mu: f64) -> GaussianMixture {
        GaussianMixture::single(GaussianComponent::from_diag(&[mu], &[1.0]).unwrap())
    }

    #[test]
    fn delta_lml_examples() {
        let t = GroundTruth::from_mixture(&normal(0.0), -2.0).unwrap();
        assert_eq!(delta_lml(-2.0, &t), 0.0);
        assert_eq!(delta_lml(-1.5, &t), 0.5);
        assert!(lml_negligible(0.5) && !lml_negligible(1.5));
    }

    #[test]
    fn mmtv_identical_and_disjoint() {
        let t = GroundTruth::from_mixture(&normal(0.0), 0.0).unwrap();
        assert!(mmtv(&normal(0.0), &t).unwrap() < 1e-3);
        assert!((mmtv(&normal(100.0), &t).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mmtv_shifted_normal_matches_erf() {
        // TV(N(0,1), N(1,1)) = 2Φ(1/2) − 1
        let t = GroundTruth::from_mixture(&normal(0.0), 0.0).unwrap();
        let v = mmtv(&normal(1.0), &t).unwrap();
        let exact = 0.382_924_922_548_026;
        assert!((v - exact).abs() < 2e-3, "{v}");
    }

    #[test]
    fn gskl_examples() {
        let t = GroundTruth::from_mixture(&normal(0.0), 0.0).unwrap();
        assert!(gskl(&normal(0.0), &t).unwrap().abs() < 1e-14);
        assert!((gskl(&normal(1.0), &t).unwrap() - 0.5).abs() < 1e-12);
        assert!(gskl_pass(0.1) && !gskl_pass(0.2));
    }

    #[test]
    fn gskl_names_singular_dimension() {
        let m = DVector::zeros(2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = gskl_moments(&m, &bad, &m, &DMatrix::identity(2, 2)).unwrap_err();
        assert!(err.to_string().contains("dimension 1"), "{err}");
    }

    #[test]
    fn bootstrap_examples() {
        let flat = bootstrap_median(&[3.0; 10], 500, 0).unwrap();
        assert_eq!((flat.lower, flat.median, flat.upper), (3.0, 3.0, 3.0));
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let ci = bootstrap_median(&v, 1000, 1).unwrap();
        assert_eq!(ci.median, 10.5);
        assert!(ci.lower <= 10.5 && ci.upper >= 10.5);
        assert_eq!(ci, bootstrap_median(&v, 1000, 1).unwrap());
        assert!(bootstrap_median(&[1.0], 10, 0).is_err());
    }
}
