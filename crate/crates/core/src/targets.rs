//! Black-box inference problems and their ground-truth assets.
//!
//! New problems plug in by implementing [`LogDensity`] and wrapping it in a
//! [`TargetProblem`] together with a [`GroundTruth`].

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::numerics::{linspace, stream_rng, trapezoid};

/// Number of points in every ground-truth marginal grid.
pub const MARGINAL_GRID_POINTS: usize = 2000;
/// Half-width of the marginal grids in marginal standard deviations.
pub const MARGINAL_GRID_SDS: f64 = 6.0;

pub const GMM_CENTROIDS: [[f64; 2]; 4] = [[-8.0, -8.0], [-7.0, 7.0], [6.0, -6.0], [5.0, 5.0]];
pub const GMM_PER_CLUSTER: usize = 5;
pub const GMM_CORRELATION: f64 = 0.5;
pub const GMM_BOUND: f64 = 12.0;

pub const RING_CENTER: [f64; 2] = [1.0, -2.0];
pub const RING_RADIUS: f64 = 8.0;
pub const RING_WIDTH: f64 = 0.1;
/// Radial half-width of the quadrature band, in units of the ring width.
const RING_BAND: f64 = 5.0;
const RING_QUAD_POINTS: usize = 4000;

/// Unnormalized log-joint `log p(θ) p(D | θ)`.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_joint(&self, theta: &[f64]) -> f64;
}

/// Density of one true marginal tabulated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGrid {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub log_marginal_likelihood: f64,
    pub reference_samples: Option<Vec<Vec<f64>>>,
    pub marginal_grids: Vec<MarginalGrid>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ground truth from a mixture with known normalization.
    pub fn from_mixture(q: &GaussianMixture, log_marginal_likelihood: f64) -> Result<Self> {
        let (mean, cov) = q.moments();
        let marginal_grids = (0..q.dim())
            .map(|d| {
                let grid = default_grid(mean[d], cov[(d, d)].sqrt());
                let density = q.marginal_pdf(d, &grid)?;
                Ok(MarginalGrid { grid, density })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            log_marginal_likelihood,
            reference_samples: None,
            marginal_grids,
            mean,
            cov,
        })
    }

    /// Ground truth from posterior samples (e.g. long MCMC chains).
    ///
    /// Marginals are histogram densities with one bin per grid point.
    pub fn from_samples(samples: Vec<Vec<f64>>, log_marginal_likelihood: f64) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Argument("need at least two reference samples".into()));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Argument("reference samples have mixed dimensions".into()));
        }
        let mean = DVector::from_fn(d, |i, _| samples.iter().map(|s| s[i]).sum::<f64>() / n as f64);
        let mut cov = DMatrix::zeros(d, d);
        for s in &samples {
            let v = DVector::from_fn(d, |i, _| s[i] - mean[i]);
            cov += &v * v.transpose();
        }
        cov /= (n - 1) as f64;
        let marginal_grids = (0..d)
            .map(|k| {
                let grid = default_grid(mean[k], cov[(k, k)].sqrt());
                let h = grid[1] - grid[0];
                let mut counts = vec![0.0; grid.len()];
                for s in &samples {
                    let idx = ((s[k] - grid[0]) / h).round();
                    if idx >= 0.0 && (idx as usize) < grid.len() {
                        counts[idx as usize] += 1.0;
                    }
                }
                let density = counts.iter().map(|c| c / (n as f64 * h)).collect();
                MarginalGrid { grid, density }
            })
            .collect();
        Ok(Self {
            log_marginal_likelihood,
            reference_samples: Some(samples),
            marginal_grids,
            mean,
            cov,
        })
    }
}

/// Grid of [`MARGINAL_GRID_POINTS`] points spanning `mean ± 6 sd`.
pub fn default_grid(mean: f64, sd: f64) -> Vec<f64> {
    linspace(
        mean - MARGINAL_GRID_SDS * sd,
        mean + MARGINAL_GRID_SDS * sd,
        MARGINAL_GRID_POINTS,
    )
}

/// A black-box problem: log-joint, noise level, plausible box and ground truth.
#[derive(Clone)]
pub struct TargetProblem {
    pub name: String,
    density: Arc<dyn LogDensity>,
    noise_sigma: f64,
    noise_seed: u64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub ground_truth: Arc<GroundTruth>,
}

impl std::fmt::Debug for TargetProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetProblem")
            .field("name", &self.name)
            .field("dimension", &self.dimension())
            .field("noise_sigma", &self.noise_sigma)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish()
    }
}

impl TargetProblem {
    pub fn new(
        name: impl Into<String>,
        density: Arc<dyn LogDensity>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        ground_truth: GroundTruth,
    ) -> Result<Self> {
        let d = density.dim();
        if d == 0 || lower.len() != d || upper.len() != d || ground_truth.dim() != d {
            return Err(Error::Argument("target pieces disagree on dimension".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Argument("plausible bounds must satisfy lower < upper".into()));
        }
        Ok(Self {
            name: name.into(),
            density,
            noise_sigma: 0.0,
            noise_seed: 0,
            lower,
            upper,
            ground_truth: Arc::new(ground_truth),
        })
    }

    pub fn dimension(&self) -> usize {
        self.density.dim()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    /// Noise-free log-joint.
    pub fn log_joint(&self, theta: &[f64]) -> f64 {
        self.density.log_joint(theta)
    }

    /// Seeds the noise stream family of this problem instance.
    pub fn with_noise_seed(mut self, seed: u64) -> Self {
        self.noise_seed = seed;
        self
    }

    /// Evaluation handle for one worker; each stream index has its own noise
    /// sequence, so results are reproducible for a fixed assignment.
    pub fn evaluator(&self, stream: u64) -> Evaluator<'_> {
        Evaluator {
            target: self,
            rng: stream_rng(self.noise_seed, stream),
            count: 0,
        }
    }
}

/// Counts evaluations and adds the problem's observation noise.
pub struct Evaluator<'a> {
    target: &'a TargetProblem,
    rng: ChaCha8Rng,
    count: usize,
}

impl Evaluator<'_> {
    pub fn eval(&mut self, theta: &[f64]) -> f64 {
        self.count += 1;
        let base = self.target.log_joint(theta);
        if self.target.noise_sigma > 0.0 {
            let e: f64 = self.rng.sample(StandardNormal);
            base + self.target.noise_sigma * e
        } else {
            base
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn target(&self) -> &TargetProblem {
        self.target
    }
}

/// Adds `N(0, sigma²)` noise to every evaluation; ground truth is unchanged.
pub fn with_noise(target: TargetProblem, sigma: f64) -> Result<TargetProblem> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Argument(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    Ok(TargetProblem {
        noise_sigma: sigma,
        ..target
    })
}

struct MixtureDensity(GaussianMixture);

impl LogDensity for MixtureDensity {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_joint(&self, theta: &[f64]) -> f64 {
        self.0.log_pdf_unchecked(theta)
    }
}

/// The 20-component bivariate mixture arranged in four clusters.
pub fn gmm_mixture(seed: u64) -> GaussianMixture {
    let mut rng = stream_rng(seed, 0);
    let mut comps = Vec::with_capacity(GMM_CENTROIDS.len() * GMM_PER_CLUSTER);
    for c in GMM_CENTROIDS {
        for _ in 0..GMM_PER_CLUSTER {
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            let rho = if rng.random_bool(0.5) {
                GMM_CORRELATION
            } else {
                -GMM_CORRELATION
            };
            comps.push(
                GaussianComponent::new(
                    DVector::from_vec(vec![c[0] + e0, c[1] + e1]),
                    DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
                )
                .expect("unit variances with |rho| < 1 are SPD"),
            );
        }
    }
    let k = comps.len();
    GaussianMixture::new(comps, vec![1.0 / k as f64; k]).expect("uniform weights")
}

pub fn build_gmm_target(seed: u64) -> TargetProblem {
    let q = gmm_mixture(seed);
    let truth = GroundTruth::from_mixture(&q, 0.0).expect("mixture ground truth");
    TargetProblem::new(
        "gmm",
        Arc::new(MixtureDensity(q)),
        vec![-GMM_BOUND; 2],
        vec![GMM_BOUND; 2],
        truth,
    )
    .expect("consistent gmm target")
}

/// Narrow annulus `−(r − R)² / (2σ²)` around a fixed centre.
#[derive(Debug, Clone, Copy)]
pub struct RingDensity {
    pub center: [f64; 2],
    pub radius: f64,
    pub width: f64,
}

impl Default for RingDensity {
    fn default() -> Self {
        Self {
            center: RING_CENTER,
            radius: RING_RADIUS,
            width: RING_WIDTH,
        }
    }
}

impl RingDensity {
    #[inline]
    fn radial(&self, r: f64) -> f64 {
        -(r - self.radius).powi(2) / (2.0 * self.width * self.width)
    }

    /// Log-evidence by a polar trapezoid over the band `R ± 5σ`.
    pub fn log_evidence(&self, n_radial: usize, n_angular: usize) -> f64 {
        let rs = linspace(
            self.radius - RING_BAND * self.width,
            self.radius + RING_BAND * self.width,
            n_radial,
        );
        let h_theta = 2.0 * PI / n_angular as f64;
        let radial: Vec<f64> = rs
            .iter()
            .map(|&r| {
                // periodic trapezoid over [0, 2π)
                let ring_sum: f64 = (0..n_angular)
                    .map(|j| {
                        let t = j as f64 * h_theta;
                        let x = [self.center[0] + r * t.cos(), self.center[1] + r * t.sin()];
                        self.log_joint(&x).exp()
                    })
                    .sum();
                ring_sum * h_theta * r
            })
            .collect();
        trapezoid(&rs, &radial).ln()
    }

    /// `E[r²]` under the normalized ring.
    fn second_radial_moment(&self) -> f64 {
        let rs = linspace(
            self.radius - RING_BAND * self.width,
            self.radius + RING_BAND * self.width,
            RING_QUAD_POINTS,
        );
        let w: Vec<f64> = rs.iter().map(|&r| r * self.radial(r).exp()).collect();
        let w3: Vec<f64> = rs.iter().zip(&w).map(|(r, v)| r * r * v).collect();
        trapezoid(&rs, &w3) / trapezoid(&rs, &w)
    }

    /// Marginal density along one axis at offset `dx` from the centre.
    fn marginal_at(&self, dx: f64, log_z: f64) -> f64 {
        let lo = self.radius - 6.0 * self.width;
        let hi = self.radius + 6.0 * self.width;
        let adx = dx.abs();
        if adx >= hi {
            return 0.0;
        }
        let s_lo = (lo * lo - adx * adx).max(0.0).sqrt();
        let s_hi = (hi * hi - adx * adx).sqrt();
        let ss = linspace(s_lo, s_hi, RING_QUAD_POINTS);
        let vals: Vec<f64> = ss
            .iter()
            .map(|&s| self.radial((adx * adx + s * s).sqrt()).exp())
            .collect();
        2.0 * trapezoid(&ss, &vals) / log_z.exp()
    }
}

impl LogDensity for RingDensity {
    fn dim(&self) -> usize {
        2
    }

    fn log_joint(&self, theta: &[f64]) -> f64 {
        let dx = theta[0] - self.center[0];
        let dy = theta[1] - self.center[1];
        self.radial((dx * dx + dy * dy).sqrt())
    }
}

fn ring_ground_truth(ring: &RingDensity) -> GroundTruth {
    let log_z = ring.log_evidence(RING_QUAD_POINTS, RING_QUAD_POINTS);
    let var = 0.5 * ring.second_radial_moment();
    let mean = DVector::from_column_slice(&ring.center);
    let cov = DMatrix::from_diagonal_element(2, 2, var);
    let marginal_grids = (0..2)
        .map(|d| {
            let grid = default_grid(ring.center[d], var.sqrt());
            let density = grid
                .iter()
                .map(|&x| ring.marginal_at(x - ring.center[d], log_z))
                .collect();
            MarginalGrid { grid, density }
        })
        .collect();
    GroundTruth {
        log_marginal_likelihood: log_z,
        reference_samples: None,
        marginal_grids,
        mean,
        cov,
    }
}

pub fn build_ring_target() -> TargetProblem {
    static TRUTH: OnceLock<GroundTruth> = OnceLock::new();
    let ring = RingDensity::default();
    let truth = TRUTH.get_or_init(|| ring_ground_truth(&ring)).clone();
    let half = ring.radius + RING_BAND * ring.width;
    TargetProblem::new(
        "ring",
        Arc::new(ring),
        vec![ring.center[0] - half, ring.center[1] - half],
        vec![ring.center[0] + half, ring.center[1] + half],
        truth,
    )
    .expect("consistent ring target")
}

struct ScaledGaussian {
    component: GaussianComponent,
    log_z: f64,
}

impl LogDensity for ScaledGaussian {
    fn dim(&self) -> usize {
        self.component.dim()
    }

    fn log_joint(&self, theta: &[f64]) -> f64 {
        self.log_z + self.component.log_pdf_unchecked(theta)
    }
}

/// `log_z + log N(θ; μ, Σ)`: a quadratic log-joint with evidence `log_z`.
pub fn build_gaussian_target(
    component: GaussianComponent,
    log_z: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
) -> Result<TargetProblem> {
    let truth = GroundTruth::from_mixture(&GaussianMixture::single(component.clone()), log_z)?;
    TargetProblem::new(
        "gaussian",
        Arc::new(ScaledGaussian { component, log_z }),
        lower,
        upper,
        truth,
    )
}

/// Looks a benchmark up by CLI name.
pub fn by_name(name: &str, seed: u64) -> Result<TargetProblem> {
    match name {
        "gmm" => Ok(build_gmm_target(seed)),
        "ring" => Ok(build_ring_target()),
        other => Err(Error::Argument(format!("unknown benchmark `{other}` (expected gmm or ring)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm_layout() {
        assert_eq!(GMM_CENTROIDS, [[-8.0, -8.0], [-7.0, 7.0], [6.0, -6.0], [5.0, 5.0]]);
        let t = build_gmm_target(0);
        assert_eq!(t.dimension(), 2);
        assert_eq!(t.ground_truth.log_marginal_likelihood, 0.0);
        let q = gmm_mixture(0);
        assert_eq!(q.len(), 20);
        assert!(q.weights().iter().all(|w| (*w - 0.05).abs() < 1e-15));
        for c in q.components() {
            let s = c.cov();
            assert_eq!(s[(0, 0)], 1.0);
            assert_eq!(s[(1, 1)], 1.0);
            assert_eq!(s[(0, 1)].abs(), 0.5);
        }
    }

    #[test]
    fn gmm_seed_determinism() {
        assert_eq!(gmm_mixture(3), gmm_mixture(3));
        assert_ne!(gmm_mixture(3), gmm_mixture(4));
    }

    #[test]
    fn ring_values() {
        let t = build_ring_target();
        assert_eq!(t.log_joint(&[1.0 + 8.0, -2.0]), 0.0);
        let a = 0.7f64;
        let v = t.log_joint(&[1.0 + 8.0 * a.cos(), -2.0 + 8.0 * a.sin()]);
        assert!(v.abs() < 1e-20);
        assert!((t.log_joint(&[1.0, -2.0]) + 3200.0).abs() < 1e-9);
    }

    #[test]
    fn ring_evidence_matches_annulus_approximation() {
        let t = build_ring_target();
        let approx = ((2.0 * PI).powf(1.5) * RING_RADIUS * RING_WIDTH).ln();
        let lml = t.ground_truth.log_marginal_likelihood;
        assert!((lml - approx).abs() < 1e-5, "{lml} vs {approx}");
    }

    #[test]
    fn marginal_grids_normalized() {
        for t in [build_gmm_target(1), build_ring_target()] {
            for g in &t.ground_truth.marginal_grids {
                assert_eq!(g.grid.len(), MARGINAL_GRID_POINTS);
                assert!(g.density.iter().all(|v| *v >= 0.0));
                let z = trapezoid(&g.grid, &g.density);
                assert!((z - 1.0).abs() < 1e-3, "{}: {z}", t.name);
            }
            assert!(t.ground_truth.cov.clone().cholesky().is_some());
        }
    }

    #[test]
    fn noise_wrapper() {
        assert!(with_noise(build_gmm_target(0), -1.0).is_err());
        let base = build_gmm_target(0);
        let quiet = with_noise(base.clone(), 0.0).unwrap();
        let x = [0.3, -1.2];
        let mut ev = quiet.evaluator(0);
        assert_eq!(ev.eval(&x).to_bits(), base.log_joint(&x).to_bits());
        assert_eq!(ev.eval(&x).to_bits(), base.log_joint(&x).to_bits());
        let noisy = with_noise(base, 3.0).unwrap();
        assert_eq!(noisy.noise_sigma(), 3.0);
        let mut a = noisy.evaluator(4);
        let mut b = noisy.evaluator(4);
        let va: Vec<f64> = (0..5).map(|_| a.eval(&x)).collect();
        let vb: Vec<f64> = (0..5).map(|_| b.eval(&x)).collect();
        assert_eq!(va, vb);
        assert_eq!(a.count(), 5);
    }

    #[test]
    fn unknown_benchmark() {
        assert!(by_name("banana", 0).is_err());
    }
}
