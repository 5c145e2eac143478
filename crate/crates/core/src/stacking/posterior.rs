use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::localfit::RunOutput;
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::numerics::WEIGHT_FLOOR;
use crate::transforms::ParamTransform;

/// Samples used for moments when some transform has a bounded stage.
const MOMENT_SAMPLES: usize = 100_000;

/// One stacked component: where it came from and its corrected `Î`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackEntry {
    pub run: usize,
    pub component: usize,
    pub i_hat: f64,
}

#[derive(Debug)]
pub(crate) struct RunView {
    pub transform: ParamTransform,
    pub components: Vec<GaussianComponent>,
    /// Exact common-space Gaussians when the transform is linear.
    pub common: Option<Vec<GaussianComponent>>,
}

/// Concatenated components of several runs with one logit per component.
#[derive(Debug, Clone)]
pub struct StackedPosterior {
    pub(crate) runs: Arc<Vec<RunView>>,
    entries: Vec<StackEntry>,
    logits: Vec<f64>,
    weights: Vec<f64>,
}

/// `softmax(a)`; `-inf` logits get exactly zero weight.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; a.len()];
    }
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl StackedPosterior {
    /// Stacks `runs` with the given per-entry logits (run-major order).
    pub fn new(runs: &[RunOutput], logits: Vec<f64>) -> Result<Self> {
        let views = Arc::new(views_of(runs)?);
        Self::from_views(views, runs, logits)
    }

    pub(crate) fn from_views(views: Arc<Vec<RunView>>, runs: &[RunOutput], logits: Vec<f64>) -> Result<Self> {
        let entries: Vec<StackEntry> = runs
            .iter()
            .enumerate()
            .flat_map(|(m, r)| {
                r.i_hat().iter().enumerate().map(move |(k, &i)| StackEntry {
                    run: m,
                    component: k,
                    i_hat: i,
                })
            })
            .collect();
        if logits.len() != entries.len() {
            return Err(Error::Argument(format!(
                "{} logits for {} stacked components",
                logits.len(),
                entries.len()
            )));
        }
        if logits.iter().any(|a| a.is_nan() || *a == f64::INFINITY) {
            return Err(Error::Argument("logits must be finite or -inf".into()));
        }
        let weights = softmax(&logits);
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Argument("all logits are -inf".into()));
        }
        Ok(Self {
            runs: views,
            entries,
            logits,
            weights,
        })
    }

    pub(crate) fn with_logits(&self, logits: Vec<f64>) -> Self {
        let weights = softmax(&logits);
        Self {
            runs: Arc::clone(&self.runs),
            entries: self.entries.clone(),
            logits,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.runs[0].transform.dim()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn entries(&self) -> &[StackEntry] {
        &self.entries
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn i_hat(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.i_hat).collect()
    }

    /// Run-space component of an entry.
    pub fn component(&self, entry: usize) -> &GaussianComponent {
        let e = &self.entries[entry];
        &self.runs[e.run].components[e.component]
    }

    pub fn transform(&self, entry: usize) -> &ParamTransform {
        &self.runs[self.entries[entry].run].transform
    }

    /// Common-space density of one entry at `theta`.
    pub fn entry_log_pdf(&self, entry: usize, theta: &[f64]) -> f64 {
        let e = &self.entries[entry];
        let run = &self.runs[e.run];
        match &run.common {
            Some(c) => c[e.component].log_pdf_unchecked(theta),
            None => run
                .transform
                .corrected_log_density(&run.components[e.component], theta)
                .unwrap_or(f64::NEG_INFINITY),
        }
    }

    /// Common-space log-density of the stacked mixture.
    pub fn log_pdf(&self, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.len())
            .filter(|&j| self.weights[j] > WEIGHT_FLOOR)
            .map(|j| self.weights[j].ln() + self.entry_log_pdf(j, theta))
            .collect();
        crate::numerics::log_sum_exp(&terms)
    }

    /// Draws one common-space sample from entry `j`.
    pub fn sample_entry<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Vec<f64> {
        let z = self.component(j).sample(rng);
        self.transform(j).invert_unchecked(&z)
    }

    /// `n` common-space samples from the stacked mixture.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let cdf: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cdf.last().unwrap_or(&1.0);
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let j = cdf.partition_point(|c| *c <= u).min(self.len() - 1);
                let j = (0..=j).rev().find(|&i| self.weights[i] > 0.0).unwrap_or(j);
                self.sample_entry(j, rng)
            })
            .collect()
    }

    /// Exact common-space mixture when every transform is linear.
    pub fn common_mixture(&self) -> Option<GaussianMixture> {
        let mut comps = Vec::new();
        let mut w = Vec::new();
        for (j, e) in self.entries.iter().enumerate() {
            if self.weights[j] <= WEIGHT_FLOOR {
                continue;
            }
            comps.push(self.runs[e.run].common.as_ref()?[e.component].clone());
            w.push(self.weights[j]);
        }
        GaussianMixture::from_unnormalized(comps, w).ok()
    }

    /// Common-space marginal density along `dim` on `grid`.
    pub fn marginal_pdf(&self, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; grid.len()];
        for j in 0..self.len() {
            let w = self.weights[j];
            if w <= WEIGHT_FLOOR {
                continue;
            }
            let p = self.transform(j).marginal_pdf(self.component(j), dim, grid)?;
            for (o, v) in out.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Mean and covariance: analytic for linear transforms, otherwise from
    /// `MOMENT_SAMPLES` draws of the supplied generator.
    pub fn moments<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DMatrix<f64>) {
        if let Some(q) = self.common_mixture() {
            return q.moments();
        }
        let d = self.dim();
        let xs = self.sample(MOMENT_SAMPLES, rng);
        let n = xs.len() as f64;
        let mean = DVector::from_fn(d, |i, _| xs.iter().map(|x| x[i]).sum::<f64>() / n);
        let mut cov = DMatrix::zeros(d, d);
        for x in &xs {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        cov /= n - 1.0;
        (mean, cov)
    }

    /// `Σ w̃ Î`.
    pub fn expected_log_joint(&self) -> f64 {
        self.entries
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(e, w)| w * e.i_hat)
            .sum()
    }
}

pub(crate) fn views_of(runs: &[RunOutput]) -> Result<Vec<RunView>> {
    if runs.is_empty() {
        return Err(Error::Argument("at least one run is required".into()));
    }
    let d = runs[0].dim();
    runs.iter()
        .map(|r| {
            if r.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: r.dim(),
                });
            }
            let common = r
                .posterior()
                .components()
                .iter()
                .map(|c| r.transform().common_space_gaussian(c))
                .collect::<Result<Option<Vec<_>>>>()?;
            Ok(RunView {
                transform: r.transform().clone(),
                components: r.posterior().components().to_vec(),
                common,
            })
        })
        .collect()
}

#[cfg(test)]
impl StackedPosterior {
    pub(crate) fn set_i_hat_for_test(&mut self, entry: usize, value: f64) {
        self.entries[entry].i_hat = value;
    }
}

/// Packed common-space parameters of every entry, for evaluating all
/// entry densities at one point in a single pass.
pub(crate) struct DensityTable {
    dim: usize,
    /// Per entry: mean followed by the packed lower inverse Cholesky factor.
    params: Vec<f64>,
    log_norm: Vec<f64>,
    stride: usize,
    active: Vec<bool>,
}

impl DensityTable {
    /// `None` when some active entry has a non-linear transform.
    pub(crate) fn new(sp: &StackedPosterior) -> Option<Self> {
        let d = sp.dim();
        let stride = d + d * (d + 1) / 2;
        let n = sp.len();
        let mut params = vec![0.0; n * stride];
        let mut log_norm = vec![f64::NEG_INFINITY; n];
        let mut active = vec![false; n];
        for (j, e) in sp.entries().iter().enumerate() {
            if sp.logits()[j] == f64::NEG_INFINITY {
                continue;
            }
            let c = &sp.runs[e.run].common.as_ref()?[e.component];
            let (inv, ln) = c.whitening();
            let p = &mut params[j * stride..(j + 1) * stride];
            p[..d].copy_from_slice(c.mean().as_slice());
            let mut o = d;
            for r in 0..d {
                for col in 0..=r {
                    p[o] = inv[r * d + col];
                    o += 1;
                }
            }
            log_norm[j] = ln;
            active[j] = true;
        }
        Some(Self {
            dim: d,
            params,
            log_norm,
            stride,
            active,
        })
    }

    /// Writes every entry's log-density at `x` into `out`; inactive entries get `-inf`.
    pub(crate) fn row(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        if d == 2 {
            for (j, (p, o)) in self.params.chunks_exact(self.stride).zip(out.iter_mut()).enumerate() {
                let u = x[0] - p[0];
                let v = x[1] - p[1];
                let a = p[2] * u;
                let b = p[3] * u + p[4] * v;
                *o = self.log_norm[j] - 0.5 * (a * a + b * b);
            }
            return;
        }
        let mut diff = vec![0.0; d];
        for (j, (p, o)) in self.params.chunks_exact(self.stride).zip(out.iter_mut()).enumerate() {
            if !self.active[j] {
                *o = f64::NEG_INFINITY;
                continue;
            }
            for i in 0..d {
                diff[i] = x[i] - p[i];
            }
            let mut acc = 0.0;
            let mut o2 = d;
            for r in 0..d {
                let mut v = 0.0;
                for c in 0..=r {
                    v += p[o2] * diff[c];
                    o2 += 1;
                }
                acc += v * v;
            }
            *o = self.log_norm[j] - 0.5 * acc;
        }
    }
}
