//! Local-fit artifacts: the run record, its JSON file format, filtering, and a
//! simplified surrogate-based fitter.

mod fit;
mod vi;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mixture::{GaussianComponent, GaussianMixture};
use crate::numerics::stream_rng;
use crate::transforms::{ParamTransform, TransformData};

pub use fit::{run_local_fit, FitConfig};

/// Default cap on per-component BQ variance used by [`filter_runs`].
pub const DEFAULT_VAR_CAP: f64 = 5.0;

/// Samples per component used when a run file only carries `L_hat` and the
/// transform is nonlinear.
const IMPORT_CORRECTION_SAMPLES: usize = 4000;
const IMPORT_CORRECTION_SEED: u64 = 0x1a7_c0de;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub evaluations: usize,
}

/// One local fit: a mixture in the run's own coordinates plus its transform,
/// BQ estimates and ELBO.
#[derive(Debug, Clone)]
pub struct RunOutput {
    posterior: GaussianMixture,
    transform: ParamTransform,
    l_hat: Option<Vec<f64>>,
    i_hat: Vec<f64>,
    j: DMatrix<f64>,
    elbo: f64,
    converged: bool,
    diagnostics: Option<Diagnostics>,
}

impl RunOutput {
    /// Validates and assembles a run. `i_hat` must already be in common-space
    /// form; use [`RunOutput::from_transformed`] when only `L̂` is known.
    pub fn new(
        posterior: GaussianMixture,
        transform: ParamTransform,
        l_hat: Option<Vec<f64>>,
        i_hat: Vec<f64>,
        j: DMatrix<f64>,
        elbo: f64,
        converged: bool,
        diagnostics: Option<Diagnostics>,
    ) -> Result<Self> {
        let k = posterior.len();
        if transform.dim() != posterior.dim() {
            return Err(Error::Validation(format!(
                "transform dimension {} differs from posterior dimension {}",
                transform.dim(),
                posterior.dim()
            )));
        }
        if i_hat.len() != k || l_hat.as_ref().is_some_and(|l| l.len() != k) {
            return Err(Error::Validation(format!("expected {k} expected-log-joint entries")));
        }
        if j.nrows() != k || j.ncols() != k {
            return Err(Error::Validation(format!(
                "J must be {k}×{k}, got {}×{}",
                j.nrows(),
                j.ncols()
            )));
        }
        let finite = i_hat.iter().chain(l_hat.iter().flatten()).chain(j.iter()).all(|v| v.is_finite());
        if !finite || !elbo.is_finite() {
            return Err(Error::Validation("non-finite estimates".into()));
        }
        let scale = j.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for a in 0..k {
            for b in 0..a {
                if (j[(a, b)] - j[(b, a)]).abs() > 1e-8 * scale {
                    return Err(Error::Validation(format!("J not symmetric at ({a}, {b})")));
                }
            }
        }
        Ok(Self {
            posterior,
            transform,
            l_hat,
            i_hat,
            j,
            elbo,
            converged,
            diagnostics,
        })
    }

    /// Builds a run from transformed-space estimates `L̂`, applying the
    /// Jacobian correction with deterministic per-component samples.
    pub fn from_transformed(
        posterior: GaussianMixture,
        transform: ParamTransform,
        l_hat: Vec<f64>,
        j: DMatrix<f64>,
        elbo: f64,
        converged: bool,
        diagnostics: Option<Diagnostics>,
    ) -> Result<Self> {
        if l_hat.len() != posterior.len() {
            return Err(Error::Validation(format!(
                "expected {} L_hat entries, got {}",
                posterior.len(),
                l_hat.len()
            )));
        }
        let i_hat = correct_all(&posterior, &transform, &l_hat)?;
        Self::new(posterior, transform, Some(l_hat), i_hat, j, elbo, converged, diagnostics)
    }

    pub fn dim(&self) -> usize {
        self.posterior.dim()
    }

    pub fn len(&self) -> usize {
        self.posterior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posterior.is_empty()
    }

    pub fn posterior(&self) -> &GaussianMixture {
        &self.posterior
    }

    pub fn transform(&self) -> &ParamTransform {
        &self.transform
    }

    pub fn l_hat(&self) -> Option<&[f64]> {
        self.l_hat.as_deref()
    }

    pub fn i_hat(&self) -> &[f64] {
        &self.i_hat
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn elbo(&self) -> f64 {
        self.elbo
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn diagnostics(&self) -> Option<Diagnostics> {
        self.diagnostics
    }

    /// Largest per-component BQ variance.
    pub fn max_variance(&self) -> f64 {
        self.j.diagonal().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Σ_k w_k Î_k`.
    pub fn expected_log_joint(&self) -> f64 {
        self.posterior.weights().iter().zip(&self.i_hat).map(|(w, i)| w * i).sum()
    }

    /// Monte Carlo entropy of the posterior mapped to common space.
    pub fn common_entropy_mc<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> f64 {
        let mut acc = 0.0;
        for _ in 0..n {
            let k = self.posterior.pick_component(rng);
            let z = self.posterior.components()[k].sample(rng);
            acc += self.posterior.log_pdf_unchecked(&z) - self.transform.log_abs_det_jacobian_inverse(&z);
        }
        -acc / n as f64
    }

    /// Replaces `Î` (and the derived ELBO) with externally supplied values.
    pub fn with_i_hat(mut self, i_hat: Vec<f64>, elbo: f64) -> Result<Self> {
        if i_hat.len() != self.len() {
            return Err(Error::Validation("Î length differs from component count".into()));
        }
        self.i_hat = i_hat;
        self.elbo = elbo;
        self.l_hat = None;
        Ok(self)
    }

    fn to_file(&self) -> RunFile {
        let data = self.posterior.to_data();
        RunFile {
            dimension: self.dim(),
            weights: data.weights,
            means: data.means,
            covariances: data.covariances,
            transform: self.transform.to_data(),
            l_hat: self.l_hat.clone(),
            i_hat: Some(self.i_hat.clone()),
            j: (0..self.len()).map(|a| self.j.row(a).iter().copied().collect()).collect(),
            elbo: self.elbo,
            converged: self.converged,
            diagnostics: self.diagnostics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            field: "<document>".into(),
            reason: e.to_string(),
        })?;
        from_value(value)
    }
}

fn correct_all(posterior: &GaussianMixture, transform: &ParamTransform, l_hat: &[f64]) -> Result<Vec<f64>> {
    let mut rng = stream_rng(IMPORT_CORRECTION_SEED, 0);
    posterior
        .components()
        .iter()
        .zip(l_hat)
        .map(|(c, &l)| {
            let n = if transform.is_linear() { 1 } else { IMPORT_CORRECTION_SAMPLES };
            let samples: Vec<Vec<f64>> = (0..n).map(|_| c.sample(&mut rng)).collect();
            transform.correct_expected_log_joint(l, &samples)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct RunFile {
    dimension: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    transform: TransformData,
    #[serde(rename = "L_hat", skip_serializing_if = "Option::is_none")]
    l_hat: Option<Vec<f64>>,
    #[serde(rename = "I_hat", skip_serializing_if = "Option::is_none")]
    i_hat: Option<Vec<f64>>,
    #[serde(rename = "J")]
    j: Vec<Vec<f64>>,
    elbo: f64,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostics: Option<Diagnostics>,
}

fn take<T: serde::de::DeserializeOwned>(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<T> {
    let v = obj.remove(key).ok_or_else(|| Error::Parse {
        field: key.into(),
        reason: "missing".into(),
    })?;
    serde_json::from_value(v).map_err(|e| Error::Parse {
        field: key.into(),
        reason: e.to_string(),
    })
}

fn take_opt<T: serde::de::DeserializeOwned>(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<Option<T>> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| Error::Parse {
            field: key.into(),
            reason: e.to_string(),
        }),
    }
}

fn from_value(value: Value) -> Result<RunOutput> {
    let Value::Object(mut obj) = value else {
        return Err(Error::Parse {
            field: "<document>".into(),
            reason: "expected a JSON object".into(),
        });
    };
    let dimension: usize = take(&mut obj, "dimension")?;
    let weights: Vec<f64> = take(&mut obj, "weights")?;
    let means: Vec<Vec<f64>> = take(&mut obj, "means")?;
    let covariances: Vec<Vec<Vec<f64>>> = take(&mut obj, "covariances")?;
    let transform: TransformData = take(&mut obj, "transform")?;
    let l_hat: Option<Vec<f64>> = take_opt(&mut obj, "L_hat")?;
    let i_hat: Option<Vec<f64>> = take_opt(&mut obj, "I_hat")?;
    let j_rows: Vec<Vec<f64>> = take(&mut obj, "J")?;
    let elbo: f64 = take(&mut obj, "elbo")?;
    let converged: bool = take(&mut obj, "converged")?;
    let diagnostics: Option<Diagnostics> = take_opt(&mut obj, "diagnostics")?;

    if dimension == 0 {
        return Err(Error::Parse {
            field: "dimension".into(),
            reason: "must be positive".into(),
        });
    }
    let k = weights.len();
    if means.len() != k || covariances.len() != k {
        return Err(Error::Validation(format!(
            "{k} weights but {} means and {} covariances",
            means.len(),
            covariances.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("weights must lie on the simplex (sum = {total})")));
    }
    let mut comps = Vec::with_capacity(k);
    for (idx, (m, c)) in means.iter().zip(&covariances).enumerate() {
        if m.len() != dimension || c.len() != dimension || c.iter().any(|r| r.len() != dimension) {
            return Err(Error::Validation(format!("component {idx} does not have dimension {dimension}")));
        }
        let cov = DMatrix::from_row_iterator(dimension, dimension, c.iter().flatten().copied());
        let comp = GaussianComponent::new(DVector::from_column_slice(m), cov)
            .map_err(|e| Error::Validation(format!("component {idx}: {e}")))?;
        comps.push(comp);
    }
    // weights may be off by rounding; renormalize exactly
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let posterior = GaussianMixture::new(comps, weights)?;
    let transform = ParamTransform::from_data(&transform, dimension)?;
    if j_rows.len() != k || j_rows.iter().any(|r| r.len() != k) {
        return Err(Error::Validation(format!("J must be {k}×{k}")));
    }
    let j = DMatrix::from_row_iterator(k, k, j_rows.into_iter().flatten());
    match (i_hat, l_hat) {
        (Some(i), l) => RunOutput::new(posterior, transform, l, i, j, elbo, converged, diagnostics),
        (None, Some(l)) => RunOutput::from_transformed(posterior, transform, l, j, elbo, converged, diagnostics),
        (None, None) => Err(Error::Parse {
            field: "L_hat/I_hat".into(),
            reason: "at least one of L_hat or I_hat is required".into(),
        }),
    }
}

/// Reads and validates a run file.
pub fn import_run(path: impl AsRef<Path>) -> Result<RunOutput> {
    let text = std::fs::read_to_string(path)?;
    RunOutput::from_json(&text)
}

pub fn export_run(run: &RunOutput, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, run.to_json()?)?;
    Ok(())
}

/// Keeps converged runs whose largest component variance is below `var_cap`.
pub fn filter_runs(runs: Vec<RunOutput>, var_cap: f64) -> Vec<RunOutput> {
    runs.into_iter()
        .filter(|r| r.converged() && r.max_variance() < var_cap)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_run(converged: bool, jmax: f64) -> RunOutput {
        let q = GaussianMixture::new(
            vec![
                GaussianComponent::from_diag(&[0.0, 1.0], &[1.0, 2.0]).unwrap(),
                GaussianComponent::from_diag(&[2.0, -1.0], &[0.5, 0.5]).unwrap(),
            ],
            vec![0.4, 0.6],
        )
        .unwrap();
        let j = DMatrix::from_row_slice(2, 2, &[jmax, 0.1, 0.1, 0.3]);
        RunOutput::new(q, ParamTransform::identity(2), None, vec![-1.0, -2.0], j, -3.5, converged, None).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let run = toy_run(true, 0.2);
        let back = RunOutput::from_json(&run.to_json().unwrap()).unwrap();
        assert_eq!(back.i_hat(), run.i_hat());
        assert_eq!(back.j(), run.j());
        assert_eq!(back.posterior(), run.posterior());
        assert_eq!(back.elbo(), run.elbo());
    }

    #[test]
    fn filter_examples() {
        assert!(filter_runs(vec![], DEFAULT_VAR_CAP).is_empty());
        let kept = filter_runs(
            vec![toy_run(true, 5.1), toy_run(false, 0.1), toy_run(true, 4.9)],
            DEFAULT_VAR_CAP,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].j()[(0, 0)], 4.9);
    }

    #[test]
    fn bad_weights_rejected() {
        let mut v: Value = serde_json::from_str(&toy_run(true, 0.2).to_json().unwrap()).unwrap();
        v["weights"] = serde_json::json!([0.3, 0.6]);
        let err = RunOutput::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn parse_error_names_field() {
        let mut v: Value = serde_json::from_str(&toy_run(true, 0.2).to_json().unwrap()).unwrap();
        v["elbo"] = serde_json::json!("high");
        match RunOutput::from_json(&v.to_string()).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "elbo"),
            other => panic!("unexpected {other}"),
        }
        v.as_object_mut().unwrap().remove("J");
        match RunOutput::from_json(&v.to_string()).unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "J"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_spd_covariance_rejected() {
        let mut v: Value = serde_json::from_str(&toy_run(true, 0.2).to_json().unwrap()).unwrap();
        v["covariances"][0] = serde_json::json!([[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(RunOutput::from_json(&v.to_string()), Err(Error::Validation(_))));
    }

    #[test]
    fn l_hat_only_file_is_corrected() {
        let mut v: Value = serde_json::from_str(&toy_run(true, 0.2).to_json().unwrap()).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("I_hat");
        obj.insert("L_hat".into(), serde_json::json!([1.0, 2.0]));
        obj.insert(
            "transform".into(),
            serde_json::json!({"kind": "affine", "A": [[2.0, 0.0], [0.0, 2.0]], "b": [0.0, 0.0]}),
        );
        let run = RunOutput::from_json(&v.to_string()).unwrap();
        let l4 = 4f64.ln();
        assert!((run.i_hat()[0] - (1.0 + l4)).abs() < 1e-12);
        assert!((run.i_hat()[1] - (2.0 + l4)).abs() < 1e-12);
    }

    #[test]
    fn fifty_component_file_accepted() {
        let k = 50;
        let comps: Vec<GaussianComponent> = (0..k)
            .map(|i| GaussianComponent::from_diag(&[i as f64, 0.0], &[1.0, 1.0]).unwrap())
            .collect();
        let q = GaussianMixture::new(comps, vec![1.0 / k as f64; k]).unwrap();
        let run = RunOutput::new(
            q,
            ParamTransform::identity(2),
            None,
            vec![0.0; k],
            DMatrix::identity(k, k) * 0.01,
            0.0,
            true,
            None,
        )
        .unwrap();
        let back = RunOutput::from_json(&run.to_json().unwrap()).unwrap();
        assert_eq!(back.j().shape(), (50, 50));
    }
}
