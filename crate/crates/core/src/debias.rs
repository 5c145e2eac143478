//! Post-hoc caps on the stacked expected log-joint.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localfit::RunOutput;
use crate::numerics::median;
use crate::stacking::{entropy_mc, StackedPosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasMode {
    None,
    RunMedian,
    #[default]
    ComponentMedian,
}

impl std::str::FromStr for DebiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "run-median" => Ok(Self::RunMedian),
            "component-median" => Ok(Self::ComponentMedian),
            other => Err(Error::Argument(format!(
                "unknown debias mode `{other}` (none, run-median, component-median)"
            ))),
        }
    }
}

impl std::fmt::Display for DebiasMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::RunMedian => "run-median",
            Self::ComponentMedian => "component-median",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct DebiasReport {
    pub E_stacked: f64,
    pub E_median: f64,
    pub I_median: f64,
    pub elbo_capped_E: f64,
    pub elbo_capped_I: f64,
    pub entropy_used: f64,
}

impl DebiasReport {
    /// Assembles the report from a stacked posterior, the runs it was built
    /// from and an entropy estimate.
    pub fn new(sp: &StackedPosterior, runs: &[RunOutput], entropy: f64) -> Result<Self> {
        let e = e_stacked(sp);
        let e_med = cap_run_median(runs)?;
        let i_med = cap_component_median(runs)?;
        Ok(Self {
            E_stacked: e,
            E_median: e_med,
            I_median: i_med,
            elbo_capped_E: capped(e, e_med, entropy),
            elbo_capped_I: capped(e, i_med, entropy),
            entropy_used: entropy,
        })
    }

    pub fn uncapped(&self) -> f64 {
        self.E_stacked + self.entropy_used
    }

    /// ELBO reported under `mode`.
    pub fn elbo(&self, mode: DebiasMode) -> f64 {
        match mode {
            DebiasMode::None => self.uncapped(),
            DebiasMode::RunMedian => self.elbo_capped_E,
            DebiasMode::ComponentMedian => self.elbo_capped_I,
        }
    }
}

/// `Σ w̃ Î` over the stacked entries.
pub fn e_stacked(sp: &StackedPosterior) -> f64 {
    sp.expected_log_joint()
}

/// Median over runs of `E_m = Σ_k w_{m,k} Î_{m,k}`.
pub fn cap_run_median(runs: &[RunOutput]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Argument("at least one run is required".into()));
    }
    let e: Vec<f64> = runs.iter().map(|r| r.expected_log_joint()).collect();
    Ok(median(&e))
}

/// Median of `Î` pooled over every component of every run.
pub fn cap_component_median(runs: &[RunOutput]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::Argument("at least one run is required".into()));
    }
    let i: Vec<f64> = runs.iter().flat_map(|r| r.i_hat().iter().copied()).collect();
    Ok(median(&i))
}

/// `min(E, cap) + entropy`.
pub fn capped(e_stacked: f64, cap: f64, entropy: f64) -> f64 {
    e_stacked.min(cap) + entropy
}

/// Re-estimates the entropy with `s` samples per entry and reports all caps.
pub fn capped_elbo(sp: &StackedPosterior, runs: &[RunOutput], s: usize, rng: &mut ChaCha8Rng) -> Result<DebiasReport> {
    let h = entropy_mc(sp, s, rng)?;
    DebiasReport::new(sp, runs, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{GaussianComponent, GaussianMixture};
    use crate::numerics::stream_rng;
    use crate::stacking::naive_stack;
    use crate::transforms::ParamTransform;
    use nalgebra::DMatrix;

    fn run(i_hat: Vec<f64>) -> RunOutput {
        let k = i_hat.len();
        let comps = (0..k).map(|j| GaussianComponent::from_diag(&[j as f64], &[1.0]).unwrap()).collect();
        let q = GaussianMixture::new(comps, vec![1.0 / k as f64; k]).unwrap();
        RunOutput::new(q, ParamTransform::identity(1), None, i_hat, DMatrix::zeros(k, k), 0.0, true, None).unwrap()
    }

    #[test]
    fn e_stacked_examples() {
        assert_eq!(e_stacked(&naive_stack(&[run(vec![2.0])]).unwrap()), 2.0);
        assert!((e_stacked(&naive_stack(&[run(vec![1.0, 3.0])]).unwrap()) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn run_median_examples() {
        let runs = [run(vec![1.0]), run(vec![2.0]), run(vec![9.0])];
        assert_eq!(cap_run_median(&runs).unwrap(), 2.0);
        assert_eq!(cap_run_median(&runs[..1]).unwrap(), 1.0);
        assert_eq!(cap_run_median(&[run(vec![1.0]), run(vec![3.0])]).unwrap(), 2.0);
        assert!(cap_run_median(&[]).is_err());
    }

    #[test]
    fn component_median_examples() {
        assert_eq!(cap_component_median(&[run(vec![0.0, 10.0]), run(vec![5.0])]).unwrap(), 5.0);
        assert_eq!(cap_component_median(&[run(vec![4.0; 3]), run(vec![4.0; 2])]).unwrap(), 4.0);
        let pooled: Vec<f64> = (0..100).map(f64::from).collect();
        let runs = [run(pooled[..50].to_vec()), run(pooled[50..].to_vec())];
        assert_eq!(cap_component_median(&runs).unwrap(), 49.5);
    }

    #[test]
    fn capped_formula() {
        assert_eq!(capped(10.0, 7.0, 2.0), 9.0);
        assert_eq!(capped(5.0, 7.0, 2.0), 7.0);
    }

    #[test]
    fn report_never_exceeds_uncapped() {
        let runs = [run(vec![1.0, 3.0]), run(vec![0.0])];
        let sp = naive_stack(&runs).unwrap();
        let r = capped_elbo(&sp, &runs, 100, &mut stream_rng(0, 0)).unwrap();
        assert!(r.elbo_capped_I <= r.uncapped());
        assert_eq!(r.elbo_capped_I, r.E_stacked.min(r.I_median) + r.entropy_used);
        assert_eq!(r.elbo(DebiasMode::None), r.uncapped());
    }

    #[test]
    fn mode_parses() {
        for m in [DebiasMode::None, DebiasMode::RunMedian, DebiasMode::ComponentMedian] {
            assert_eq!(m.to_string().parse::<DebiasMode>().unwrap(), m);
        }
    }
}
