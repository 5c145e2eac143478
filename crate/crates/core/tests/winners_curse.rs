mod common;

use stackpost::debias::DebiasReport;
use stackpost::numerics::{median, stream_rng};
use stackpost::stacking::{optimize, StackConfig};

const I_TRUE: f64 = -3.0;
const TRIALS: u64 = 30;

/// Median uncapped and component-median-capped ELBO bias over trials.
fn biases(m: usize, j: f64) -> (f64, f64) {
    let truth = I_TRUE + common::standard_entropy_2d();
    let (mut raw, mut capped) = (Vec::new(), Vec::new());
    for trial in 0..TRIALS {
        let runs = common::identical_runs(m, I_TRUE, j, &mut stream_rng(trial, 1000 + m as u64));
        let res = optimize(&runs, &StackConfig { seed: trial, ..StackConfig::default() }).unwrap();
        let report = DebiasReport::new(&res.posterior, &runs, res.entropy).unwrap();
        raw.push(res.elbo - truth);
        capped.push(report.elbo_capped_I - truth);
    }
    (median(&raw), median(&capped))
}

#[test]
fn component_cap_flattens_bias_growth() {
    let (raw2, cap2) = biases(2, 1.0);
    let (raw20, cap20) = biases(20, 1.0);
    assert!(raw20 > raw2 + 0.5, "uncapped {raw2} -> {raw20}");
    assert!(cap20 <= cap2 + 0.5, "capped {cap2} -> {cap20}");
}

#[test]
fn cap_is_inert_without_estimate_noise() {
    for m in [2, 20] {
        let (raw, capped) = biases(m, 0.0);
        assert!((raw - capped).abs() < 0.1, "M={m}: {raw} vs {capped}");
    }
}
