use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use stackpost::localfit::RunOutput;
use stackpost::metrics::{bootstrap_median, mmtv};
use stackpost::numerics::stream_rng;
use stackpost::stacking::{naive_stack, optimize, StackConfig};
use stackpost::targets::{build_gmm_target, GMM_PER_CLUSTER};
use stackpost::{GaussianMixture, ParamTransform, TargetProblem};

/// Run holding the components of the given GMM clusters with Monte Carlo
/// expected log-joints.
fn cluster_run(target: &TargetProblem, truth: &GaussianMixture, clusters: &[usize], seed: u64) -> RunOutput {
    let comps: Vec<_> = clusters
        .iter()
        .flat_map(|c| truth.components()[c * GMM_PER_CLUSTER..(c + 1) * GMM_PER_CLUSTER].to_vec())
        .collect();
    let k = comps.len();
    let mut rng = stream_rng(seed, 0);
    let i_hat: Vec<f64> = comps
        .iter()
        .map(|c| (0..20_000).map(|_| target.log_joint(&c.sample(&mut rng))).sum::<f64>() / 20_000.0)
        .collect();
    let q = GaussianMixture::new(comps, vec![1.0 / k as f64; k]).unwrap();
    let e: f64 = i_hat.iter().sum::<f64>() / k as f64;
    let elbo = e + q.entropy_mc(20_000, &mut rng);
    RunOutput::new(q, ParamTransform::identity(2), None, i_hat, DMatrix::zeros(k, k), elbo, true, None).unwrap()
}

#[test]
fn stacking_disjoint_cluster_runs_beats_each_run() {
    let target = build_gmm_target(0);
    let truth = stackpost::targets::gmm_mixture(0);
    let runs = [cluster_run(&target, &truth, &[0, 1], 1), cluster_run(&target, &truth, &[2, 3], 2)];
    let res = optimize(&runs, &StackConfig::default()).unwrap();
    let stacked = mmtv(&res.posterior, &target.ground_truth).unwrap();
    for r in &runs {
        let single = mmtv(&naive_stack(std::slice::from_ref(r)).unwrap(), &target.ground_truth).unwrap();
        assert!(stacked < single, "{stacked} vs {single}");
    }
    assert!(stacked < 0.05, "{stacked}");
    let best = runs.iter().map(|r| r.elbo()).fold(f64::NEG_INFINITY, f64::max);
    assert!(res.elbo >= best - 0.2);
}

#[test]
fn bootstrap_interval_covers_normal_median() {
    let trials = 2000;
    let mut covered = 0;
    for trial in 0..trials {
        let mut rng = stream_rng(trial, 7);
        let draws: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let ci = bootstrap_median(&draws, 10_000, trial).unwrap();
        if ci.lower <= 0.0 && 0.0 <= ci.upper {
            covered += 1;
        }
    }
    assert!(covered as f64 >= 0.93 * trials as f64, "coverage {covered}/{trials}");
}

#[test]
fn degenerate_bootstrap_has_zero_width() {
    let ci = bootstrap_median(&[3.5; 20], 10_000, 1).unwrap();
    assert_eq!((ci.lower, ci.median, ci.upper), (3.5, 3.5, 3.5));
    let ci = bootstrap_median(&(1..=20).map(f64::from).collect::<Vec<_>>(), 10_000, 1).unwrap();
    assert_eq!(ci.median, 10.5);
}
