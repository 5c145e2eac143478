mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stackpost::debias::capped_elbo;
use stackpost::harness::replicate_subset;
use stackpost::metrics::{bootstrap_median, gskl_moments, mmtv};
use stackpost::numerics::{linspace, stream_rng};
use stackpost::stacking::{naive_stack, optimize, softmax, StackConfig};
use stackpost::targets::MarginalGrid;
use stackpost::{GaussianComponent, GaussianMixture, GroundTruth};

use common::mixture_run;

fn mixture_1d(means: &[f64], sds: &[f64], weights: &[f64]) -> GaussianMixture {
    let comps = means
        .iter()
        .zip(sds)
        .map(|(&m, &s)| GaussianComponent::from_diag(&[m], &[s * s]).unwrap())
        .collect();
    GaussianMixture::from_unnormalized(comps, weights.to_vec()).unwrap()
}

/// Ground truth tabulated on an explicit grid.
fn truth_on(q: &GaussianMixture, grid: &[f64]) -> GroundTruth {
    let (mean, cov) = q.moments();
    GroundTruth {
        log_marginal_likelihood: 0.0,
        reference_samples: None,
        marginal_grids: vec![MarginalGrid {
            grid: grid.to_vec(),
            density: q.marginal_pdf(0, grid).unwrap(),
        }],
        mean,
        cov,
    }
}

fn arb_mixture_1d() -> impl Strategy<Value = GaussianMixture> {
    prop::collection::vec((-3.0..3.0f64, 0.3..2.0f64, 0.1..1.0f64), 1..4).prop_map(|c| {
        let (m, rest): (Vec<f64>, Vec<(f64, f64)>) = c.into_iter().map(|(a, b, w)| (a, (b, w))).unzip();
        let (s, w): (Vec<f64>, Vec<f64>) = rest.into_iter().unzip();
        mixture_1d(&m, &s, &w)
    })
}

fn arb_spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_vec(d, d, v);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    })
}

proptest! {
    #[test]
    fn softmax_stays_on_simplex(
        logits in prop::collection::vec(-50.0..50.0f64, 1..12),
        dead in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut a = logits.clone();
        for (i, v) in a.iter_mut().enumerate().skip(1) {
            if dead[i] {
                *v = f64::NEG_INFINITY;
            }
        }
        let w = softmax(&a);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        for (wi, ai) in w.iter().zip(&a) {
            if *ai == f64::NEG_INFINITY {
                prop_assert_eq!(*wi, 0.0);
            }
        }
    }

    #[test]
    fn naive_weights_split_evenly_across_runs(
        layout in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 1..5), 1..6),
    ) {
        let runs: Vec<_> = layout.iter().map(|m| mixture_run(m, vec![0.0; m.len()])).collect();
        let sp = naive_stack(&runs).unwrap();
        let mut per_run = vec![0.0; runs.len()];
        for (e, w) in sp.entries().iter().zip(sp.weights()) {
            per_run[e.run] += w;
        }
        for s in per_run {
            prop_assert!((s - 1.0 / runs.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn mmtv_is_symmetric_on_shared_grids(p in arb_mixture_1d(), q in arb_mixture_1d()) {
        let grid = linspace(-20.0, 20.0, 4001);
        let (tp, tq) = (truth_on(&p, &grid), truth_on(&q, &grid));
        let a = mmtv(&tq, &tp).unwrap();
        let b = mmtv(&tp, &tq).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn mmtv_is_stable_under_grid_refinement(p in arb_mixture_1d(), q in arb_mixture_1d()) {
        let coarse = mmtv(&q, &truth_on(&p, &linspace(-12.0, 12.0, 2000))).unwrap();
        let fine = mmtv(&q, &truth_on(&p, &linspace(-12.0, 12.0, 4000))).unwrap();
        prop_assert!((coarse - fine).abs() < 1e-3);
    }

    #[test]
    fn gskl_is_affine_invariant(
        mq in prop::collection::vec(-3.0..3.0f64, 2),
        mp in prop::collection::vec(-3.0..3.0f64, 2),
        cq in arb_spd(2),
        cp in arb_spd(2),
        a in prop::collection::vec(-2.0..2.0f64, 4),
        b in prop::collection::vec(-5.0..5.0f64, 2),
    ) {
        let a = DMatrix::from_vec(2, 2, a);
        prop_assume!(a.determinant().abs() > 0.1);
        let b = DVector::from_vec(b);
        let (mq, mp) = (DVector::from_vec(mq), DVector::from_vec(mp));
        let base = gskl_moments(&mq, &cq, &mp, &cp).unwrap();
        let mapped = gskl_moments(
            &(&a * &mq + &b),
            &(&a * &cq * a.transpose()),
            &(&a * &mp + &b),
            &(&a * &cp * a.transpose()),
        )
        .unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - mapped).abs() < 1e-8 * base.max(1.0), "{} vs {}", base, mapped);
    }

    #[test]
    fn capping_only_lowers_the_elbo(
        layout in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 1..4), 1..5),
        seed in 0u64..1000,
    ) {
        let runs: Vec<_> = layout.iter().map(|i| mixture_run(&vec![0.0; i.len()], i.clone())).collect();
        let sp = naive_stack(&runs).unwrap();
        let r = capped_elbo(&sp, &runs, 50, &mut stream_rng(seed, 0)).unwrap();
        prop_assert!(r.elbo_capped_I <= r.uncapped());
        prop_assert_eq!(r.elbo_capped_I == r.uncapped(), r.E_stacked <= r.I_median);
        prop_assert_eq!(r.elbo_capped_I, r.E_stacked.min(r.I_median) + r.entropy_used);
        prop_assert_eq!(r.elbo_capped_E, r.E_stacked.min(r.E_median) + r.entropy_used);
    }

    #[test]
    fn capping_leaves_metrics_untouched(
        layout in prop::collection::vec(prop::collection::vec(-4.0..4.0f64, 1..4), 1..4),
    ) {
        let runs: Vec<_> = layout.iter().map(|m| mixture_run(m, m.iter().map(|v| -v * v).collect())).collect();
        let sp = naive_stack(&runs).unwrap();
        let truth = GroundTruth::from_mixture(&mixture_1d(&[0.0], &[2.0], &[1.0]), 0.0).unwrap();
        let before = (mmtv(&sp, &truth).unwrap(), stackpost::metrics::gskl(&sp, &truth).unwrap());
        let weights = sp.weights().to_vec();
        capped_elbo(&sp, &runs, 20, &mut stream_rng(1, 0)).unwrap();
        let after = (mmtv(&sp, &truth).unwrap(), stackpost::metrics::gskl(&sp, &truth).unwrap());
        prop_assert_eq!(before.0.to_bits(), after.0.to_bits());
        prop_assert_eq!(before.1.to_bits(), after.1.to_bits());
        prop_assert_eq!(weights, sp.weights().to_vec());
    }

    #[test]
    fn bootstrap_interval_brackets_median(
        values in prop::collection::vec(-100.0..100.0f64, 2..30),
        seed in any::<u64>(),
    ) {
        let ci = bootstrap_median(&values, 500, seed).unwrap();
        prop_assert!(ci.lower <= ci.median && ci.median <= ci.upper);
        prop_assert_eq!(ci, bootstrap_median(&values, 500, seed).unwrap());
    }

    #[test]
    fn replicate_subsets_have_distinct_runs(master in any::<u64>(), pool in 1usize..120, r in 0usize..50, frac in 0.0..1.0f64) {
        let m = ((pool as f64 * frac) as usize).max(1);
        let mut idx = replicate_subset(master, pool, m, r);
        prop_assert_eq!(idx.len(), m);
        prop_assert!(idx.iter().all(|&i| i < pool));
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn optimized_weights_stay_on_simplex(
        layout in prop::collection::vec(prop::collection::vec((-6.0..6.0f64, -3.0..0.0f64), 1..4), 1..4),
        seed in 0u64..100,
    ) {
        let runs: Vec<_> = layout
            .iter()
            .map(|c| {
                let (m, i): (Vec<f64>, Vec<f64>) = c.iter().copied().unzip();
                mixture_run(&m, i)
            })
            .collect();
        let res = optimize(&runs, &StackConfig { seed, max_iterations: 1000, ..StackConfig::default() }).unwrap();
        let w = res.posterior.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!(res.trace.iter().all(|t| t.elbo_estimate.is_finite()));
    }

    #[test]
    fn windowed_elbo_trace_does_not_decrease(
        means in prop::collection::vec(-8.0..8.0f64, 2..6),
        seed in 0u64..100,
    ) {
        let runs: Vec<_> = means.iter().map(|&m| mixture_run(&[m], vec![-0.1 * m * m])).collect();
        let res = optimize(&runs, &StackConfig { seed, ..StackConfig::default() }).unwrap();
        let window_means: Vec<f64> = res
            .trace
            .chunks_exact(200)
            .map(|c| c.iter().map(|t| t.elbo_estimate).sum::<f64>() / 200.0)
            .collect();
        for pair in window_means.windows(2) {
            prop_assert!(pair[1] > pair[0] - 0.5, "{:?}", window_means);
        }
    }

    #[test]
    fn run_order_does_not_matter(
        means in prop::collection::vec(-8.0..8.0f64, 2..5),
        seed in 0u64..100,
    ) {
        let runs: Vec<_> = means.iter().map(|&m| mixture_run(&[m, m + 1.0], vec![-0.1 * m * m, -0.1 * (m + 1.0).powi(2)])).collect();
        let mut reversed = runs.clone();
        reversed.reverse();
        let cfg = StackConfig { seed, ..StackConfig::default() };
        let a = optimize(&runs, &cfg).unwrap().elbo;
        let b = optimize(&reversed, &cfg).unwrap().elbo;
        prop_assert!((a - b).abs() < 0.1, "{} vs {}", a, b);
    }
}
