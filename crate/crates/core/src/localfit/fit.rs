//! Simplified active-sampling fitter: GP surrogate, variance-times-density
//! acquisition, diagonal variational mixture, periodic whitening.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::vi::{DiagMixture, ParamBox};
use super::{Diagnostics, RunOutput};
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::numerics::stream_rng;
use crate::surrogate::{bq_expected_log_joint, gp_fit, GpFitOptions, GpHypers, GpModel};
use crate::targets::TargetProblem;
use crate::transforms::ParamTransform;

const NOISE_FLOOR: f64 = 1e-5;
const SHAPING_FACTOR: f64 = 0.05;
const ELBO_SAMPLES: usize = 100;
const FINAL_ENTROPY_SAMPLES: usize = 4000;
const CANDIDATES: usize = 200;
const PRUNE_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub k_target: usize,
    pub budget: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Size of the initial local batch.
    pub init_points: usize,
    /// Evaluations acquired per outer iteration.
    pub batch_size: usize,
    /// Relative ELBO change tolerance for the convergence flag.
    pub convergence_tol: f64,
    /// Absolute ELBO change (nats) always accepted as stable.
    pub convergence_abs_tol: f64,
    /// Number of consecutive stable outer iterations required.
    pub convergence_window: usize,
    /// Rewhiten the working coordinates every this many outer iterations.
    pub whiten_every: usize,
    /// Variational ascent steps per outer iteration.
    pub vi_steps: usize,
    /// Exponent on the variational density in the acquisition score.
    pub density_power: f64,
}

impl FitConfig {
    /// Defaults for a target: `50(D+2)` evaluations when noiseless and
    /// `75(D+2)` when noisy, 50 components.
    pub fn for_target(target: &TargetProblem, seed: u64) -> Self {
        let d = target.dimension();
        let noisy = target.noise_sigma() > 0.0;
        Self {
            k_target: 50,
            budget: if noisy { 75 } else { 50 } * (d + 2),
            lower: target.lower.clone(),
            upper: target.upper.clone(),
            seed,
            noise_sigma: target.noise_sigma(),
            init_points: 10.max(2 * (d + 2)),
            batch_size: 5 * d,
            convergence_tol: 1e-3,
            convergence_abs_tol: 0.1,
            convergence_window: 3,
            whiten_every: 3,
            vi_steps: 300,
            density_power: if noisy { 0.5 } else { 1.0 },
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.k_target < 1 {
            return Err(Error::Argument("K_target must be at least 1".into()));
        }
        if self.budget < 10 * d {
            return Err(Error::Argument(format!("budget {} below 10·D = {}", self.budget, 10 * d)));
        }
        if self.lower.len() != d || self.upper.len() != d || self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(Error::Argument("init box must satisfy lower < upper in every dimension".into()));
        }
        if self.init_points < d + 2 || self.batch_size == 0 || self.init_points > self.budget {
            return Err(Error::Argument("init_points must be in [D + 2, budget] and batch_size positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument("noise_sigma must be nonnegative".into()));
        }
        if !(self.density_power >= 0.0) {
            return Err(Error::Argument("density_power must be nonnegative".into()));
        }
        Ok(())
    }
}

struct Data {
    thetas: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

/// Training set in working coordinates with noise shaping and a floor on
/// very low values.
fn training_set(data: &Data, transform: &ParamTransform, noise_var: f64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let d = transform.dim() as f64;
    let shift = transform.log_abs_det_jacobian_inverse(&vec![0.0; transform.dim()]);
    let x: Vec<Vec<f64>> = data
        .thetas
        .iter()
        .map(|t| transform.apply(t).expect("linear working transform"))
        .collect();
    let ymax = data.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor_gap = 50.0 * d;
    let mut y = Vec::with_capacity(x.len());
    let mut s = Vec::with_capacity(x.len());
    for &v in &data.ys {
        let gap = (ymax - v).min(floor_gap);
        let extra = SHAPING_FACTOR * (gap - 10.0 * d).max(0.0);
        y.push(ymax.min(v.max(ymax - floor_gap)) + shift);
        s.push(noise_var + extra * extra + NOISE_FLOOR);
    }
    (x, y, s)
}

fn fit_surrogate(data: &Data, transform: &ParamTransform, noise_var: f64, warm: Option<&GpHypers>, seed: u64) -> Result<GpModel> {
    let (x, y, s) = training_set(data, transform, noise_var);
    let fresh = GpHypers::initial(&x, &y);
    let (init, restarts, max_iter) = match warm {
        Some(h) => (h.clone(), 1, 20),
        None => (fresh.clone(), 3, 60),
    };
    let opts = GpFitOptions {
        restarts,
        max_iter,
        seed,
    };
    match gp_fit(&x, &y, &s, &init, opts) {
        Ok(gp) => Ok(gp),
        Err(e) if warm.is_some() => {
            log::debug!("warm GP fit failed ({e}); refitting from data-driven start");
            gp_fit(&x, &y, &s, &fresh, GpFitOptions { restarts: 3, max_iter: 60, seed })
        }
        Err(e) => Err(e),
    }
}

fn param_box(x: &[Vec<f64>], d: usize) -> ParamBox {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in x {
        for i in 0..d {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let span: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]).max(1e-3)).collect();
    ParamBox {
        mean_lo: (0..d).map(|i| lo[i] - 0.5 * span[i]).collect(),
        mean_hi: (0..d).map(|i| hi[i] + 0.5 * span[i]).collect(),
        max_log_sd: span.iter().map(|s| s.ln()).collect(),
    }
}

/// Greedy batch maximizing GP variance × `q^power`; the variance is updated
/// after each pick as if the point had been observed.
fn acquire(gp: &GpModel, q: &GaussianMixture, n: usize, noise_var: f64, power: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = q.dim();
    let mut cands = Vec::with_capacity(CANDIDATES);
    for c in 0..CANDIDATES {
        let k = q.pick_component(rng);
        let comp = &q.components()[k];
        let inflate = if c % 2 == 0 { 1.0 } else { 2.0 };
        let e: Vec<f64> = (0..d).map(|_| inflate * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut x = vec![0.0; d];
        comp.transform_standard(&e, &mut x);
        cands.push(x);
    }
    let m = cands.len();
    let v: Vec<DVector<f64>> = cands.iter().map(|x| gp.solve_lower(&gp.cross(x))).collect();
    let mut cov = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let c = gp.kernel(&cands[a], &cands[b]) - v[a].dot(&v[b]);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    let log_q: Vec<f64> = cands.iter().map(|x| power * q.log_pdf_unchecked(x)).collect();
    let s_new = noise_var + NOISE_FLOOR;
    let mut chosen = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    for _ in 0..n.min(m) {
        let best = (0..m)
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| {
                let sa = cov[(a, a)].max(1e-300).ln() + log_q[a];
                let sb = cov[(b, b)].max(1e-300).ln() + log_q[b];
                sa.total_cmp(&sb)
            })
            .expect("candidates remain");
        taken[best] = true;
        chosen.push(cands[best].clone());
        let col = cov.column(best).clone_owned();
        let denom = col[best] + s_new;
        if denom > 0.0 {
            cov -= (&col * col.transpose()) / denom;
        }
    }
    chosen
}

fn stable(elbos: &[f64], cfg: &FitConfig) -> bool {
    let window = cfg.convergence_window;
    if elbos.len() < window + 1 {
        return false;
    }
    elbos[elbos.len() - window - 1..]
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() < (cfg.convergence_tol * w[1].abs()).max(cfg.convergence_abs_tol))
}

/// Maps the working mixture through `z ↦ A z + b`, keeping only the
/// diagonal of the mapped covariances.
fn rewhiten(q: &mut DiagMixture, a: &DMatrix<f64>, b: &DVector<f64>) {
    for k in 0..q.len() {
        let mu = a * DVector::from_column_slice(&q.means[k]) + b;
        let var = DVector::from_iterator(q.dim(), q.log_sd[k].iter().map(|l| (2.0 * l).exp()));
        let cov = a * DMatrix::from_diagonal(&var) * a.transpose();
        q.means[k] = mu.iter().copied().collect();
        q.log_sd[k] = (0..q.dim()).map(|i| 0.5 * cov[(i, i)].ln()).collect();
    }
}

/// Runs one local fit. Deterministic for a fixed configuration.
pub fn run_local_fit(target: &TargetProblem, cfg: &FitConfig) -> Result<RunOutput> {
    let d = target.dimension();
    cfg.validate(d)?;
    let noise_var = cfg.noise_sigma * cfg.noise_sigma;
    let mut eval = target.evaluator(cfg.seed);
    let mut rng = stream_rng(cfg.seed, 1);
    let crn: Vec<Vec<Vec<f64>>> = {
        let mut r = stream_rng(cfg.seed, 2);
        (0..cfg.k_target.max(2))
            .map(|_| {
                (0..ELBO_SAMPLES)
                    .map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect())
                    .collect()
            })
            .collect()
    };

    // initial point and local batch, in working coordinates scaled to the box
    let width: Vec<f64> = (0..d).map(|i| cfg.upper[i] - cfg.lower[i]).collect();
    let start: Vec<f64> = (0..d).map(|i| cfg.lower[i] + width[i] * rng.random::<f64>()).collect();
    let scale: Vec<f64> = width.iter().map(|w| 0.1 * w).collect();
    let a0 = DMatrix::from_diagonal(&DVector::from_iterator(d, scale.iter().map(|s| 1.0 / s)));
    let b0 = DVector::from_iterator(d, (0..d).map(|i| -start[i] / scale[i]));
    let mut transform = ParamTransform::affine(a0, b0)?;
    let mut data = Data {
        thetas: Vec::new(),
        ys: Vec::new(),
    };
    // stratified draws over [-1, 1]^D in working coordinates
    let n0 = cfg.init_points;
    let strata: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            let mut p: Vec<usize> = (0..n0).collect();
            for i in (1..n0).rev() {
                p.swap(i, rng.random_range(0..=i));
            }
            p
        })
        .collect();
    for j in 0..n0 {
        let z: Vec<f64> = (0..d)
            .map(|i| -1.0 + 2.0 * (strata[i][j] as f64 + rng.random::<f64>()) / n0 as f64)
            .collect();
        let theta = transform.invert_unchecked(&z);
        data.ys.push(eval.eval(&theta));
        data.thetas.push(theta);
    }

    let mut q = DiagMixture {
        means: vec![vec![-0.25; d], vec![0.25; d]],
        log_sd: vec![vec![-0.7; d]; 2],
        logits: vec![0.0, 0.0],
    };
    if cfg.k_target == 1 {
        q.means.truncate(1);
        q.log_sd.truncate(1);
        q.logits.truncate(1);
        q.means[0] = vec![0.0; d];
    }
    let mut hypers: Option<GpHypers> = None;
    let mut elbos = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let gp = fit_surrogate(&data, &transform, noise_var, hypers.as_ref(), cfg.seed ^ iterations as u64)?;
        hypers = Some(gp.hypers().clone());
        if iterations > 1 {
            for _ in 0..2 {
                if q.len() >= cfg.k_target {
                    break;
                }
                let w = q.weights();
                let k = (0..q.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
                q.split(k);
            }
        }
        let (x, _, _) = training_set(&data, &transform, noise_var);
        let pbox = param_box(&x, d);
        let steps = if iterations == 1 { 2 * cfg.vi_steps } else { cfg.vi_steps };
        q.optimize(&gp, &pbox, steps, 10, 0.05, &mut rng);
        let (elbo, _, _) = q.elbo(&gp, &crn);
        elbos.push(elbo);
        log::debug!("fit {} iter {iterations}: K={} n={} elbo={elbo:.4}", cfg.seed, q.len(), eval.count());
        let converged = stable(&elbos, cfg);
        if (converged && q.len() >= cfg.k_target) || eval.count() >= cfg.budget {
            break;
        }
        let n = cfg.batch_size.min(cfg.budget - eval.count());
        let mix = q.to_mixture()?;
        for z in acquire(&gp, &mix, n, noise_var, cfg.density_power, &mut rng) {
            let theta = transform.invert_unchecked(&z);
            data.ys.push(eval.eval(&theta));
            data.thetas.push(theta);
        }
        if iterations % cfg.whiten_every == 0 {
            let (mu, cov) = q.moments();
            if let Ok(w) = ParamTransform::whitening(&mu, &cov) {
                rewhiten(&mut q, w.matrix(), w.offset());
                transform = transform.then_affine(w.matrix(), w.offset())?;
                hypers = hypers.map(|h| h.affine_image(w.matrix(), w.offset(), w.log_abs_det_jacobian_inverse(mu.as_slice())));
            }
        }
    }
    let converged = stable(&elbos, cfg);

    // final whitening and BQ in the emitted coordinates
    q.prune(PRUNE_WEIGHT);
    let mix = q.to_mixture()?;
    let (mu, cov) = mix.moments();
    let w = ParamTransform::whitening(&mu, &cov)?;
    let comps = mix
        .components()
        .iter()
        .map(|c| c.affine_image(w.matrix(), w.offset()))
        .collect::<Result<Vec<_>>>()?;
    let posterior = GaussianMixture::new(comps, mix.weights().to_vec())?;
    let transform = transform.then_affine(w.matrix(), w.offset())?;
    let warm = hypers.map(|h| h.affine_image(w.matrix(), w.offset(), w.log_abs_det_jacobian_inverse(mu.as_slice())));
    let gp = fit_surrogate(&data, &transform, noise_var, warm.as_ref(), cfg.seed ^ 0xf1a1)?;
    let bq = bq_expected_log_joint(&gp, &posterior)?;
    let diagnostics = Some(Diagnostics {
        iterations,
        evaluations: eval.count(),
    });
    let l_hat = bq.i_hat.clone();
    let run = RunOutput::from_transformed(posterior, transform, l_hat, bq.j, 0.0, converged, diagnostics)?;
    let entropy = run.common_entropy_mc(FINAL_ENTROPY_SAMPLES, &mut stream_rng(cfg.seed, 3));
    let elbo = run.expected_log_joint() + entropy;
    let i_hat = run.i_hat().to_vec();
    let l_hat = run.l_hat().map(|l| l.to_vec());
    RunOutput::new(
        run.posterior().clone(),
        run.transform().clone(),
        l_hat,
        i_hat,
        run.j().clone(),
        elbo,
        converged,
        diagnostics,
    )
}
