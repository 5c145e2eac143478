//! Stacked posteriors: concatenation of run components, Monte Carlo entropy,
//! the stacked ELBO and its optimization over mixture logits.

mod posterior;

use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localfit::RunOutput;
use crate::numerics::{derive_seed, mix64, stream_rng};

use posterior::DensityTable;
pub use posterior::{softmax, StackEntry, StackedPosterior};

/// Log-sum-exp terms further than this below the maximum are skipped.
const LSE_CUTOFF: f64 = 37.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackMode {
    /// One logit per stacked component.
    AllWeights,
    /// One logit per run; within-run weights are frozen.
    PosteriorOnly,
    /// Uniform `1/M` averaging without optimization.
    Naive,
}

impl std::str::FromStr for StackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-weights" => Ok(Self::AllWeights),
            "posterior-only" => Ok(Self::PosteriorOnly),
            "naive" => Ok(Self::Naive),
            other => Err(Error::Argument(format!(
                "unknown stacking mode `{other}` (all-weights, posterior-only, naive)"
            ))),
        }
    }
}

impl std::fmt::Display for StackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AllWeights => "all-weights",
            Self::PosteriorOnly => "posterior-only",
            Self::Naive => "naive",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackConfig {
    pub s_optim: usize,
    pub s_final: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub window: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Reuse one entropy sample set for the whole optimization.
    pub fixed_samples: bool,
    pub mode: StackMode,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            s_optim: 20,
            s_final: 100,
            learning_rate: 0.1,
            max_iterations: 5000,
            window: 200,
            tolerance: 1e-3,
            seed: 0,
            fixed_samples: false,
            mode: StackMode::AllWeights,
        }
    }
}

impl StackConfig {
    fn validate(&self) -> Result<()> {
        if self.s_optim < 2 || self.s_final < 1 {
            return Err(Error::Argument("S_optim must be ≥ 2 and S_final ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Argument("convergence window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo_estimate: f64,
    pub entropy_estimate: f64,
    pub expected_log_joint_term: f64,
}

#[derive(Debug, Clone)]
pub struct StackResult {
    pub posterior: StackedPosterior,
    /// Final ELBO with the entropy re-estimated at `S_final`.
    pub elbo: f64,
    pub entropy: f64,
    pub expected_log_joint: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

impl StackResult {
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `a_{m,k} = log w_{m,k} + ELBO_m − max(·)`; zero weights become `-inf`.
pub fn init_logits(runs: &[RunOutput]) -> Result<Vec<f64>> {
    if runs.is_empty() {
        return Err(Error::Argument("at least one run is required".into()));
    }
    let mut a = Vec::new();
    for r in runs {
        if !r.elbo().is_finite() {
            return Err(Error::Argument("run ELBO must be finite".into()));
        }
        for &w in r.posterior().weights() {
            a.push(if w > 0.0 { w.ln() + r.elbo() } else { f64::NEG_INFINITY });
        }
    }
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut a {
        if v.is_finite() {
            *v -= max;
        }
    }
    Ok(a)
}

/// `w̃_{m,k} = w_{m,k} / M`, no optimization.
pub fn naive_stack(runs: &[RunOutput]) -> Result<StackedPosterior> {
    if runs.is_empty() {
        return Err(Error::Argument("at least one run is required".into()));
    }
    let m = runs.len() as f64;
    let logits = runs
        .iter()
        .flat_map(|r| r.posterior().weights().iter().map(move |&w| if w > 0.0 { (w / m).ln() } else { f64::NEG_INFINITY }))
        .collect();
    StackedPosterior::new(runs, logits)
}

/// Entropy samples and the per-sample stacked log-density pieces.
struct SampleSet {
    /// Entry each sample row was drawn from.
    owner: Vec<usize>,
    /// Row-major `n_samples × n_entries` component log-densities.
    log_q: Vec<f64>,
    per_entry: usize,
}

/// Where the entropy samples of each entry come from.
enum Source<'a> {
    Shared(&'a mut ChaCha8Rng),
    /// One stream per entry keyed by its component, so the draws do not
    /// depend on entry order.
    Keyed(u64),
}

/// Hash of an entry's component and transform.
fn entry_key(sp: &StackedPosterior, j: usize) -> u64 {
    let c = sp.component(j);
    let t = sp.transform(j);
    c.mean()
        .iter()
        .chain(c.cov().iter())
        .chain(t.matrix().iter())
        .chain(t.offset().iter())
        .fold(0u64, |h, v| mix64(h ^ v.to_bits()))
}

fn draw_samples(sp: &StackedPosterior, table: Option<&DensityTable>, s: usize, source: Source<'_>) -> SampleSet {
    let active: Vec<usize> = (0..sp.len()).filter(|&j| sp.logits()[j] > f64::NEG_INFINITY).collect();
    let mut owner = Vec::with_capacity(active.len() * s);
    let mut xs = Vec::with_capacity(active.len() * s);
    let mut source = source;
    for &j in &active {
        let mut keyed;
        let rng = match &mut source {
            Source::Shared(r) => &mut **r,
            Source::Keyed(seed) => {
                keyed = stream_rng(derive_seed(*seed, "entry", entry_key(sp, j)), 0);
                &mut keyed
            }
        };
        for _ in 0..s {
            xs.push(sp.sample_entry(j, rng));
            owner.push(j);
        }
    }
    let n = sp.len();
    let mut log_q = vec![f64::NEG_INFINITY; xs.len() * n];
    match table {
        Some(t) => log_q.par_chunks_mut(n).zip(xs.par_iter()).for_each(|(row, x)| t.row(x, row)),
        None => log_q.par_chunks_mut(n).zip(xs.par_iter()).for_each(|(row, x)| {
            for &j in &active {
                row[j] = sp.entry_log_pdf(j, x);
            }
        }),
    }
    SampleSet {
        owner,
        log_q,
        per_entry: s,
    }
}

/// Entropy estimate and its gradient with respect to each stacked weight
/// `w̃_k`, holding the samples fixed.
fn entropy_and_grad(weights: &[f64], set: &SampleSet) -> (f64, Vec<f64>) {
    let n = weights.len();
    let lw: Vec<f64> = weights.iter().map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
    let mut h_sum = vec![0.0; n];
    let mut resp_sum = vec![0.0; n];
    let mut t = vec![0.0; n];
    for (row, &j) in set.log_q.chunks(n).zip(&set.owner) {
        let wj = weights[j];
        if wj <= 0.0 {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            t[k] = lw[k] + row[k];
            max = max.max(t[k]);
        }
        let mut s = 0.0;
        for k in 0..n {
            let d = t[k] - max;
            t[k] = if d > -LSE_CUTOFF { d.exp() } else { 0.0 };
            s += t[k];
        }
        let log_q = max + s.ln();
        h_sum[j] -= log_q;
        let c = wj / set.per_entry as f64;
        for k in 0..n {
            if t[k] > 0.0 {
                resp_sum[k] += c * t[k] / s;
            }
        }
    }
    let per = set.per_entry as f64;
    let mut entropy = 0.0;
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let h_k = h_sum[k] / per;
        entropy += weights[k] * h_k;
        // ∂Ĥ/∂w̃_k; the responsibility term is divided by w̃_k once below
        grad[k] = h_k;
    }
    for k in 0..n {
        if weights[k] > 0.0 {
            grad[k] -= resp_sum[k] / weights[k];
        }
    }
    (entropy, grad)
}

/// Monte Carlo entropy of the stacked posterior with `s` samples per entry.
pub fn entropy_mc(sp: &StackedPosterior, s: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if s == 0 {
        return Err(Error::Argument("entropy needs at least one sample per component".into()));
    }
    let set = draw_samples(sp, DensityTable::new(sp).as_ref(), s, Source::Shared(rng));
    Ok(entropy_and_grad(sp.weights(), &set).0)
}

/// Entropy estimate whose samples depend only on `seed` and each entry's
/// component, not on the order of the entries.
pub fn entropy_mc_keyed(sp: &StackedPosterior, s: usize, seed: u64) -> Result<f64> {
    if s == 0 {
        return Err(Error::Argument("entropy needs at least one sample per component".into()));
    }
    let set = draw_samples(sp, DensityTable::new(sp).as_ref(), s, Source::Keyed(seed));
    Ok(entropy_and_grad(sp.weights(), &set).0)
}

/// `Σ w̃ Î + Ĥ`.
pub fn stacked_elbo(sp: &StackedPosterior, s: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if let Some((j, e)) = sp.entries().iter().enumerate().find(|(_, e)| !e.i_hat.is_finite()) {
        return Err(Error::Contract(format!(
            "stacked entry {j} (run {}, component {}) lacks a finite corrected Î",
            e.run, e.component
        )));
    }
    Ok(sp.expected_log_joint() + entropy_mc(sp, s, rng)?)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step; `-inf` parameters are left untouched.
    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            if x[i] == f64::NEG_INFINITY {
                continue;
            }
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Maps run logits `b` to entry logits `b_m + log w_{m,k}`.
fn expand_run_logits(b: &[f64], runs: &[RunOutput]) -> Vec<f64> {
    runs.iter()
        .zip(b)
        .flat_map(|(r, &bm)| {
            r.posterior()
                .weights()
                .iter()
                .map(move |&w| if w > 0.0 && bm.is_finite() { bm + w.ln() } else { f64::NEG_INFINITY })
        })
        .collect()
}

/// Optimizes the stacked ELBO over logits with Adam and reports the final
/// ELBO with the entropy re-estimated at `S_final`.
pub fn optimize(runs: &[RunOutput], cfg: &StackConfig) -> Result<StackResult> {
    cfg.validate()?;
    if cfg.mode == StackMode::Naive {
        let sp = naive_stack(runs)?;
        let entropy = entropy_mc_keyed(&sp, cfg.s_final, derive_seed(cfg.seed, "final", 0))?;
        let e = sp.expected_log_joint();
        return Ok(StackResult {
            posterior: sp,
            elbo: e + entropy,
            entropy,
            expected_log_joint: e,
            iterations: 0,
            converged: true,
            trace: Vec::new(),
        });
    }
    let init = init_logits(runs)?;
    let views = Arc::new(posterior::views_of(runs)?);
    let mut sp = StackedPosterior::from_views(Arc::clone(&views), runs, init.clone())?;
    let i_hat = sp.i_hat();
    if let Some(j) = i_hat.iter().position(|v| !v.is_finite()) {
        let e = &sp.entries()[j];
        return Err(Error::Contract(format!("entry {j} (run {}, component {}) has non-finite Î", e.run, e.component)));
    }
    // parameters: one logit per entry, or one per run
    let mut params: Vec<f64> = match cfg.mode {
        StackMode::PosteriorOnly => {
            let b: Vec<f64> = runs.iter().map(|r| r.elbo()).collect();
            let max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            b.iter().map(|v| v - max).collect()
        }
        _ => init,
    };
    let table = DensityTable::new(&sp);
    let mut rng = stream_rng(cfg.seed, 0);
    let mut adam = Adam::new(params.len());
    let mut trace = Vec::new();
    let mut window_means: Vec<f64> = Vec::new();
    let mut acc = 0.0;
    let mut fixed: Option<SampleSet> = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        iterations = it + 1;
        let logits = match cfg.mode {
            StackMode::PosteriorOnly => expand_run_logits(&params, runs),
            _ => params.clone(),
        };
        sp = sp.with_logits(logits);
        let w = sp.weights().to_vec();
        let fresh;
        let set = if cfg.fixed_samples {
            fixed.get_or_insert_with(|| draw_samples(&sp, table.as_ref(), cfg.s_optim, Source::Shared(&mut rng)))
        } else {
            fresh = draw_samples(&sp, table.as_ref(), cfg.s_optim, Source::Shared(&mut rng));
            &fresh
        };
        let (h, gh) = entropy_and_grad(&w, set);
        let e: f64 = w.iter().zip(&i_hat).filter(|(w, _)| **w > 0.0).map(|(w, i)| w * i).sum();
        let elbo = e + h;
        // gradient with respect to stacked weights, then through the softmax
        let gw: Vec<f64> = (0..w.len()).map(|k| i_hat[k] + gh[k]).collect();
        if let Some(k) = (0..w.len()).find(|&k| w[k] > 0.0 && !gw[k].is_finite()) {
            let en = &sp.entries()[k];
            return Err(Error::NonFiniteGradient {
                entry: k,
                run: en.run,
                component: en.component,
            });
        }
        let grad: Vec<f64> = match cfg.mode {
            StackMode::PosteriorOnly => {
                let mut g_run = vec![0.0; runs.len()];
                let mut omega = vec![0.0; runs.len()];
                for (k, en) in sp.entries().iter().enumerate() {
                    if w[k] > 0.0 {
                        omega[en.run] += w[k];
                        g_run[en.run] += w[k] * gw[k];
                    }
                }
                // G_m = Σ_k w_mk ∂F/∂w̃_mk with w_mk = w̃_mk / Ω_m
                let gbar: f64 = g_run.iter().sum();
                (0..runs.len())
                    .map(|m| if omega[m] > 0.0 { g_run[m] - omega[m] * gbar } else { 0.0 })
                    .collect()
            }
            _ => {
                let gbar: f64 = w.iter().zip(&gw).filter(|(w, _)| **w > 0.0).map(|(w, g)| w * g).sum();
                (0..w.len()).map(|k| if w[k] > 0.0 { w[k] * (gw[k] - gbar) } else { 0.0 }).collect()
            }
        };
        trace.push(TraceRow {
            iteration: it,
            elbo_estimate: elbo,
            entropy_estimate: h,
            expected_log_joint_term: e,
        });
        acc += elbo;
        if (it + 1) % cfg.window == 0 {
            let mean = acc / cfg.window as f64;
            acc = 0.0;
            if let Some(prev) = window_means.last() {
                if (mean - prev).abs() < cfg.tolerance {
                    window_means.push(mean);
                    converged = true;
                    break;
                }
            }
            window_means.push(mean);
        }
        adam.step(&mut params, &grad, cfg.learning_rate);
    }
    let logits = match cfg.mode {
        StackMode::PosteriorOnly => expand_run_logits(&params, runs),
        _ => params,
    };
    let sp = sp.with_logits(logits);
    let entropy = entropy_mc_keyed(&sp, cfg.s_final, derive_seed(cfg.seed, "final", 0))?;
    let e = sp.expected_log_joint();
    Ok(StackResult {
        posterior: sp,
        elbo: e + entropy,
        entropy,
        expected_log_joint: e,
        iterations,
        converged,
        trace,
    })
}
