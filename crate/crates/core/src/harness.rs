//! Experiment protocol: build a filtered run pool, repeatedly stack random
//! subsets of it, debias, score against ground truth and write artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::debias::{DebiasMode, DebiasReport};
use crate::error::{Error, Result};
use crate::localfit::{import_run, run_local_fit, FitConfig, RunOutput, DEFAULT_VAR_CAP};
use crate::metrics::{BootstrapSummary, MetricsReport, BOOTSTRAP_RESAMPLES};
use crate::numerics::{derive_seed, stream_rng};
use crate::stacking::{optimize, StackConfig, StackMode};
use crate::targets::{by_name, with_noise, TargetProblem};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "STACKPOST_WORKERS";
pub const RESULTS_HEADER: [&str; 8] = ["benchmark", "method", "M", "replicate", "elbo", "delta_lml", "mmtv", "gskl"];
/// Attempts allowed per requested pool member.
const ATTEMPT_FACTOR: usize = 5;
const SAMPLE_ROWS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub benchmark: String,
    pub noise_sigma: f64,
    pub pool_size: usize,
    pub m_list: Vec<usize>,
    pub replicates: usize,
    pub modes: Vec<StackMode>,
    pub debias: DebiasMode,
    pub seed: u64,
    pub out: PathBuf,
    /// Import runs from this directory instead of fitting.
    pub runs_dir: Option<PathBuf>,
    pub k_target: usize,
    pub var_cap: f64,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: "gmm".into(),
            noise_sigma: 0.0,
            pool_size: 100,
            m_list: vec![2, 3, 5, 8, 10, 14, 20, 28, 40],
            replicates: 20,
            modes: vec![StackMode::AllWeights],
            debias: DebiasMode::None,
            seed: 0,
            out: PathBuf::from("results"),
            runs_dir: None,
            k_target: 50,
            var_cap: DEFAULT_VAR_CAP,
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Argument("replicates must be at least 1".into()));
        }
        if self.m_list.is_empty() || self.m_list.contains(&0) {
            return Err(Error::Argument("M values must be positive".into()));
        }
        if self.runs_dir.is_none() {
            if let Some(&m) = self.m_list.iter().find(|&&m| m > self.pool_size) {
                return Err(Error::Argument(format!("M = {m} exceeds the pool size {}", self.pool_size)));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::Argument("at least one stacking mode is required".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument("noise sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// The benchmark instance with its noise stream seeded from the master seed.
    pub fn target(&self) -> Result<TargetProblem> {
        Ok(with_noise(by_name(&self.benchmark, 0)?, self.noise_sigma)?.with_noise_seed(derive_seed(self.seed, "noise", 0)))
    }
}

/// Why generated or imported runs were excluded from the pool.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrition {
    pub attempts: usize,
    pub fit_failed: usize,
    pub not_converged: usize,
    pub high_variance: usize,
    pub corrupt_files: usize,
}

impl std::fmt::Display for Attrition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} attempts: {} fit failures, {} not converged, {} with max J_kk ≥ cap, {} corrupt files",
            self.attempts, self.fit_failed, self.not_converged, self.high_variance, self.corrupt_files
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunPool {
    pub runs: Vec<RunOutput>,
    /// Fit seed of each pooled run; `None` for imported runs.
    pub seeds: Vec<Option<u64>>,
    pub attrition: Attrition,
}

fn classify(run: &RunOutput, var_cap: f64, a: &mut Attrition) -> bool {
    if !run.converged() {
        a.not_converged += 1;
        false
    } else if run.max_variance() >= var_cap {
        a.high_variance += 1;
        false
    } else {
        true
    }
}

/// Sorted `*.json` files of a directory.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Imports every run file in `dir`, skipping unreadable ones with a warning,
/// then applies the pool filter.
pub fn import_pool(dir: &Path, var_cap: f64) -> Result<RunPool> {
    let mut attrition = Attrition::default();
    let mut runs = Vec::new();
    for path in json_files(dir)? {
        attrition.attempts += 1;
        match import_run(&path) {
            Ok(run) => {
                if classify(&run, var_cap, &mut attrition) {
                    runs.push(run);
                }
            }
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                attrition.corrupt_files += 1;
            }
        }
    }
    let seeds = vec![None; runs.len()];
    Ok(RunPool { runs, seeds, attrition })
}

/// Fits runs with seeds derived from the master seed until `pool_size` pass
/// the filter. Acceptance is decided in attempt order, so the pool does not
/// depend on the worker count.
pub fn generate_pool(target: &TargetProblem, cfg: &ExperimentConfig) -> Result<RunPool> {
    let max_attempts = ATTEMPT_FACTOR * cfg.pool_size;
    let mut attrition = Attrition::default();
    let mut runs = Vec::new();
    let mut seeds = Vec::new();
    let mut next = 0usize;
    while runs.len() < cfg.pool_size && next < max_attempts {
        let batch = (cfg.pool_size - runs.len()).min(max_attempts - next);
        let fitted: Vec<(u64, Result<RunOutput>)> = (next..next + batch)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(cfg.seed, "fit", i as u64);
                let mut fc = FitConfig::for_target(target, seed);
                fc.k_target = cfg.k_target;
                (seed, run_local_fit(target, &fc))
            })
            .collect();
        for (seed, res) in fitted {
            attrition.attempts += 1;
            match res {
                Ok(run) => {
                    if classify(&run, cfg.var_cap, &mut attrition) {
                        runs.push(run);
                        seeds.push(Some(seed));
                    }
                }
                Err(e) => {
                    warn!("fit with seed {seed} failed: {e}");
                    attrition.fit_failed += 1;
                }
            }
        }
        next += batch;
    }
    if runs.len() < cfg.pool_size {
        return Err(Error::PoolUnreachable {
            attempts: attrition.attempts,
            report: attrition.to_string(),
        });
    }
    info!("run pool ready: {attrition}");
    Ok(RunPool { runs, seeds, attrition })
}

/// Generates or imports the run pool described by `cfg`.
pub fn build_run_pool(cfg: &ExperimentConfig) -> Result<RunPool> {
    match &cfg.runs_dir {
        Some(dir) => {
            let pool = import_pool(dir, cfg.var_cap)?;
            info!("imported pool: {} runs kept ({})", pool.runs.len(), pool.attrition);
            Ok(pool)
        }
        None => generate_pool(&cfg.target()?, cfg),
    }
}

/// Outcome of one `(method, M, replicate)` stacking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub benchmark: String,
    pub method: StackMode,
    #[serde(rename = "M")]
    pub m: usize,
    pub replicate: usize,
    pub seed: u64,
    pub runs: Vec<usize>,
    pub metrics: Option<MetricsReport>,
    pub debias: Option<DebiasReport>,
    /// Uncapped ELBO after the final entropy estimate.
    pub elbo_uncapped: Option<f64>,
    pub max_run_elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

impl ReplicateResult {
    fn csv_record(&self) -> Vec<String> {
        let (elbo, dl, mm, gs) = match &self.metrics {
            Some(r) => (r.elbo, r.delta_lml, r.mmtv, r.gskl),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        vec![
            self.benchmark.clone(),
            self.method.to_string(),
            self.m.to_string(),
            self.replicate.to_string(),
            format!("{elbo}"),
            format!("{dl}"),
            format!("{mm}"),
            format!("{gs}"),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub crate_version: String,
    pub noise_seed: u64,
    pub attrition: Attrition,
    pub pool_seeds: Vec<Option<u64>>,
    /// `(method, M, replicate, seed)` for every stacking task.
    pub replicate_seeds: Vec<(StackMode, usize, usize, u64)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: Vec<ReplicateResult>,
    pub summary: BootstrapSummary,
    pub manifest: Manifest,
    /// Stacked-posterior samples of replicate 0 per `(method, M)`.
    pub samples: Vec<((StackMode, usize), Vec<Vec<f64>>)>,
}

/// Runs `f` on a pool sized by [`WORKERS_ENV`] when set.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::Argument(format!("{WORKERS_ENV} must be a positive integer, got `{v}`")))?;
            if n == 0 {
                return Err(Error::Argument(format!("{WORKERS_ENV} must be positive")));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Argument(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

fn replicate_seed(master: u64, mode: StackMode, m: usize, r: usize) -> u64 {
    derive_seed(master, &format!("stack-{mode}"), ((m as u64) << 32) | r as u64)
}

fn subset_seed(master: u64, m: usize, r: usize) -> u64 {
    derive_seed(master, "subset", ((m as u64) << 32) | r as u64)
}

/// Stack indices of `pool` for replicate `r` at size `m`. Shared across modes
/// so that methods are compared on the same subsets.
pub fn replicate_subset(master: u64, pool_len: usize, m: usize, r: usize) -> Vec<usize> {
    let mut rng = stream_rng(subset_seed(master, m, r), 0);
    sample_indices(&mut rng, pool_len, m).into_vec()
}

struct Task {
    mode: StackMode,
    m: usize,
    r: usize,
    seed: u64,
}

fn run_task(task: &Task, cfg: &ExperimentConfig, target: &TargetProblem, pool: &RunPool) -> (ReplicateResult, Option<Vec<Vec<f64>>>) {
    let idx = replicate_subset(cfg.seed, pool.runs.len(), task.m, task.r);
    let sub: Vec<RunOutput> = idx.iter().map(|&i| pool.runs[i].clone()).collect();
    let max_run_elbo = sub.iter().map(|r| r.elbo()).fold(f64::NEG_INFINITY, f64::max);
    let mut out = ReplicateResult {
        benchmark: cfg.benchmark.clone(),
        method: task.mode,
        m: task.m,
        replicate: task.r,
        seed: task.seed,
        runs: idx,
        metrics: None,
        debias: None,
        elbo_uncapped: None,
        max_run_elbo,
        iterations: 0,
        converged: false,
        error: None,
    };
    let stack_cfg = StackConfig {
        seed: task.seed,
        mode: task.mode,
        ..StackConfig::default()
    };
    let attempt = || -> Result<(MetricsReport, DebiasReport, f64, usize, bool, Option<Vec<Vec<f64>>>)> {
        let res = optimize(&sub, &stack_cfg)?;
        let report = DebiasReport::new(&res.posterior, &sub, res.entropy)?;
        let elbo = report.elbo(cfg.debias);
        let metrics = MetricsReport::score(&res.posterior, elbo, &target.ground_truth, task.m, task.seed)?;
        let samples = (task.r == 0).then(|| res.posterior.sample(SAMPLE_ROWS, &mut stream_rng(task.seed, 5)));
        Ok((metrics, report, res.elbo, res.iterations, res.converged, samples))
    };
    match attempt() {
        Ok((metrics, report, elbo, iterations, converged, samples)) => {
            out.metrics = Some(metrics);
            out.debias = Some(report);
            out.elbo_uncapped = Some(elbo);
            out.iterations = iterations;
            out.converged = converged;
            (out, samples)
        }
        Err(e) => {
            warn!("{} M={} replicate {} failed: {e}", task.mode, task.m, task.r);
            out.error = Some(e.to_string());
            (out, None)
        }
    }
}

/// Stacks, debiases and scores every `(mode, M, replicate)` on an existing pool.
pub fn run_with_pool(cfg: &ExperimentConfig, pool: &RunPool) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if let Some(&m) = cfg.m_list.iter().find(|&&m| m > pool.runs.len()) {
        return Err(Error::Argument(format!("M = {m} exceeds the {} pooled runs", pool.runs.len())));
    }
    if pool.runs.is_empty() {
        return Err(Error::Argument("the run pool is empty".into()));
    }
    let target = cfg.target()?;
    if target.dimension() != pool.runs[0].dim() {
        return Err(Error::Dimension {
            expected: target.dimension(),
            got: pool.runs[0].dim(),
        });
    }
    let tasks: Vec<Task> = cfg
        .modes
        .iter()
        .flat_map(|&mode| {
            cfg.m_list.iter().flat_map(move |&m| {
                (0..cfg.replicates).map(move |r| Task {
                    mode,
                    m,
                    r,
                    seed: replicate_seed(cfg.seed, mode, m, r),
                })
            })
        })
        .collect();
    let outcomes: Vec<(ReplicateResult, Option<Vec<Vec<f64>>>)> =
        with_workers(|| tasks.par_iter().map(|t| run_task(t, cfg, &target, pool)).collect())?;
    let mut summary = BootstrapSummary::default();
    let boot_seed = derive_seed(cfg.seed, "bootstrap", 0);
    for &mode in &cfg.modes {
        for &m in &cfg.m_list {
            let cell: Vec<MetricsReport> = outcomes
                .iter()
                .filter(|(r, _)| r.method == mode && r.m == m)
                .filter_map(|(r, _)| r.metrics)
                .collect();
            if cell.len() < 2 {
                warn!("{mode} M={m}: fewer than two successful replicates, no bootstrap summary");
                continue;
            }
            summary.push(&mode.to_string(), m, &cell, cfg.bootstrap_resamples, boot_seed)?;
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        noise_seed: target.noise_seed(),
        attrition: pool.attrition.clone(),
        pool_seeds: pool.seeds.clone(),
        replicate_seeds: tasks.iter().map(|t| (t.mode, t.m, t.r, t.seed)).collect(),
    };
    let mut samples = Vec::new();
    let mut results = Vec::with_capacity(outcomes.len());
    for (r, s) in outcomes {
        if let Some(s) = s {
            samples.push(((r.method, r.m), s));
        }
        results.push(r);
    }
    Ok(ExperimentOutput {
        results,
        summary,
        manifest,
        samples,
    })
}

/// Full protocol: pool, stacking, scoring, and artifacts in `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let pool = with_workers(|| build_run_pool(cfg))??;
    let output = run_with_pool(cfg, &pool)?;
    write_artifacts(&output, &cfg.out)?;
    Ok(output)
}

/// Re-runs the experiment recorded in a manifest, writing to `out` when given.
pub fn rerun_manifest(path: impl AsRef<Path>, out: Option<PathBuf>) -> Result<ExperimentOutput> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut cfg = manifest.config;
    if let Some(out) = out {
        cfg.out = out;
    }
    run_experiment(&cfg)
}

pub fn write_results_csv(results: &[ReplicateResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_samples_csv(samples: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.first().map_or(0, Vec::len);
    w.write_record((0..d).map(|i| format!("theta_{i}")))?;
    for s in samples {
        w.write_record(s.iter().map(|v| format!("{v}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.csv`, `results.json`, `manifest.json` and
/// `samples/<method>_M<M>.csv` into `dir`.
pub fn write_artifacts(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("samples"))?;
    write_results_csv(&output.results, &dir.join("results.csv"))?;
    output.summary.write_csv(dir.join("summary.csv"))?;
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(&output.results)?)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&output.manifest)?)?;
    for ((mode, m), s) in &output.samples {
        write_samples_csv(s, &dir.join("samples").join(format!("{mode}_M{m}.csv")))?;
    }
    Ok(())
}
