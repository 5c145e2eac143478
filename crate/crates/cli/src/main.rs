use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use stackpost::debias::{DebiasMode, DebiasReport};
use stackpost::harness::{
    import_pool, rerun_manifest, run_experiment, with_workers, write_samples_csv, ExperimentConfig, WORKERS_ENV,
};
use stackpost::localfit::{export_run, run_local_fit, FitConfig, DEFAULT_VAR_CAP};
use stackpost::metrics::{MetricsReport, BOOTSTRAP_RESAMPLES};
use stackpost::numerics::{derive_seed, stream_rng};
use stackpost::stacking::{optimize, StackConfig, StackMode};
use stackpost::targets::{by_name, with_noise, TargetProblem};

#[derive(Parser)]
#[command(name = "stackpost", version, about = "Stack local variational mixture posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit local runs on a benchmark and write one JSON file per run.
    Fit(FitArgs),
    /// Validate and filter a directory of run files.
    Import(ImportArgs),
    /// Stack the filtered runs of a directory.
    Stack(StackArgs),
    /// Score each run of a directory against benchmark ground truth.
    Score(ScoreArgs),
    /// Full protocol: pool, repeated stacking, scoring, bootstrap.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct TargetArgs {
    #[arg(long, default_value = "gmm")]
    benchmark: String,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
}

impl TargetArgs {
    fn target(&self, seed: u64) -> Result<TargetProblem> {
        Ok(with_noise(by_name(&self.benchmark, 0)?, self.noise_sigma)?.with_noise_seed(derive_seed(seed, "noise", 0)))
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Number of runs to fit.
    #[arg(long, default_value_t = 10)]
    pool_size: usize,
    #[arg(long, default_value_t = 50)]
    k_target: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    runs_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VAR_CAP)]
    var_cap: f64,
}

#[derive(Args)]
struct StackArgs {
    #[arg(long)]
    runs_dir: PathBuf,
    #[arg(long, default_value = "all-weights")]
    mode: StackMode,
    #[arg(long, default_value = "component-median")]
    debias: DebiasMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score the stacked posterior against this benchmark.
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    runs_dir: PathBuf,
    #[arg(long, default_value = "gmm")]
    benchmark: String,
    /// Write the scores as CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long, default_value_t = 100)]
    pool_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,5,8,10,14,20,28,40")]
    m_list: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Comma-separated stacking modes.
    #[arg(long, value_delimiter = ',', default_value = "all-weights")]
    mode: Vec<StackMode>,
    #[arg(long, default_value = "none")]
    debias: DebiasMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    k_target: usize,
    #[arg(long, default_value_t = BOOTSTRAP_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Import the pool from this directory instead of fitting.
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Replay the experiment recorded in this manifest; other flags except
    /// `--out` are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn fit(args: FitArgs) -> Result<()> {
    let target = args.target.target(args.seed)?;
    fs::create_dir_all(&args.out)?;
    let results = with_workers(|| {
        use rayon::prelude::*;
        (0..args.pool_size)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(args.seed, "fit", i as u64);
                let mut cfg = FitConfig::for_target(&target, seed);
                cfg.k_target = args.k_target;
                (i, seed, run_local_fit(&target, &cfg))
            })
            .collect::<Vec<_>>()
    })?;
    for (i, seed, res) in results {
        match res {
            Ok(run) => {
                let path = args.out.join(format!("run_{i:04}.json"));
                export_run(&run, &path)?;
                println!(
                    "{}: seed {seed} elbo {:.4} converged {} K {} max J {:.3e}",
                    path.display(),
                    run.elbo(),
                    run.converged(),
                    run.len(),
                    run.max_variance()
                );
            }
            Err(e) => println!("run {i} (seed {seed}) failed: {e}"),
        }
    }
    Ok(())
}

fn import(args: ImportArgs) -> Result<()> {
    let pool = import_pool(&args.runs_dir, args.var_cap)?;
    println!("{} runs kept; {}", pool.runs.len(), pool.attrition);
    for (i, r) in pool.runs.iter().enumerate() {
        println!("{i}: D {} K {} elbo {:.4} max J {:.3e}", r.dim(), r.len(), r.elbo(), r.max_variance());
    }
    Ok(())
}

fn stack(args: StackArgs) -> Result<()> {
    let pool = import_pool(&args.runs_dir, DEFAULT_VAR_CAP)?;
    if pool.runs.is_empty() {
        bail!("no usable runs in {} ({})", args.runs_dir.display(), pool.attrition);
    }
    info!("stacking {} runs ({})", pool.runs.len(), pool.attrition);
    let cfg = StackConfig {
        seed: args.seed,
        mode: args.mode,
        ..StackConfig::default()
    };
    let res = optimize(&pool.runs, &cfg)?;
    let report = DebiasReport::new(&res.posterior, &pool.runs, res.entropy)?;
    fs::create_dir_all(&args.out)?;
    res.write_trace_csv(args.out.join("trace.csv"))?;
    let samples = res.posterior.sample(5000, &mut stream_rng(args.seed, 5));
    write_samples_csv(&samples, &args.out.join("samples.csv"))?;
    let metrics = match &args.benchmark {
        Some(b) => {
            let target = by_name(b, 0)?;
            Some(MetricsReport::score(
                &res.posterior,
                report.elbo(args.debias),
                &target.ground_truth,
                pool.runs.len(),
                args.seed,
            )?)
        }
        None => None,
    };
    let summary = serde_json::json!({
        "mode": args.mode,
        "debias": args.debias,
        "runs": pool.runs.len(),
        "elbo": res.elbo,
        "elbo_reported": report.elbo(args.debias),
        "entropy": res.entropy,
        "expected_log_joint": res.expected_log_joint,
        "iterations": res.iterations,
        "converged": res.converged,
        "weights": res.posterior.weights(),
        "debias_report": report,
        "metrics": metrics,
    });
    fs::write(args.out.join("stack.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "stacked {} components from {} runs: elbo {:.4} (reported {:.4}), {} iterations, converged {}",
        res.posterior.len(),
        pool.runs.len(),
        res.elbo,
        report.elbo(args.debias),
        res.iterations,
        res.converged
    );
    if let Some(m) = metrics {
        println!("delta_lml {:.4} mmtv {:.4} gskl {:.4}", m.delta_lml, m.mmtv, m.gskl);
    }
    Ok(())
}

fn score(args: ScoreArgs) -> Result<()> {
    let target = by_name(&args.benchmark, 0)?;
    let pool = import_pool(&args.runs_dir, f64::INFINITY)?;
    let mut rows = Vec::new();
    for (i, run) in pool.runs.iter().enumerate() {
        let sp = stackpost::stacking::naive_stack(std::slice::from_ref(run))?;
        let m = MetricsReport::score(&sp, run.elbo(), &target.ground_truth, 1, 0)?;
        rows.push((i, m));
    }
    let mut w: csv::Writer<Box<dyn std::io::Write>> = match &args.out {
        Some(p) => csv::Writer::from_writer(Box::new(fs::File::create(p).with_context(|| p.display().to_string())?)),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    w.write_record(["run", "elbo", "delta_lml", "mmtv", "gskl"])?;
    for (i, m) in rows {
        w.write_record([i.to_string(), m.elbo.to_string(), m.delta_lml.to_string(), m.mmtv.to_string(), m.gskl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let output = match args.manifest {
        Some(path) => rerun_manifest(&path, Some(args.out.clone()))?,
        None => {
            let cfg = ExperimentConfig {
                benchmark: args.target.benchmark,
                noise_sigma: args.target.noise_sigma,
                pool_size: args.pool_size,
                m_list: args.m_list,
                replicates: args.replicates,
                modes: args.mode,
                debias: args.debias,
                seed: args.seed,
                out: args.out.clone(),
                runs_dir: args.runs_dir,
                k_target: args.k_target,
                var_cap: DEFAULT_VAR_CAP,
                bootstrap_resamples: args.resamples,
            };
            run_experiment(&cfg)?
        }
    };
    let failed = output.results.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} replicates ({} failed); artifacts in {}",
        output.results.len(),
        failed,
        args.out.display()
    );
    for row in &output.summary.rows {
        println!(
            "{:>14} M={:<3} elbo {:>9.4} mmtv {:.4} [{:.4}, {:.4}] gskl {:.4} [{:.4}, {:.4}]",
            row.method, row.m, row.elbo.median, row.mmtv.median, row.mmtv.lower, row.mmtv.upper, row.gskl.median, row.gskl.lower, row.gskl.upper
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        info!("{WORKERS_ENV}={v}");
    }
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Import(a) => import(a),
        Command::Stack(a) => stack(a),
        Command::Score(a) => score(a),
        Command::Experiment(a) => experiment(a),
    }
}
