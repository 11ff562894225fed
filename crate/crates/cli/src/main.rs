use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sdeorder::baselines::{baseline_pipeline, BaselineConfig, BaselineMethod};
use sdeorder::estimators::{fit, Estimator, FitResult};
use sdeorder::metrics::{kendall_tau, ordering_accuracy, param_mae};
use sdeorder::retrace::retrace;
use sdeorder::simulator::{
    add_observation_noise, corrupt_order, make_irreversible_params, simulate, GenSpec, ObservationNoise,
    PermutationMode, PermutationRecord,
};
use sdeorder::{Mat, RngSeed};
use sdeorder_cli::dataset::{load_ensemble, save_ensemble, Dataset, Metadata, TrueParams};
use sdeorder_cli::experiment::{init_spec, mean_sd_table, ResultRow};
use sdeorder_cli::{load_config, run_experiment, ExperimentConfig, ExperimentKind};

/// Temporal order recovery and parameter estimation for SDE ensembles.
#[derive(Parser)]
#[command(name = "sdeorder", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed. For `bench` and `pkpd` it replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: a directory for `bench`/`pkpd`, a dataset file otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (all cores when omitted).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print a machine-readable JSON summary to standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ensemble from a random irreversible linear SDE.
    Simulate(SimulateArgs),
    /// Shuffle the time axis of a dataset.
    Corrupt(CorruptArgs),
    /// Recover the order of a dataset with the drift–score sort.
    Retrace(RecoverArgs),
    /// Recover the order of a dataset with a graph baseline.
    Baseline(BaselineArgs),
    /// Fit drift and diffusion to a dataset in its stored order.
    Estimate(EstimateArgs),
    /// Run the tumor-growth counterfactual study.
    Pkpd,
    /// Run the configured experiment and write its artifacts.
    Bench,
    /// Summarize a results.csv file per method and noise level.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::PerTrajectory)]
    mode: ModeArg,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Mle)]
    estimator: EstimatorArg,
    /// Observation noise level; read from the dataset when omitted.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = BaselineArg::Mst)]
    method: BaselineArg,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Mle)]
    estimator: EstimatorArg,
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct MetricsArgs {
    /// A results.csv written by `bench`.
    #[arg(long)]
    results: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shared,
    PerTrajectory,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Mle,
    Ols,
    Em,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Mst,
    Dpt,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Mle => Estimator::Mle,
            EstimatorArg::Ols => Estimator::Ols,
            EstimatorArg::Em => Estimator::Em,
        }
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| anyhow!("--out is required for this command"))
}

fn emit(cli: &Cli, value: serde_json::Value, human: &str) {
    if cli.json {
        println!("{value}");
    } else if !human.is_empty() {
        println!("{human}");
    }
}

fn noise_r(sigma: Option<f64>, dim: usize) -> Result<Option<sdeorder::SymMat>> {
    match sigma {
        Some(s) if s > 0.0 => Ok(Some(ObservationNoise::new(s)?.r(dim))),
        Some(s) if s < 0.0 => bail!("sigma must be non-negative, got {s}"),
        _ => Ok(None),
    }
}

/// Accuracy and parameter errors when the dataset carries ground truth.
fn evaluation(ds: &Dataset, ordering: &PermutationRecord, fit: &FitResult) -> Result<serde_json::Value> {
    let mut v = json!({});
    if let Some(p) = &ds.meta.permutation {
        let truth = p.inverse();
        v["accuracy"] = json!(ordering_accuracy(&truth, ordering)?);
        v["kendall_tau"] = json!(kendall_tau(&truth, ordering)?);
    }
    if let Some(t) = &ds.meta.truth {
        let d = ds.ensemble.dim;
        v["mae_A"] = json!(param_mae(&t.a(d), &fit.a_hat)?);
        v["mae_H"] = json!(param_mae(&t.h(d), fit.h_hat.as_mat())?);
    }
    Ok(v)
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn save_reordered(cli: &Cli, ds: &Dataset, ordering: &PermutationRecord, provenance: &str) -> Result<()> {
    if let Some(out) = &cli.out {
        let n = ds.ensemble.n_traj;
        let meta = Metadata {
            permutation: ds.meta.permutation.as_ref().map(|p| p.then(ordering, n)),
            provenance: Some(provenance.to_string()),
            ..ds.meta.clone()
        };
        save_ensemble(out, &ds.ensemble.reorder(&ordering.expand(n)), &meta)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => {
            let cfg = config(cli)?;
            let seed = cli.seed.unwrap_or(cfg.seeds[0]);
            let root = RngSeed(seed);
            let gen = GenSpec { dt: cfg.dt, ..cfg.generation.clone() };
            let params = make_irreversible_params(cfg.dims, root.child("params"), &gen)?;
            let latent = simulate(&params, cfg.n_traj, cfg.n_steps, &init_spec(&cfg.init, cfg.dims)?, root.child("simulate"))?;
            let e = if a.sigma > 0.0 {
                add_observation_noise(&latent, &ObservationNoise::new(a.sigma)?, root.child("noise"))?
            } else {
                latent
            };
            let meta = Metadata {
                permutation: Some(PermutationRecord::identity(PermutationMode::Shared, e.n_traj, e.n_steps)),
                seed: Some(seed),
                provenance: Some("simulate".into()),
                sigma_eps: Some(a.sigma),
                truth: Some(TrueParams::from_mats(&params.a, params.h.as_mat())),
            };
            save_ensemble(out_path(cli)?, &e, &meta)?;
            emit(
                cli,
                json!({"n_traj": e.n_traj, "n_steps": e.n_steps, "dim": e.dim, "dt": e.dt, "seed": seed}),
                &format!("wrote {} trajectories × {} steps × {} dims", e.n_traj, e.n_steps, e.dim),
            );
        }
        Command::Corrupt(a) => {
            let ds = load_ensemble(&a.input)?;
            let seed = cli.seed.unwrap_or(0);
            let mode = match a.mode {
                ModeArg::Shared => PermutationMode::Shared,
                ModeArg::PerTrajectory => PermutationMode::PerTrajectory,
            };
            let (e, record) = corrupt_order(&ds.ensemble, mode, RngSeed(seed).child("corrupt"));
            let n = e.n_traj;
            let permutation = Some(match &ds.meta.permutation {
                Some(p) => p.then(&record, n),
                None => record,
            });
            let meta = Metadata { permutation, provenance: Some("corrupt".into()), ..ds.meta.clone() };
            save_ensemble(out_path(cli)?, &e, &meta)?;
            emit(cli, json!({"seed": seed}), "order corrupted");
        }
        Command::Retrace(a) => {
            let cfg = config(cli)?;
            let ds = load_ensemble(&a.input)?;
            let r = noise_r(a.sigma.or(ds.meta.sigma_eps), ds.ensemble.dim)?;
            let res = retrace(&ds.ensemble, r.as_ref(), &cfg.retrace, a.estimator.into())?;
            let mut v = evaluation(&ds, &res.ordering, &res.fit)?;
            v["converged"] = json!(res.converged);
            v["outer_iters"] = json!(res.outer_iters_used);
            v["iter_runtime_s"] = json!(res.mean_iter_runtime_s());
            v["pairwise_error_trace"] = json!(res.pairwise_error_trace);
            save_reordered(cli, &ds, &res.ordering, "retrace")?;
            let human = format!("converged={} outer_iters={}", res.converged, res.outer_iters_used);
            emit(cli, v, &human);
        }
        Command::Baseline(a) => {
            let cfg = config(cli)?;
            let ds = load_ensemble(&a.input)?;
            let method = match a.method {
                BaselineArg::Mst => BaselineMethod::Mst,
                BaselineArg::Dpt => BaselineMethod::Dpt,
            };
            let (ordering, fit) = baseline_pipeline(&ds.ensemble, &BaselineConfig { method, ..cfg.baseline })?;
            let v = evaluation(&ds, &ordering, &fit)?;
            save_reordered(cli, &ds, &ordering, "baseline")?;
            emit(cli, v.clone(), &v.to_string());
        }
        Command::Estimate(a) => {
            let cfg = config(cli)?;
            let ds = load_ensemble(&a.input)?;
            let r = noise_r(a.sigma.or(ds.meta.sigma_eps), ds.ensemble.dim)?;
            let f = fit(&ds.ensemble, a.estimator.into(), r.as_ref(), cfg.retrace.em_iters)?;
            let v = json!({
                "a_hat": rows(&f.a_hat),
                "h_hat": rows(f.h_hat.as_mat()),
                "log_likelihood": f.log_likelihood,
                "n_increments": f.n_increments,
                "degenerate": f.degenerate,
            });
            emit(cli, v, &format!("A_hat = {}H_hat = {}log-likelihood = {}", f.a_hat, f.h_hat.as_mat(), f.log_likelihood));
        }
        Command::Pkpd | Command::Bench => {
            let mut cfg = config(cli)?;
            if matches!(cli.command, Command::Pkpd) {
                cfg.experiment = ExperimentKind::Pkpd;
            }
            let dir = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let out = run_experiment(&cfg, &dir)?;
            let files: Vec<String> = out.files.iter().map(|p| p.display().to_string()).collect();
            let v = json!({
                "rows": out.rows.len() + out.pkpd_rows.len(),
                "failures": out.failures.len(),
                "files": files,
                "summary": out.summary,
                "pkpd": out.pkpd_rows,
            });
            emit(cli, v, &format!("{} rows, {} failures, artifacts in {}", out.rows.len() + out.pkpd_rows.len(), out.failures.len(), dir.display()));
        }
        Command::Metrics(a) => {
            let mut rdr = csv::Reader::from_path(&a.results).with_context(|| a.results.display().to_string())?;
            let rows: Vec<ResultRow> = rdr.deserialize().collect::<Result<_, _>>()?;
            let table = mean_sd_table(&rows);
            let human = table
                .iter()
                .map(|s| {
                    format!(
                        "{:<12} σ={:<5} acc {:.3} ± {:.3}  MAE-A {:.4} ± {:.4}  MAE-H {:.4} ± {:.4}",
                        s.method, s.sigma_eps, s.accuracy_mean, s.accuracy_sd, s.mae_a_mean, s.mae_a_sd, s.mae_h_mean, s.mae_h_sd
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            emit(cli, json!(table), &human);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = pool.build().map_err(anyhow::Error::from).and_then(|p| p.install(|| run(&cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
