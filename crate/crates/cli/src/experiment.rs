//! Configuration-driven runs: simulate, corrupt, recover, estimate, evaluate,
//! and write `results.csv`, `summary.csv`, an optional SVG chart and
//! `errors.log` into the output directory.
//!
//! Every (seed, noise level) pair draws its data from streams derived only
//! from the seed and the level's index, so numbers do not depend on the
//! worker count or schedule.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sdeorder::baselines::{baseline_pipeline, BaselineConfig, BaselineMethod};
use sdeorder::estimators::{Estimator, FitResult};
use sdeorder::linalg::SymMat;
use sdeorder::metrics::{kendall_tau, ordering_accuracy, param_mae, timed};
use sdeorder::pkpd::{effect_report, simulate_cohort, EffectConfig, EffectPipeline};
use sdeorder::retrace::retrace;
use sdeorder::simulator::{
    add_observation_noise, corrupt_order, make_irreversible_params, simulate, Ensemble, InitSpec, LinearSdeParams,
    ObservationNoise, PermutationRecord,
};
use sdeorder::{RngSeed, Vector};

use crate::config::{ExperimentConfig, ExperimentKind, InitConfig, Method};
use crate::error::CliResult;
use crate::svg::{line_chart, Series};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub sigma_eps: f64,
    pub accuracy: f64,
    #[serde(rename = "mae_A")]
    pub mae_a: f64,
    #[serde(rename = "mae_H")]
    pub mae_h: f64,
    pub kendall_tau: f64,
    pub iter_runtime_s: f64,
    pub converged: bool,
    pub outer_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub sigma_eps: f64,
    pub n: usize,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    #[serde(rename = "mae_A_mean")]
    pub mae_a_mean: f64,
    #[serde(rename = "mae_A_sd")]
    pub mae_a_sd: f64,
    #[serde(rename = "mae_H_mean")]
    pub mae_h_mean: f64,
    #[serde(rename = "mae_H_sd")]
    pub mae_h_sd: f64,
    pub kendall_tau_mean: f64,
    pub kendall_tau_sd: f64,
    pub iter_runtime_s_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkpdRow {
    pub pipeline: String,
    pub seed: u64,
    pub ate: f64,
    pub ate_true: f64,
    pub teb: f64,
    pub cf_rmse: f64,
    pub accuracy_control: f64,
    pub accuracy_treated: f64,
    pub runtime_s: f64,
}

/// One simulated, noised and shuffled dataset.
#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub sigma_eps: f64,
    pub params: LinearSdeParams,
    pub observed: Ensemble,
    pub corrupted: Ensemble,
    /// `perms[j][k]`: true time index of corrupted slot `k`.
    pub corruption: PermutationRecord,
    pub r: Option<SymMat>,
}

pub fn init_spec(init: &InitConfig, d: usize) -> CliResult<InitSpec> {
    Ok(match *init {
        InitConfig::Stationary => InitSpec::Stationary,
        InitConfig::Gaussian { mean_norm, sd } => InitSpec::Gaussian {
            mean: Vector::from_element(d, mean_norm / (d as f64).sqrt()),
            cov: SymMat::scaled_identity(d, sd * sd),
        },
    })
}

/// Data for `seed` at noise level index `level`. The system and latent
/// paths depend on the seed only, so a noise sweep varies just the noise.
pub fn prepare_instance(cfg: &ExperimentConfig, seed: u64, level: usize) -> CliResult<Instance> {
    let root = RngSeed(seed);
    let sigma_eps = cfg.noise_sigmas[level];
    let gen = sdeorder::simulator::GenSpec { dt: cfg.dt, ..cfg.generation.clone() };
    let params = make_irreversible_params(cfg.dims, root.child("params"), &gen)?;
    let latent = simulate(&params, cfg.n_traj, cfg.n_steps, &init_spec(&cfg.init, cfg.dims)?, root.child("simulate"))?;
    let noise = ObservationNoise::new(sigma_eps)?;
    let observed = add_observation_noise(&latent, &noise, root.child("noise").derive(level as u64))?;
    let (corrupted, corruption) = corrupt_order(&observed, cfg.corruption, root.child("corrupt").derive(level as u64));
    let r = (sigma_eps > 0.0).then(|| noise.r(cfg.dims));
    Ok(Instance { seed, sigma_eps, params, observed, corrupted, corruption, r })
}

struct Recovered {
    ordering: PermutationRecord,
    fit: FitResult,
    runtime_s: f64,
    converged: bool,
    outer_iters: usize,
}

fn recover(cfg: &ExperimentConfig, inst: &Instance, method: Method) -> sdeorder::Result<Recovered> {
    let estimator = match method {
        Method::RetraceMle => Some(Estimator::Mle),
        Method::RetraceOls => Some(Estimator::Ols),
        Method::RetraceEm => Some(Estimator::Em),
        Method::MstMle | Method::DptMle => None,
    };
    match estimator {
        Some(est) => {
            let res = retrace(&inst.corrupted, inst.r.as_ref(), &cfg.retrace, est)?;
            Ok(Recovered {
                runtime_s: res.mean_iter_runtime_s(),
                converged: res.converged,
                outer_iters: res.outer_iters_used,
                ordering: res.ordering,
                fit: res.fit,
            })
        }
        None => {
            let bcfg = BaselineConfig {
                method: if method == Method::MstMle { BaselineMethod::Mst } else { BaselineMethod::Dpt },
                ..cfg.baseline.clone()
            };
            let (out, secs) = timed(|| baseline_pipeline(&inst.corrupted, &bcfg));
            let (ordering, fit) = out?;
            Ok(Recovered { ordering, fit, runtime_s: secs, converged: true, outer_iters: 1 })
        }
    }
}

pub fn run_method(cfg: &ExperimentConfig, inst: &Instance, method: Method) -> sdeorder::Result<ResultRow> {
    let rec = recover(cfg, inst, method)?;
    let truth = inst.corruption.inverse();
    Ok(ResultRow {
        method: method.name().to_string(),
        seed: inst.seed,
        sigma_eps: inst.sigma_eps,
        accuracy: ordering_accuracy(&truth, &rec.ordering)?,
        mae_a: param_mae(&inst.params.a, &rec.fit.a_hat)?,
        mae_h: param_mae(inst.params.h.as_mat(), rec.fit.h_hat.as_mat())?,
        kendall_tau: kendall_tau(&truth, &rec.ordering)?,
        iter_runtime_s: rec.runtime_s,
        converged: rec.converged,
        outer_iters: rec.outer_iters,
    })
}

/// All rows for the synthetic experiments, in (seed, level, method) order,
/// plus one diagnostic line per failed row.
pub fn run_rows(cfg: &ExperimentConfig) -> (Vec<ResultRow>, Vec<String>) {
    let items: Vec<(u64, usize)> =
        cfg.seeds.iter().flat_map(|&s| (0..cfg.noise_sigmas.len()).map(move |l| (s, l))).collect();
    let per_item: Vec<Vec<Result<ResultRow, String>>> = items
        .par_iter()
        .map(|&(seed, level)| {
            let sigma = cfg.noise_sigmas[level];
            let tag = |m: Method| format!("method={} seed={seed} sigma_eps={sigma}", m.name());
            match prepare_instance(cfg, seed, level) {
                Err(e) => cfg.methods.iter().map(|&m| Err(format!("{}: data generation failed: {e}", tag(m)))).collect(),
                Ok(inst) => cfg
                    .methods
                    .iter()
                    .map(|&m| {
                        let r = run_method(cfg, &inst, m).map_err(|e| format!("{}: {e}", tag(m)));
                        if let Ok(row) = &r {
                            info!("{} acc={:.3} mae_A={:.4}", tag(m), row.accuracy, row.mae_a);
                        }
                        r
                    })
                    .collect(),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in per_item.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(msg) => {
                warn!("{msg}");
                failures.push(msg);
            }
        }
    }
    (rows, failures)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn summary_for(keys: &[(String, f64)], rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (method, sigma) in keys {
        let sel: Vec<&ResultRow> = rows.iter().filter(|r| &r.method == method && r.sigma_eps == *sigma).collect();
        if sel.is_empty() {
            continue;
        }
        let col = |f: fn(&ResultRow) -> f64| mean_sd(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (accuracy_mean, accuracy_sd) = col(|r| r.accuracy);
        let (mae_a_mean, mae_a_sd) = col(|r| r.mae_a);
        let (mae_h_mean, mae_h_sd) = col(|r| r.mae_h);
        let (kendall_tau_mean, kendall_tau_sd) = col(|r| r.kendall_tau);
        out.push(SummaryRow {
            method: method.clone(),
            sigma_eps: *sigma,
            n: sel.len(),
            accuracy_mean,
            accuracy_sd,
            mae_a_mean,
            mae_a_sd,
            mae_h_mean,
            mae_h_sd,
            kendall_tau_mean,
            kendall_tau_sd,
            iter_runtime_s_mean: col(|r| r.iter_runtime_s).0,
        });
    }
    out
}

/// Mean and sample standard deviation per (method, noise level), in the
/// configured method and level order.
pub fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let keys: Vec<(String, f64)> =
        cfg.methods.iter().flat_map(|m| cfg.noise_sigmas.iter().map(move |&s| (m.name().to_string(), s))).collect();
    summary_for(&keys, rows)
}

/// Like [`summarize`], with groups in order of first appearance.
pub fn mean_sd_table(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, s)| m == &r.method && *s == r.sigma_eps) {
            keys.push((r.method.clone(), r.sigma_eps));
        }
    }
    summary_for(&keys, rows)
}

pub fn noise_sweep_chart(cfg: &ExperimentConfig, summary: &[SummaryRow]) -> String {
    let series = |f: fn(&SummaryRow) -> f64| -> Vec<Series> {
        cfg.methods
            .iter()
            .map(|m| Series {
                name: m.name().to_string(),
                points: summary.iter().filter(|s| s.method == m.name()).map(|s| (s.sigma_eps, f(s))).collect(),
            })
            .collect()
    };
    line_chart(&[
        ("Ordering accuracy", series(|s| s.accuracy_mean)),
        ("MAE of A", series(|s| s.mae_a_mean)),
    ])
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_pkpd(cfg: &ExperimentConfig) -> (Vec<PkpdRow>, Vec<String>) {
    let pc = &cfg.pkpd;
    let ecfg = EffectConfig {
        mc_paths: pc.mc_paths,
        t_star: pc.t_star,
        retrace: cfg.retrace.clone(),
        baseline: cfg.baseline.clone(),
    };
    let pipelines = [EffectPipeline::TrueOrder, EffectPipeline::Retrace, EffectPipeline::Mst, EffectPipeline::Dpt];
    let name = |p: EffectPipeline| match p {
        EffectPipeline::TrueOrder => "true_order",
        EffectPipeline::Retrace => "retrace",
        EffectPipeline::Mst => "mst",
        EffectPipeline::Dpt => "dpt",
    };
    let per_seed: Vec<Vec<Result<PkpdRow, String>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let root = RngSeed(seed);
            match simulate_cohort(pc.n_subjects, &pc.params, pc.regime, root.child("cohort")) {
                Err(e) => pipelines.iter().map(|&p| Err(format!("pipeline={} seed={seed}: cohort failed: {e}", name(p)))).collect(),
                Ok(cohort) => pipelines
                    .iter()
                    .map(|&p| {
                        let (rep, secs) = timed(|| effect_report(&cohort, p, &ecfg, root.child("effect")));
                        let rep = rep.map_err(|e| format!("pipeline={} seed={seed}: {e}", name(p)))?;
                        Ok(PkpdRow {
                            pipeline: name(p).to_string(),
                            seed,
                            ate: rep.ate,
                            ate_true: rep.ate_true,
                            teb: rep.teb,
                            cf_rmse: rep.cf_rmse,
                            accuracy_control: rep.ordering_accuracy[0],
                            accuracy_treated: rep.ordering_accuracy[1],
                            runtime_s: secs,
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in per_seed.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(msg) => {
                warn!("{msg}");
                failures.push(msg);
            }
        }
    }
    (rows, failures)
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub pkpd_rows: Vec<PkpdRow>,
    pub failures: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Run `cfg` and write its artifacts into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut out = ExperimentOutput::default();
    if cfg.experiment == ExperimentKind::Pkpd {
        let (rows, failures) = run_pkpd(cfg);
        let path = out_dir.join("pkpd_results.csv");
        write_csv(&path, &rows)?;
        out.files.push(path);
        out.pkpd_rows = rows;
        out.failures = failures;
    } else {
        let (rows, failures) = run_rows(cfg);
        let summary = summarize(cfg, &rows);
        for (name, write) in [("results.csv", true), ("summary.csv", false)] {
            let path = out_dir.join(name);
            if write {
                write_csv(&path, &rows)?;
            } else {
                write_csv(&path, &summary)?;
            }
            out.files.push(path);
        }
        if cfg.experiment == ExperimentKind::NoiseSweep {
            let path = out_dir.join("noise_sweep.svg");
            fs::write(&path, noise_sweep_chart(cfg, &summary))?;
            out.files.push(path);
        }
        out.rows = rows;
        out.summary = summary;
        out.failures = failures;
    }
    let log_path = out_dir.join("errors.log");
    let mut log_text = out.failures.join("\n");
    if !log_text.is_empty() {
        log_text.push('\n');
    }
    fs::write(&log_path, log_text)?;
    out.files.push(log_path);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            experiment: ExperimentKind::Table1,
            dims: 2,
            n_traj: 40,
            n_steps: 12,
            seeds: vec![1, 2],
            retrace: sdeorder::retrace::RetraceConfig { max_outer_iters: 2, em_iters: 2, ..Default::default() },
            baseline: sdeorder::baselines::BaselineConfig { dpt_n_eigs: 5, ..Default::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn table1_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&tiny(), dir.path()).unwrap();
        assert_eq!(out.rows.len() + out.failures.len(), 2 * 5);
        assert_eq!(out.summary.len(), 5);
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(text.starts_with("method,seed,sigma_eps,accuracy,mae_A,mae_H,kendall_tau,iter_runtime_s,converged,outer_iters\n"));
    }

    #[test]
    fn summary_statistics() {
        let cfg = tiny();
        let row = |acc: f64| ResultRow {
            method: "retrace_mle".into(),
            seed: 0,
            sigma_eps: 0.0,
            accuracy: acc,
            mae_a: 0.0,
            mae_h: 0.0,
            kendall_tau: 0.0,
            iter_runtime_s: 0.0,
            converged: true,
            outer_iters: 1,
        };
        let s = summarize(&cfg, &[row(0.2), row(0.4)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].accuracy_mean - 0.3).abs() < 1e-15);
        assert!((s[0].accuracy_sd - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
