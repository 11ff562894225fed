//! Stochastic tumor-growth benchmark for counterfactual treatment effects.
//!
//! Volumes follow `dX = (ρ log(K/X) − β_c C − (α_r d + β_r d²)) X dt + σ dW`.
//! Each subject is simulated under its factual arm and the flipped arm with
//! shared Wiener increments, which gives a per-subject ground-truth effect.
//! Effect estimation fits an affine log-volume SDE per arm on recovered
//! orderings and predicts both arms by Monte Carlo.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_pipeline, BaselineConfig, BaselineMethod};
use crate::error::{Error, Result};
use crate::estimators::{mle_fit, FitResult};
use crate::retrace::{retrace, RetraceConfig};
use crate::rng::RngSeed;
use crate::simulator::{corrupt_order, Ensemble, EnsembleKind, PermutationMode};
use crate::estimators::Estimator;

/// Positivity floor for latent volumes, mm³.
pub const VOLUME_FLOOR: f64 = 1e-6;

pub fn volume_from_diameter(diam_mm: f64) -> f64 {
    4.0 / 3.0 * PI * (diam_mm / 2.0).powi(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PKPDParams {
    /// Growth rate, 1/time.
    pub rho: f64,
    /// Carrying capacity, mm³.
    pub k: f64,
    pub beta_c: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    /// mm³/√time.
    pub sigma_tumor: f64,
    /// mm³.
    pub sigma_obs: f64,
    pub gamma: f64,
    pub bsv: f64,
    pub t_horizon: f64,
    pub n_steps: usize,
    pub max_chemo: f64,
}

impl Default for PKPDParams {
    fn default() -> Self {
        Self {
            rho: 0.1,
            k: volume_from_diameter(30.0),
            beta_c: 0.2,
            alpha_r: 0.15,
            beta_r: 0.015,
            sigma_tumor: 10.0,
            sigma_obs: 0.01,
            gamma: 2.0,
            bsv: 0.05,
            t_horizon: 15.0,
            n_steps: 60,
            max_chemo: 1.0,
        }
    }
}

impl PKPDParams {
    pub fn dt(&self) -> f64 {
        self.t_horizon / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("rho", self.rho), ("k", self.k), ("t_horizon", self.t_horizon), ("max_chemo", self.max_chemo)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("beta_c", self.beta_c),
            ("alpha_r", self.alpha_r),
            ("beta_r", self.beta_r),
            ("sigma_tumor", self.sigma_tumor),
            ("sigma_obs", self.sigma_obs),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.bsv) {
            return Err(Error::InvalidArgument(format!("bsv must lie in [0, 1), got {}", self.bsv)));
        }
        if self.n_steps < 1 {
            return Err(Error::InvalidArgument("n_steps must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Subject realization: each rate parameter scaled by `exp(bsv·z)`.
    fn draw_subject<R: Rng>(&self, rng: &mut R) -> Self {
        let mut scale = || (self.bsv * rng.sample::<f64, _>(StandardNormal)).exp();
        Self {
            rho: self.rho * scale(),
            k: self.k * scale(),
            beta_c: self.beta_c * scale(),
            alpha_r: self.alpha_r * scale(),
            beta_r: self.beta_r * scale(),
            sigma_tumor: self.sigma_tumor * scale(),
            ..self.clone()
        }
    }
}

/// `(ρ log(K/x) − β_c C − (α_r d + β_r d²)) x`
pub fn pkpd_drift(x: f64, c: f64, d: f64, p: &PKPDParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::NonPositiveVolume(x));
    }
    Ok((p.rho * (p.k / x).ln() - p.beta_c * c - (p.alpha_r * d + p.beta_r * d * d)) * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mean: f64,
    pub sd: f64,
}

impl CohortStats {
    pub fn from_volumes(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, sd: var.sqrt() }
    }
}

/// Volume-confounded assignment: `p = sigmoid(γ (x − mean)/sd)`,
/// `d ~ Bernoulli(p)`, `C = max_chemo·p`. Returns `(C, d, p)`.
pub fn treatment_policy<R: Rng>(x: f64, stats: &CohortStats, gamma: f64, max_chemo: f64, rng: &mut R) -> (f64, u8, f64) {
    let z = if stats.sd > 0.0 { (x - stats.mean) / stats.sd } else { 0.0 };
    let p = 1.0 / (1.0 + (-gamma * z).exp());
    let d = u8::from(rng.random::<f64>() < p);
    (max_chemo * p, d, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Policy,
    AlwaysTreat,
    NeverTreat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PKPDSubject {
    pub params: PKPDParams,
    pub x0: f64,
    /// 1 = treated (full chemotherapy and radiotherapy every step), 0 = control.
    pub arm: u8,
    pub chemo: Vec<f64>,
    pub radio: Vec<u8>,
    /// Observed factual volumes, `n_steps + 1` points including `x0`.
    pub factual_path: Vec<f64>,
    pub factual_latent: Vec<f64>,
    /// Latent volumes under the flipped arm, same increments.
    pub counterfactual_path: Vec<f64>,
}

impl PKPDSubject {
    pub fn treated_latent(&self) -> &[f64] {
        if self.arm == 1 {
            &self.factual_latent
        } else {
            &self.counterfactual_path
        }
    }

    pub fn control_latent(&self) -> &[f64] {
        if self.arm == 1 {
            &self.counterfactual_path
        } else {
            &self.factual_latent
        }
    }
}

fn arm_schedule(arm: u8, p: &PKPDParams) -> (Vec<f64>, Vec<u8>) {
    let c = if arm == 1 { p.max_chemo } else { 0.0 };
    (vec![c; p.n_steps], vec![arm; p.n_steps])
}

fn euler_path(x0: f64, chemo: &[f64], radio: &[u8], dw: &[f64], p: &PKPDParams) -> Vec<f64> {
    let dt = p.dt();
    let mut path = Vec::with_capacity(dw.len() + 1);
    let mut x = x0;
    path.push(x);
    for ((&c, &d), &w) in chemo.iter().zip(radio).zip(dw) {
        // x stays above the floor, so the drift is defined
        let b = pkpd_drift(x, c, d as f64, p).unwrap_or(0.0);
        x = (x + b * dt + p.sigma_tumor * w).max(VOLUME_FLOOR);
        path.push(x);
    }
    path
}

/// Simulate `n_subjects` subjects. Subject `i` draws from `seed.derive(i)`.
pub fn simulate_cohort(n_subjects: usize, base: &PKPDParams, regime: Regime, seed: RngSeed) -> Result<Vec<PKPDSubject>> {
    base.validate()?;
    if n_subjects == 0 {
        return Err(Error::InvalidArgument("n_subjects must be ≥ 1".into()));
    }
    let diam = Uniform::new(13.0, 15.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let draws: Vec<(PKPDParams, f64)> = (0..n_subjects)
        .map(|i| {
            let s = seed.derive(i as u64);
            let params = base.draw_subject(&mut s.child("params").rng());
            let x0 = volume_from_diameter(s.child("x0").rng().sample(diam));
            (params, x0)
        })
        .collect();
    let stats = CohortStats::from_volumes(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
    let n = base.n_steps;
    let sqdt = base.dt().sqrt();
    Ok(draws
        .into_par_iter()
        .enumerate()
        .map(|(i, (params, x0))| {
            let s = seed.derive(i as u64);
            let arm = match regime {
                Regime::AlwaysTreat => 1,
                Regime::NeverTreat => 0,
                Regime::Policy => treatment_policy(x0, &stats, base.gamma, base.max_chemo, &mut s.child("policy").rng()).1,
            };
            let mut rng = s.child("wiener").rng();
            let dw: Vec<f64> = (0..n).map(|_| sqdt * rng.sample::<f64, _>(StandardNormal)).collect();
            let (chemo, radio) = arm_schedule(arm, &params);
            let (cf_chemo, cf_radio) = arm_schedule(1 - arm, &params);
            let factual_latent = euler_path(x0, &chemo, &radio, &dw, &params);
            let counterfactual_path = euler_path(x0, &cf_chemo, &cf_radio, &dw, &params);
            let mut obs_rng = s.child("obs").rng();
            let factual_path = factual_latent
                .iter()
                .map(|x| x + params.sigma_obs * obs_rng.sample::<f64, _>(StandardNormal))
                .collect();
            PKPDSubject { params, x0, arm, chemo, radio, factual_path, factual_latent, counterfactual_path }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectPipeline {
    TrueOrder,
    Retrace,
    Mst,
    Dpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectConfig {
    /// Monte Carlo paths per arm (antithetic pairs, rounded up to even).
    pub mc_paths: usize,
    /// Evaluation index into the `n_steps + 1` grid; the final point if absent.
    pub t_star: Option<usize>,
    pub retrace: RetraceConfig,
    pub baseline: BaselineConfig,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self { mc_paths: 1024, t_star: None, retrace: RetraceConfig::default(), baseline: BaselineConfig::default() }
    }
}

/// Affine log-volume model `dy = (a₁ y + a₀) dt + √h dW` for one arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub a1: f64,
    pub a0: f64,
    pub h: f64,
}

impl ArmModel {
    fn from_fit(f: &FitResult) -> Self {
        Self { a1: f.a_hat[(0, 0)], a0: f.a_hat[(0, 1)], h: f.h_hat[(0, 0)].max(0.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub pipeline: EffectPipeline,
    pub t_star: usize,
    pub ite: Vec<f64>,
    pub ite_true: Vec<f64>,
    pub ate: f64,
    pub ate_true: f64,
    pub teb: f64,
    pub cf_rmse: f64,
    /// Control, treated.
    pub arm_models: [ArmModel; 2],
    /// Mean ordering accuracy per arm (1 for the true-order pipeline).
    pub ordering_accuracy: [f64; 2],
}

/// `[log x_t, 1]` per subject over `x` sequences of common length.
fn log_volume_ensemble(paths: &[&[f64]], dt: f64) -> Result<Ensemble> {
    let t = paths[0].len();
    let mut data = Vec::with_capacity(paths.len() * t * 2);
    for p in paths {
        for &x in p.iter() {
            data.push(x.max(VOLUME_FLOOR).ln());
            data.push(1.0);
        }
    }
    Ensemble::from_data(paths.len(), t, 2, dt, EnsembleKind::Observed, data)
}

fn fit_arm(
    subjects: &[&PKPDSubject],
    pipeline: EffectPipeline,
    cfg: &EffectConfig,
    dt: f64,
    seed: RngSeed,
) -> Result<(ArmModel, f64)> {
    if subjects.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: subjects.len() });
    }
    let paths: Vec<&[f64]> = subjects.iter().map(|s| s.factual_path.as_slice()).collect();
    let e = log_volume_ensemble(&paths, dt)?;
    if pipeline == EffectPipeline::TrueOrder {
        return Ok((ArmModel::from_fit(&mle_fit(&e)?), 1.0));
    }
    let (shuffled, record) = corrupt_order(&e, PermutationMode::PerTrajectory, seed);
    let truth = record.inverse();
    let (ordering, fit) = match pipeline {
        EffectPipeline::Retrace => {
            let r = retrace(&shuffled, None, &cfg.retrace, Estimator::Mle)?;
            (r.ordering, r.fit)
        }
        EffectPipeline::Mst | EffectPipeline::Dpt => {
            let method = if pipeline == EffectPipeline::Mst { BaselineMethod::Mst } else { BaselineMethod::Dpt };
            baseline_pipeline(&shuffled, &BaselineConfig { method, ..cfg.baseline.clone() })?
        }
        EffectPipeline::TrueOrder => unreachable!(),
    };
    let acc = crate::metrics::ordering_accuracy(&truth, &ordering)?;
    Ok((ArmModel::from_fit(&fit), acc))
}

/// Monte Carlo means of `exp(y_{t*})` under both arm models from `x0`, with
/// antithetic normals shared across arms.
fn mc_means(x0: f64, models: &[ArmModel; 2], t_star: usize, dt: f64, n_paths: usize, seed: RngSeed) -> [f64; 2] {
    let pairs = n_paths.div_ceil(2).max(1);
    let mut rng = seed.rng();
    let y0 = x0.max(VOLUME_FLOOR).ln();
    let mut sums = [0.0; 2];
    let mut z = vec![0.0; t_star];
    for _ in 0..pairs {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for sign in [1.0, -1.0] {
            for (arm, m) in models.iter().enumerate() {
                let sd = (m.h * dt).sqrt();
                let mut y = y0;
                for &zi in &z {
                    y += (m.a1 * y + m.a0) * dt + sd * sign * zi;
                }
                sums[arm] += y.exp();
            }
        }
    }
    sums.map(|s| s / (2 * pairs) as f64)
}

/// Recover orderings per arm with `pipeline`, fit an affine log-volume SDE per
/// arm, and score predicted effects against the shared-noise ground truth.
pub fn effect_report(cohort: &[PKPDSubject], pipeline: EffectPipeline, cfg: &EffectConfig, seed: RngSeed) -> Result<EffectReport> {
    let first = cohort.first().ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    let n_points = first.factual_path.len();
    if cohort.iter().any(|s| s.factual_path.len() != n_points) {
        return Err(Error::ShapeMismatch("subjects have different path lengths".into()));
    }
    let t_star = cfg.t_star.unwrap_or(n_points - 1);
    if t_star == 0 || t_star >= n_points {
        return Err(Error::InvalidArgument(format!("t_star must lie in 1..{n_points}, got {t_star}")));
    }
    let dt = first.params.dt();
    let mut models = [ArmModel { a1: 0.0, a0: 0.0, h: 0.0 }; 2];
    let mut accuracy = [1.0; 2];
    for arm in 0..2u8 {
        let members: Vec<&PKPDSubject> = cohort.iter().filter(|s| s.arm == arm).collect();
        let (m, acc) = fit_arm(&members, pipeline, cfg, dt, seed.child("corrupt").derive(arm as u64))?;
        models[arm as usize] = m;
        accuracy[arm as usize] = acc;
    }
    let mc_seed = seed.child("mc");
    let per_subject: Vec<(f64, f64, f64)> = cohort
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let [control, treated] = mc_means(s.x0, &models, t_star, dt, cfg.mc_paths, mc_seed.derive(i as u64));
            let ite = treated - control;
            let ite_true = s.treated_latent()[t_star] - s.control_latent()[t_star];
            let cf_pred = if s.arm == 1 { control } else { treated };
            (ite, ite_true, cf_pred - s.counterfactual_path[t_star])
        })
        .collect();
    let n = cohort.len() as f64;
    let ite: Vec<f64> = per_subject.iter().map(|r| r.0).collect();
    let ite_true: Vec<f64> = per_subject.iter().map(|r| r.1).collect();
    let ate = ite.iter().sum::<f64>() / n;
    let ate_true = ite_true.iter().sum::<f64>() / n;
    let teb = ite.iter().zip(&ite_true).map(|(a, b)| a - b).sum::<f64>() / n;
    let cf_rmse = (per_subject.iter().map(|r| r.2 * r.2).sum::<f64>() / n).sqrt();
    Ok(EffectReport {
        pipeline,
        t_star,
        ite,
        ite_true,
        ate,
        ate_true,
        teb,
        cf_rmse,
        arm_models: models,
        ordering_accuracy: accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn drift_examples() {
        let p = PKPDParams::default();
        assert_eq!(pkpd_drift(p.k, 0.0, 0.0, &p).unwrap(), 0.0);
        let x = 900.0;
        let treated = pkpd_drift(x, 0.0, 1.0, &p).unwrap();
        let untreated = pkpd_drift(x, 0.0, 0.0, &p).unwrap();
        assert_relative_eq!(untreated - treated, (p.alpha_r + p.beta_r) * x, max_relative = 1e-12);
        assert!(matches!(pkpd_drift(0.0, 0.0, 0.0, &p), Err(Error::NonPositiveVolume(_))));
    }

    #[test]
    fn diameter_examples() {
        assert_relative_eq!(volume_from_diameter(2.0), 4.0 * PI / 3.0, max_relative = 1e-15);
        assert_relative_eq!(volume_from_diameter(14.0), 1436.755, max_relative = 1e-6);
        assert!(volume_from_diameter(13.0) < volume_from_diameter(13.5));
    }

    #[test]
    fn policy_examples() {
        let stats = CohortStats { mean: 1400.0, sd: 100.0 };
        let mut rng = RngSeed(1).rng();
        assert_eq!(treatment_policy(1400.0, &stats, 2.0, 1.0, &mut rng).2, 0.5);
        assert_eq!(treatment_policy(2000.0, &stats, 0.0, 1.0, &mut rng).2, 0.5);
        let lo = treatment_policy(1300.0, &stats, 2.0, 1.0, &mut rng).2;
        let hi = treatment_policy(1500.0, &stats, 2.0, 1.0, &mut rng).2;
        assert!(lo < 0.5 && 0.5 < hi);
        let (c, _, p) = treatment_policy(1500.0, &stats, 2.0, 3.0, &mut rng);
        assert_eq!(c, 3.0 * p);
    }

    #[test]
    fn deterministic_growth_toward_capacity() {
        let p = PKPDParams { sigma_tumor: 0.0, sigma_obs: 0.0, bsv: 0.0, ..Default::default() };
        let cohort = simulate_cohort(3, &p, Regime::NeverTreat, RngSeed(4)).unwrap();
        for s in &cohort {
            assert_eq!(s.factual_path.len(), p.n_steps + 1);
            assert!(s.factual_path.windows(2).all(|w| w[1] > w[0] && w[1] < p.k));
        }
    }

    #[test]
    fn shared_noise_coupling() {
        let cohort = simulate_cohort(20, &PKPDParams::default(), Regime::AlwaysTreat, RngSeed(5)).unwrap();
        for s in &cohort {
            assert_eq!(s.arm, 1);
            assert!(s.treated_latent().iter().zip(s.control_latent()).all(|(t, c)| t <= c));
        }
    }

    #[test]
    fn cohort_is_deterministic() {
        let a = simulate_cohort(10, &PKPDParams::default(), Regime::Policy, RngSeed(6)).unwrap();
        let b = simulate_cohort(10, &PKPDParams::default(), Regime::Policy, RngSeed(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mc_matches_closed_form_mean() {
        // E[exp(y_T)] for the discretized affine model, computed exactly.
        let m = ArmModel { a1: -0.1, a0: 0.7, h: 0.01 };
        let (dt, steps, y0) = (0.25, 60, 7.0);
        let phi = 1.0 + m.a1 * dt;
        let mut mean = y0;
        let mut var = 0.0;
        for _ in 0..steps {
            mean = phi * mean + m.a0 * dt;
            var = phi * phi * var + m.h * dt;
        }
        let exact = (mean + var / 2.0).exp();
        let [est, _] = mc_means(y0.exp(), &[m, m], steps, dt, 20_000, RngSeed(9));
        assert_relative_eq!(est, exact, max_relative = 5e-3);
    }
}
