//! Drift/diffusion estimation for `dX = AX dt + G dW` from ordered ensembles.
//!
//! Increments are pooled over every trajectory and step. Per-trajectory
//! sufficient statistics are reduced in trajectory-index order so results do
//! not depend on the thread schedule.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{project_psd, spd_inverse, spd_logdet, Mat, SymMat, Vector};
use crate::simulator::Ensemble;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub a_hat: Mat,
    pub h_hat: SymMat,
    pub log_likelihood: f64,
    pub n_increments: usize,
    /// Set when the residual covariance is rank deficient; the likelihood is
    /// then evaluated with the PSD floor applied.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Mle,
    Ols,
    Em,
}

struct Moments {
    xx: Mat,
    dx: Mat,
}

fn moments(e: &Ensemble) -> Moments {
    let d = e.dim;
    let per_traj: Vec<Moments> = (0..e.n_traj)
        .into_par_iter()
        .map(|j| {
            let mut xx = Mat::zeros(d, d);
            let mut dx = Mat::zeros(d, d);
            for t in 0..e.n_steps - 1 {
                let x = Vector::from_column_slice(e.state(j, t));
                let delta = Vector::from_column_slice(e.state(j, t + 1)) - &x;
                xx.ger(1.0, &x, &x, 1.0);
                dx.ger(1.0, &delta, &x, 1.0);
            }
            Moments { xx, dx }
        })
        .collect();
    per_traj.into_iter().fold(Moments { xx: Mat::zeros(d, d), dx: Mat::zeros(d, d) }, |mut acc, m| {
        acc.xx += m.xx;
        acc.dx += m.dx;
        acc
    })
}

/// `Σᵢ Rᵢ Rᵢᵀ` with `Rᵢ = ΔXᵢ − A Xᵢ dt`.
pub fn residual_moment(e: &Ensemble, a: &Mat) -> Mat {
    let d = e.dim;
    let ad = a * e.dt;
    let per_traj: Vec<Mat> = (0..e.n_traj)
        .into_par_iter()
        .map(|j| {
            let mut rr = Mat::zeros(d, d);
            for t in 0..e.n_steps - 1 {
                let x = Vector::from_column_slice(e.state(j, t));
                let r = Vector::from_column_slice(e.state(j, t + 1)) - &x - &ad * &x;
                rr.ger(1.0, &r, &r, 1.0);
            }
            rr
        })
        .collect();
    per_traj.into_iter().fold(Mat::zeros(d, d), |acc, m| acc + m)
}

pub fn n_increments(e: &Ensemble) -> usize {
    e.n_traj * (e.n_steps - 1)
}

fn drift_from_moments(xx: &Mat, dx: &Mat, dt: f64) -> Result<Mat> {
    let eig = SymmetricEigen::new(xx.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= max * 1e-14 {
        return Err(Error::SingularGram);
    }
    let chol = xx.clone().cholesky().ok_or(Error::SingularGram)?;
    // Â = (1/dt) S_dx S_xx⁻¹, solved as S_xx Âᵀ = S_dxᵀ dt⁻¹
    Ok(chol.solve(&dx.transpose()).transpose() / dt)
}

/// Log-likelihood of the Euler–Maruyama increments given `(A, H)` from the
/// residual moment `Σ RRᵀ`, evaluated with the PSD floor on `H`.
fn log_likelihood_from_moment(rr: &Mat, h: &SymMat, n: usize, dt: f64) -> Result<f64> {
    let d = h.dim() as f64;
    let hp = project_psd(h);
    let inv = spd_inverse(&hp, f64::INFINITY)?;
    let logdet = spd_logdet(&hp)?;
    let n = n as f64;
    Ok(-0.5 * d * n * (2.0 * std::f64::consts::PI * dt).ln() - 0.5 * n * logdet - (inv.component_mul(rr)).sum() / (2.0 * dt))
}

/// Increment log-likelihood at arbitrary `(A, H)`.
pub fn log_likelihood(e: &Ensemble, a: &Mat, h: &SymMat) -> Result<f64> {
    if a.nrows() != e.dim || h.dim() != e.dim {
        return Err(Error::ShapeMismatch("parameter dimension does not match ensemble".into()));
    }
    log_likelihood_from_moment(&residual_moment(e, a), h, n_increments(e), e.dt)
}

fn is_rank_deficient(h: &SymMat) -> bool {
    let ev = h.eigenvalues();
    let max = ev.amax();
    max == 0.0 || ev.min() <= 1e-12 * max
}

/// Closed-form maximum likelihood:
/// `Â = (1/dt)(Σ ΔXᵢXᵢᵀ)(Σ XᵢXᵢᵀ)⁻¹`, `Ĥ = (1/(n dt)) Σ RᵢRᵢᵀ`.
pub fn mle_fit(e: &Ensemble) -> Result<FitResult> {
    let m = moments(e);
    let a_hat = drift_from_moments(&m.xx, &m.dx, e.dt)?;
    let n = n_increments(e);
    let rr = residual_moment(e, &a_hat);
    let h_hat = SymMat::from_symmetric_part(&(&rr / (n as f64 * e.dt)));
    let degenerate = is_rank_deficient(&h_hat);
    let log_likelihood = log_likelihood_from_moment(&rr, &h_hat, n, e.dt)?;
    Ok(FitResult { a_hat, h_hat, log_likelihood, n_increments: n, degenerate })
}

/// Least squares drift (identical to the MLE drift) with a diagonal
/// diffusion estimate.
pub fn ols_fit(e: &Ensemble) -> Result<FitResult> {
    let m = moments(e);
    let a_hat = drift_from_moments(&m.xx, &m.dx, e.dt)?;
    let n = n_increments(e);
    let rr = residual_moment(e, &a_hat);
    let diag = rr.diagonal() / (n as f64 * e.dt);
    let h_hat = SymMat::from_symmetric_part(&Mat::from_diagonal(&diag));
    let degenerate = is_rank_deficient(&h_hat);
    let log_likelihood = log_likelihood_from_moment(&rr, &h_hat, n, e.dt)?;
    Ok(FitResult { a_hat, h_hat, log_likelihood, n_increments: n, degenerate })
}

/// Dispatch on [`Estimator`]; `r` is the measurement-noise covariance used by
/// EM (absent means noiseless).
pub fn fit(e: &Ensemble, estimator: Estimator, r: Option<&SymMat>, em_iters: usize) -> Result<FitResult> {
    match estimator {
        Estimator::Mle => mle_fit(e),
        Estimator::Ols => ols_fit(e),
        Estimator::Em => match r {
            Some(r) => em_fit(e, r, em_iters),
            None => mle_fit(e),
        },
    }
}

/// EM for the linear-Gaussian state-space model
/// `x_{t+1} = (I + A dt) x_t + w`, `w ~ N(0, H dt)`, `y_t = x_t + v`,
/// `v ~ N(0, R)`. The initial-state prior is estimated alongside `(A, H)`.
pub fn em_fit(e: &Ensemble, r: &SymMat, iters: usize) -> Result<FitResult> {
    em_fit_traced(e, r, iters).map(|(fit, _)| fit)
}

/// [`em_fit`] plus the observed-data log-likelihood before every M-step and
/// after the last one (`iters + 1` values).
pub fn em_fit_traced(e: &Ensemble, r: &SymMat, iters: usize) -> Result<(FitResult, Vec<f64>)> {
    if r.dim() != e.dim {
        return Err(Error::ShapeMismatch(format!("R is {0}x{0}, states have dimension {1}", r.dim(), e.dim)));
    }
    if r.amax() == 0.0 {
        // noiseless observations: the smoother returns the data itself
        let fit = mle_fit(e)?;
        let ll = fit.log_likelihood;
        return Ok((fit, vec![ll; iters + 1]));
    }
    let d = e.dim;
    let start = mle_fit(e)?;
    let mut theta = StateSpace {
        a: start.a_hat,
        h: project_psd(&start.h_hat),
        mu0: Vector::zeros(d),
        v0: SymMat::identity(d),
    };
    let (mu0, v0) = initial_moments(e, r);
    theta.mu0 = mu0;
    theta.v0 = v0;
    let mut trace = Vec::with_capacity(iters + 1);
    let mut stats = e_step(e, r, &theta)?;
    trace.push(stats.log_likelihood);
    for iter in 1..=iters {
        theta = m_step(&stats, e.dt, e.n_traj, n_increments(e))?;
        stats = e_step(e, r, &theta)?;
        let prev = *trace.last().unwrap();
        let next = stats.log_likelihood;
        if next < prev - 1e-8 * prev.abs().max(1.0) {
            return Err(Error::NonMonotoneLikelihood { iter, prev, next });
        }
        trace.push(next);
    }
    let n = n_increments(e);
    let degenerate = is_rank_deficient(&theta.h);
    let fit = FitResult {
        a_hat: theta.a,
        h_hat: theta.h,
        log_likelihood: stats.log_likelihood,
        n_increments: n,
        degenerate,
    };
    Ok((fit, trace))
}

struct StateSpace {
    a: Mat,
    h: SymMat,
    mu0: Vector,
    v0: SymMat,
}

struct SmoothedStats {
    s00: Mat,
    s11: Mat,
    s10: Mat,
    x0_sum: Vector,
    x0x0_sum: Mat,
    log_likelihood: f64,
}

fn initial_moments(e: &Ensemble, r: &SymMat) -> (Vector, SymMat) {
    let d = e.dim;
    let n = e.n_traj as f64;
    let mut mean = Vector::zeros(d);
    for j in 0..e.n_traj {
        mean += Vector::from_column_slice(e.state(j, 0));
    }
    mean /= n;
    let mut cov = Mat::zeros(d, d);
    for j in 0..e.n_traj {
        let c = Vector::from_column_slice(e.state(j, 0)) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n.max(2.0) - 1.0;
    let v0 = project_psd(&SymMat::from_symmetric_part(&(cov - r.as_mat())));
    (mean, v0)
}

/// Kalman filter + RTS smoother. With a common time grid and parameters the
/// covariance recursions are shared by all trajectories, so they are run
/// once and only the means are propagated per trajectory.
fn e_step(e: &Ensemble, r: &SymMat, theta: &StateSpace) -> Result<SmoothedStats> {
    let d = e.dim;
    let t_len = e.n_steps;
    let f = Mat::identity(d, d) + &theta.a * e.dt;
    let q = theta.h.as_mat() * e.dt;

    let mut p_pred = Vec::with_capacity(t_len);
    let mut p_filt = Vec::with_capacity(t_len);
    let mut gains = Vec::with_capacity(t_len);
    let mut s_inv = Vec::with_capacity(t_len);
    let mut logdet_sum = 0.0;
    for t in 0..t_len {
        let pp = if t == 0 {
            theta.v0.as_mat().clone()
        } else {
            crate::linalg::symmetrize(&(&f * &p_filt[t - 1] * f.transpose() + &q))
        };
        let s = SymMat::from_symmetric_part(&(&pp + r.as_mat()));
        let si = spd_inverse(&s, f64::INFINITY)?;
        logdet_sum += spd_logdet(&s)?;
        let k = &pp * &si;
        let pf = crate::linalg::symmetrize(&((Mat::identity(d, d) - &k) * &pp));
        p_pred.push(pp);
        p_filt.push(pf);
        gains.push(k);
        s_inv.push(si);
    }
    // smoother gains J_t = P_{t|t} Fᵀ P_{t+1|t}⁻¹ and smoothed covariances
    let mut j_gain = vec![Mat::zeros(d, d); t_len.saturating_sub(1)];
    let mut p_smooth = p_filt.clone();
    for t in (0..t_len - 1).rev() {
        let pp_inv = spd_inverse(&SymMat::from_symmetric_part(&p_pred[t + 1]), f64::INFINITY)?;
        let jt = &p_filt[t] * f.transpose() * pp_inv;
        let ps = &p_filt[t] + &jt * (&p_smooth[t + 1] - &p_pred[t + 1]) * jt.transpose();
        p_smooth[t] = crate::linalg::symmetrize(&ps);
        j_gain[t] = jt;
    }
    let two_pi = (2.0 * std::f64::consts::PI).ln();
    let ll_const = -0.5 * (t_len as f64 * d as f64 * two_pi + logdet_sum);

    struct PerTraj {
        s00: Mat,
        s11: Mat,
        s10: Mat,
        x0: Vector,
        quad: f64,
    }
    let per: Vec<PerTraj> = (0..e.n_traj)
        .into_par_iter()
        .map(|j| {
            let mut m_filt: Vec<Vector> = Vec::with_capacity(t_len);
            let mut m_pred: Vec<Vector> = Vec::with_capacity(t_len);
            let mut quad = 0.0;
            for t in 0..t_len {
                let mp = if t == 0 { theta.mu0.clone() } else { &f * &m_filt[t - 1] };
                let y = Vector::from_column_slice(e.state(j, t));
                let innov = y - &mp;
                quad += innov.dot(&(&s_inv[t] * &innov));
                m_filt.push(&mp + &gains[t] * innov);
                m_pred.push(mp);
            }
            let mut m_s = m_filt.clone();
            for t in (0..t_len - 1).rev() {
                m_s[t] = &m_filt[t] + &j_gain[t] * (&m_s[t + 1] - &m_pred[t + 1]);
            }
            let mut s00 = Mat::zeros(d, d);
            let mut s11 = Mat::zeros(d, d);
            let mut s10 = Mat::zeros(d, d);
            for t in 0..t_len - 1 {
                s00.ger(1.0, &m_s[t], &m_s[t], 1.0);
                s11.ger(1.0, &m_s[t + 1], &m_s[t + 1], 1.0);
                s10.ger(1.0, &m_s[t + 1], &m_s[t], 1.0);
            }
            PerTraj { s00, s11, s10, x0: m_s[0].clone(), quad }
        })
        .collect();

    let n = e.n_traj as f64;
    let mut stats = SmoothedStats {
        s00: Mat::zeros(d, d),
        s11: Mat::zeros(d, d),
        s10: Mat::zeros(d, d),
        x0_sum: Vector::zeros(d),
        x0x0_sum: Mat::zeros(d, d),
        log_likelihood: 0.0,
    };
    let mut quad_total = 0.0;
    for p in per {
        stats.s00 += p.s00;
        stats.s11 += p.s11;
        stats.s10 += p.s10;
        stats.x0x0_sum.ger(1.0, &p.x0, &p.x0, 1.0);
        stats.x0_sum += p.x0;
        quad_total += p.quad;
    }
    // covariance contributions shared by every trajectory
    for t in 0..t_len - 1 {
        stats.s00 += &p_smooth[t] * n;
        stats.s11 += &p_smooth[t + 1] * n;
        stats.s10 += &p_smooth[t + 1] * j_gain[t].transpose() * n;
    }
    stats.x0x0_sum += &p_smooth[0] * n;
    stats.log_likelihood = n * ll_const - 0.5 * quad_total;
    Ok(stats)
}

fn m_step(s: &SmoothedStats, dt: f64, n_traj: usize, n_inc: usize) -> Result<StateSpace> {
    let d = s.s00.nrows();
    // MLE normal equations with smoothed moments: Σ E[ΔX Xᵀ] = S10 − S00
    let a = drift_from_moments(&s.s00, &(&s.s10 - &s.s00), dt)?;
    let f = Mat::identity(d, d) + &a * dt;
    let q = (&s.s11 - &f * s.s10.transpose()) / n_inc as f64;
    let n = n_traj as f64;
    let mu0 = &s.x0_sum / n;
    let v0 = &s.x0x0_sum / n - &mu0 * mu0.transpose();
    Ok(StateSpace {
        a,
        h: project_psd(&SymMat::from_symmetric_part(&(q / dt))),
        mu0,
        v0: project_psd(&SymMat::from_symmetric_part(&v0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;
    use crate::simulator::{
        add_observation_noise, make_irreversible_params, simulate, EnsembleKind, GenSpec, InitSpec,
        ObservationNoise,
    };
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn two_point_trajectory() {
        let e = Ensemble::from_data(1, 2, 1, 0.01, EnsembleKind::Latent, vec![1.0, 1.02]).unwrap();
        let fit = mle_fit(&e).unwrap();
        assert_relative_eq!(fit.a_hat[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.h_hat[(0, 0)], 0.0, epsilon = 1e-24);
        assert!(fit.degenerate);
        assert!(fit.log_likelihood.is_finite());
    }

    #[test]
    fn zero_increments() {
        let data: Vec<f64> = (0..3).flat_map(|j| vec![j as f64 + 1.0, 0.5 * j as f64 - 1.0].repeat(4)).collect();
        let e = Ensemble::from_data(3, 4, 2, 0.1, EnsembleKind::Latent, data).unwrap();
        let fit = mle_fit(&e).unwrap();
        assert!(fit.a_hat.amax() < 1e-15);
        assert!(fit.h_hat.amax() < 1e-30);
    }

    #[test]
    fn singular_gram_is_reported() {
        let e = Ensemble::from_data(2, 3, 1, 0.1, EnsembleKind::Latent, vec![0.0; 6]).unwrap();
        assert_eq!(mle_fit(&e), Err(Error::SingularGram));
    }

    #[test]
    fn ols_shares_drift_and_has_diagonal_diffusion() {
        let p = make_irreversible_params(3, RngSeed(1), &GenSpec::default()).unwrap();
        let e = simulate(&p, 50, 20, &InitSpec::Stationary, RngSeed(2)).unwrap();
        let m = mle_fit(&e).unwrap();
        let o = ols_fit(&e).unwrap();
        assert_eq!(m.a_hat, o.a_hat);
        for i in 0..3 {
            assert_eq!(m.h_hat[(i, i)], o.h_hat[(i, i)]);
            for j in 0..3 {
                if i != j {
                    assert_eq!(o.h_hat[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn mle_maximizes_likelihood_against_perturbations() {
        let p = make_irreversible_params(3, RngSeed(5), &GenSpec::default()).unwrap();
        let e = simulate(&p, 40, 30, &InitSpec::Stationary, RngSeed(6)).unwrap();
        let fit = mle_fit(&e).unwrap();
        assert_relative_eq!(
            fit.log_likelihood,
            log_likelihood(&e, &fit.a_hat, &fit.h_hat).unwrap(),
            max_relative = 1e-12
        );
        let mut rng = RngSeed(7).rng();
        for _ in 0..100 {
            let da = Mat::from_fn(3, 3, |_, _| rng.random_range(-0.3..0.3));
            let b = Mat::from_fn(3, 3, |_, _| rng.random_range(-0.2..0.2));
            let h = SymMat::from_symmetric_part(&(fit.h_hat.as_mat() + &b * b.transpose() - Mat::identity(3, 3) * 0.01 * rng.random::<f64>()));
            if h.eigenvalues().min() <= 0.0 {
                continue;
            }
            let ll = log_likelihood(&e, &(&fit.a_hat + da), &h).unwrap();
            assert!(ll <= fit.log_likelihood);
        }
    }

    #[test]
    fn em_with_zero_noise_is_mle() {
        let p = make_irreversible_params(2, RngSeed(5), &GenSpec::default()).unwrap();
        let e = simulate(&p, 30, 20, &InitSpec::Stationary, RngSeed(6)).unwrap();
        let m = mle_fit(&e).unwrap();
        let em = em_fit(&e, &SymMat::zeros(2), 1).unwrap();
        assert_eq!(m, em);
    }

    #[test]
    fn em_likelihood_is_monotone() {
        let p = make_irreversible_params(3, RngSeed(5), &GenSpec::default()).unwrap();
        let e = simulate(&p, 100, 30, &InitSpec::Stationary, RngSeed(6)).unwrap();
        let y = add_observation_noise(&e, &ObservationNoise::new(0.3).unwrap(), RngSeed(7)).unwrap();
        let (_, trace) = em_fit_traced(&y, &SymMat::scaled_identity(3, 0.09), 20).unwrap();
        assert_eq!(trace.len(), 21);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs().max(1.0), "{trace:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let e = Ensemble::from_data(2, 2, 1, 0.1, EnsembleKind::Latent, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(log_likelihood(&e, &Mat::zeros(2, 2), &SymMat::identity(2)), Err(Error::ShapeMismatch(_))));
        assert!(matches!(em_fit(&e, &SymMat::identity(2), 1), Err(Error::ShapeMismatch(_))));
    }
}
