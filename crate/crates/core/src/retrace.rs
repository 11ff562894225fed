//! Alternating order recovery: estimate `(Â, Ĥ)` from the current ordering
//! hypothesis, refit per-slot Gaussians, then bubble-sort every trajectory
//! with the pairwise drift–score comparator.
//!
//! For an adjacent pair at positions `t < s = t + 1` the empirical drift is
//! `b̂ = |x_s − x_t| / dt` (elementwise) and the two errors are
//! `err_t = ‖b̂ − Ĥ·score_t(x_t)‖²`, `err_s = ‖b̂ − Ĥ·score_s(x_s)‖²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit, Estimator, FitResult};
use crate::linalg::{Mat, SymMat, Vector};
use crate::metrics::timed;
use crate::score::{fit_slices, score, SliceGaussian};
use crate::simulator::{Ensemble, PermutationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwapDirection {
    /// Swap when `err_t < err_s`.
    #[default]
    Paper,
    /// Swap when `err_t > err_s`.
    Reversed,
}

/// Which slot statistics score the later point of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSlices {
    /// `x_t` under slot `t`, `x_s` under slot `s`.
    #[default]
    Matched,
    /// Both points under slot `t`.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetraceConfig {
    pub max_outer_iters: usize,
    pub swap_direction: SwapDirection,
    pub drift_abs: bool,
    pub refit_slices_each_iter: bool,
    pub score_slices: ScoreSlices,
    /// Step size; the ensemble's own `dt` when absent.
    pub dt: Option<f64>,
    /// EM iterations per outer iteration when the EM estimator is used.
    pub em_iters: usize,
}

impl Default for RetraceConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 10,
            swap_direction: SwapDirection::Paper,
            drift_abs: true,
            refit_slices_each_iter: true,
            score_slices: ScoreSlices::Matched,
            dt: None,
            em_iters: 10,
        }
    }
}

impl RetraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidArgument("max_outer_iters must be ≥ 1".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    fn fires(&self, err_t: f64, err_s: f64) -> bool {
        match self.swap_direction {
            SwapDirection::Paper => err_t < err_s,
            SwapDirection::Reversed => err_t > err_s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetraceResult {
    /// `perms[j][k]`: slot of the input trajectory `j` placed at position `k`.
    pub ordering: PermutationRecord,
    pub fit: FitResult,
    pub outer_iters_used: usize,
    pub converged: bool,
    /// Sum over trajectories and adjacent positions of `min(err_t, err_s)`
    /// after each outer iteration's sort.
    pub pairwise_error_trace: Vec<f64>,
    pub swaps_per_iter: Vec<usize>,
    pub iter_runtime_s: Vec<f64>,
}

impl RetraceResult {
    pub fn mean_iter_runtime_s(&self) -> f64 {
        if self.iter_runtime_s.is_empty() {
            0.0
        } else {
            self.iter_runtime_s.iter().sum::<f64>() / self.iter_runtime_s.len() as f64
        }
    }
}

fn empirical_drift(x_t: &[f64], x_s: &[f64], dt: f64, abs: bool, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x_t).zip(x_s) {
        let v = (b - a) / dt;
        *o = if abs { v.abs() } else { v };
    }
}

/// Drift–score errors `(err_t, err_s)` for one adjacent pair.
#[allow(clippy::too_many_arguments)]
pub fn pair_errors(
    x_t: &Vector,
    x_s: &Vector,
    g_t: &SliceGaussian,
    g_s: &SliceGaussian,
    h: &SymMat,
    dt: f64,
    cfg: &RetraceConfig,
) -> Result<(f64, f64)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut b = Vector::zeros(x_t.len());
    empirical_drift(x_t.as_slice(), x_s.as_slice(), dt, cfg.drift_abs, b.as_mut_slice());
    let g_later = match cfg.score_slices {
        ScoreSlices::Matched => g_s,
        ScoreSlices::Single => g_t,
    };
    let err_t = (&b - h.as_mat() * score(g_t, x_t)?).norm_squared();
    let err_s = (&b - h.as_mat() * score(g_later, x_s)?).norm_squared();
    Ok((err_t, err_s))
}

/// Per-slot affine maps `x ↦ Ĥ·score_t(x) = c_t − M_t x`, with
/// `M_t = Ĥ Σ̂_t⁻¹` and `c_t = M_t μ̂_t`, precomputed for the inner loop.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    dim: usize,
    m: Vec<Mat>,
    c: Vec<Vector>,
}

impl ScoreTable {
    pub fn new(slices: &[SliceGaussian], h: &SymMat) -> Result<Self> {
        let dim = h.dim();
        let mut m = Vec::with_capacity(slices.len());
        let mut c = Vec::with_capacity(slices.len());
        for g in slices {
            if g.dim() != dim {
                return Err(Error::ShapeMismatch("slice and diffusion dimensions differ".into()));
            }
            let mt = h.as_mat() * g.precision()?;
            c.push(&mt * &g.mean);
            m.push(mt);
        }
        Ok(Self { dim, m, c })
    }

    pub fn n_slots(&self) -> usize {
        self.m.len()
    }

    /// `‖b − Ĥ·score_slot(x)‖²`
    fn error(&self, slot: usize, b: &[f64], x: &[f64]) -> f64 {
        let m = &self.m[slot];
        let c = &self.c[slot];
        let d = self.dim;
        let mut total = 0.0;
        for i in 0..d {
            let mut mx = 0.0;
            for k in 0..d {
                mx += m[(i, k)] * x[k];
            }
            let r = b[i] + mx - c[i];
            total += r * r;
        }
        total
    }

    fn pair(&self, t: usize, x_t: &[f64], x_s: &[f64], dt: f64, cfg: &RetraceConfig, b: &mut [f64]) -> (f64, f64) {
        empirical_drift(x_t, x_s, dt, cfg.drift_abs, b);
        let later = match cfg.score_slices {
            ScoreSlices::Matched => t + 1,
            ScoreSlices::Single => t,
        };
        (self.error(t, b, x_t), self.error(later, b, x_s))
    }
}

/// One full pass of the shrinking-bound bubble sort over a trajectory.
/// `order[k]` indexes the row of `traj` (a `T × d` block) currently at
/// position `k`; swaps happen in place. Returns the swap count.
pub fn sort_pass_with_table(order: &mut [usize], traj: &[f64], table: &ScoreTable, dt: f64, cfg: &RetraceConfig) -> usize {
    let d = table.dim;
    let row = |i: usize| &traj[i * d..(i + 1) * d];
    let mut b = vec![0.0; d];
    let mut swaps = 0;
    let mut end = order.len().saturating_sub(1);
    while end != 0 {
        for t in 0..end {
            let s = t + 1;
            let (err_t, err_s) = table.pair(t, row(order[t]), row(order[s]), dt, cfg, &mut b);
            if cfg.fires(err_t, err_s) {
                order.swap(t, s);
                swaps += 1;
            }
        }
        end -= 1;
    }
    swaps
}

/// [`sort_pass_with_table`] on a copy of `order`, building the score table
/// from `slices` and `h`.
pub fn sort_pass(
    order: &[usize],
    traj: &[f64],
    slices: &[SliceGaussian],
    h: &SymMat,
    dt: f64,
    cfg: &RetraceConfig,
) -> Result<(Vec<usize>, usize)> {
    if order.len() < 2 || slices.len() != order.len() || traj.len() != order.len() * h.dim() {
        return Err(Error::ShapeMismatch("ordering, slices and trajectory lengths disagree".into()));
    }
    let table = ScoreTable::new(slices, h)?;
    let mut out = order.to_vec();
    let swaps = sort_pass_with_table(&mut out, traj, &table, dt, cfg);
    Ok((out, swaps))
}

/// `Σ_t min(err_t, err_s)` over adjacent positions of one trajectory.
pub fn total_pair_error(order: &[usize], traj: &[f64], table: &ScoreTable, dt: f64, cfg: &RetraceConfig) -> f64 {
    let d = table.dim;
    let row = |i: usize| &traj[i * d..(i + 1) * d];
    let mut b = vec![0.0; d];
    (0..order.len() - 1)
        .map(|t| {
            let (a, c) = table.pair(t, row(order[t]), row(order[t + 1]), dt, cfg, &mut b);
            a.min(c)
        })
        .sum()
}

/// Run the alternating estimate/sort loop on an order-corrupted ensemble.
/// `r` is the measurement-noise covariance (used for the slice correction
/// and by the EM estimator).
pub fn retrace(e: &Ensemble, r: Option<&SymMat>, cfg: &RetraceConfig, estimator: Estimator) -> Result<RetraceResult> {
    cfg.validate()?;
    if e.n_traj < 2 || e.n_steps < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: e.n_traj.min(e.n_steps) });
    }
    retrace_from(e, r, cfg, estimator, vec![(0..e.n_steps).collect(); e.n_traj])
}

/// Like [`retrace`] but starting from a given ordering hypothesis.
pub fn retrace_from(
    e: &Ensemble,
    r: Option<&SymMat>,
    cfg: &RetraceConfig,
    estimator: Estimator,
    mut orders: Vec<Vec<usize>>,
) -> Result<RetraceResult> {
    cfg.validate()?;
    let dt = cfg.dt.unwrap_or(e.dt);
    let mut slices: Option<Vec<SliceGaussian>> = None;
    let mut trace = Vec::new();
    let mut swaps_per_iter = Vec::new();
    let mut runtimes = Vec::new();
    let mut converged = false;
    let mut last_fit: Option<FitResult> = None;
    let mut iters = 0;

    for k in 0..cfg.max_outer_iters {
        iters = k + 1;
        let (step, secs) = timed(|| -> Result<(FitResult, usize, f64)> {
            let hyp = e.reorder(&orders);
            let fit_k = fit(&hyp, estimator, r, cfg.em_iters)?;
            if cfg.refit_slices_each_iter || slices.is_none() {
                slices = Some(fit_slices(&hyp, r)?);
            }
            let table = ScoreTable::new(slices.as_ref().unwrap(), &fit_k.h_hat)?;
            let (swaps, err): (Vec<usize>, Vec<f64>) = orders
                .par_iter_mut()
                .enumerate()
                .map(|(j, order)| {
                    let traj = e.trajectory(j);
                    let n = sort_pass_with_table(order, traj, &table, dt, cfg);
                    (n, total_pair_error(order, traj, &table, dt, cfg))
                })
                .unzip();
            Ok((fit_k, swaps.iter().sum(), err.iter().sum()))
        });
        let (fit_k, swaps, err) = step?;
        runtimes.push(secs);
        swaps_per_iter.push(swaps);
        trace.push(err);
        last_fit = Some(fit_k);
        if swaps == 0 {
            converged = true;
            break;
        }
    }
    let fit = match (converged, last_fit) {
        (true, Some(f)) => f,
        _ => fit(&e.reorder(&orders), estimator, r, cfg.em_iters)?,
    };
    Ok(RetraceResult {
        ordering: PermutationRecord::per_trajectory(orders),
        fit,
        outer_iters_used: iters,
        converged,
        pairwise_error_trace: trace,
        swaps_per_iter,
        iter_runtime_s: runtimes,
    })
}
