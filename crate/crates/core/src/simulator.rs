//! Linear additive-noise SDE ensembles: parameter generation, Euler–Maruyama
//! simulation, measurement noise and temporal-order corruption.

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_lyapunov, GaussianSampler, Mat, SymMat, Vector};
use crate::rng::RngSeed;

/// `dX = A X dt + G dW`, observed on a grid of step `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSdeParams {
    pub a: Mat,
    pub g: Mat,
    pub h: SymMat,
    pub dt: f64,
}

impl LinearSdeParams {
    pub fn new(a: Mat, g: Mat, dt: f64) -> Result<Self> {
        if !a.is_square() || g.nrows() != a.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "A is {}x{}, G is {}x{}",
                a.nrows(),
                a.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        let h = SymMat::from_symmetric_part(&(&g * g.transpose()));
        Ok(Self { a, g, h, dt })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Latent,
    Observed,
}

/// `N × T × d` tensor of states, stored trajectory-major, time-major,
/// dimension-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub n_traj: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub dt: f64,
    pub kind: EnsembleKind,
    data: Vec<f64>,
}

impl Ensemble {
    pub fn from_data(
        n_traj: usize,
        n_steps: usize,
        dim: usize,
        dt: f64,
        kind: EnsembleKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n_traj * n_steps * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {n_traj}x{n_steps}x{dim}, got {}",
                n_traj * n_steps * dim,
                data.len()
            )));
        }
        if n_steps < 2 || dim == 0 || n_traj == 0 {
            return Err(Error::InvalidArgument(format!(
                "ensemble needs N ≥ 1, T ≥ 2, d ≥ 1 (got {n_traj}, {n_steps}, {dim})"
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("ensemble has non-finite entries".into()));
        }
        Ok(Self { n_traj, n_steps, dim, dt, kind, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// State of trajectory `j` at time slot `t`.
    pub fn state(&self, j: usize, t: usize) -> &[f64] {
        let off = (j * self.n_steps + t) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Contiguous `T × d` block for trajectory `j`.
    pub fn trajectory(&self, j: usize) -> &[f64] {
        let len = self.n_steps * self.dim;
        &self.data[j * len..(j + 1) * len]
    }

    pub fn trajectories(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.n_steps * self.dim)
    }

    /// Reorder every trajectory: output slot `k` of trajectory `j` takes the
    /// input slot `orders[j][k]`.
    pub fn reorder(&self, orders: &[Vec<usize>]) -> Ensemble {
        assert_eq!(orders.len(), self.n_traj);
        let (t_len, d) = (self.n_steps, self.dim);
        let mut data = vec![0.0; self.data.len()];
        data.par_chunks_mut(t_len * d)
            .zip(orders.par_iter())
            .enumerate()
            .for_each(|(j, (out, order))| {
                let src = self.trajectory(j);
                for (k, &from) in order.iter().enumerate() {
                    out[k * d..(k + 1) * d].copy_from_slice(&src[from * d..(from + 1) * d]);
                }
            });
        Ensemble { data, ..self.clone_header() }
    }

    fn clone_header(&self) -> Ensemble {
        Ensemble {
            n_traj: self.n_traj,
            n_steps: self.n_steps,
            dim: self.dim,
            dt: self.dt,
            kind: self.kind,
            data: Vec::new(),
        }
    }

    /// Keep only the trajectories in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Ensemble> {
        let mut data = Vec::with_capacity(idx.len() * self.n_steps * self.dim);
        for &j in idx {
            data.extend_from_slice(self.trajectory(j));
        }
        Ensemble::from_data(idx.len(), self.n_steps, self.dim, self.dt, self.kind, data)
    }

    /// Apply an invertible linear map to every state.
    pub fn transform(&self, p: &Mat) -> Ensemble {
        let d = self.dim;
        let mut data = vec![0.0; self.data.len()];
        for (out, x) in data.chunks_mut(d).zip(self.data.chunks(d)) {
            let y = p * Vector::from_column_slice(x);
            out.copy_from_slice(y.as_slice());
        }
        Ensemble { data, ..self.clone_header() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    Shared,
    #[default]
    PerTrajectory,
}

/// Time-slot permutations. `perms[j][k]` is the source slot placed at output
/// position `k`; shared mode stores a single permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub mode: PermutationMode,
    pub perms: Vec<Vec<usize>>,
}

impl PermutationRecord {
    pub fn identity(mode: PermutationMode, n_traj: usize, n_steps: usize) -> Self {
        let n = match mode {
            PermutationMode::Shared => 1,
            PermutationMode::PerTrajectory => n_traj,
        };
        Self { mode, perms: vec![(0..n_steps).collect(); n] }
    }

    pub fn per_trajectory(perms: Vec<Vec<usize>>) -> Self {
        Self { mode: PermutationMode::PerTrajectory, perms }
    }

    pub fn perm(&self, j: usize) -> &[usize] {
        match self.mode {
            PermutationMode::Shared => &self.perms[0],
            PermutationMode::PerTrajectory => &self.perms[j],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.perms.first().map_or(0, |p| p.len())
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.perms {
            let mut seen = vec![false; p.len()];
            for &i in p {
                if i >= p.len() || seen[i] {
                    return Err(Error::InvalidArgument("permutation is not a bijection".into()));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// One permutation per trajectory.
    pub fn expand(&self, n_traj: usize) -> Vec<Vec<usize>> {
        (0..n_traj).map(|j| self.perm(j).to_vec()).collect()
    }

    pub fn inverse(&self) -> PermutationRecord {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (k, &i) in p.iter().enumerate() {
                    inv[i] = k;
                }
                inv
            })
            .collect();
        Self { mode: self.mode, perms }
    }

    /// Record of applying `self` first and then `then`: slot `k` of the final
    /// ensemble holds slot `self[then[k]]` of the original.
    pub fn then(&self, then: &PermutationRecord, n_traj: usize) -> PermutationRecord {
        let perms = (0..n_traj)
            .map(|j| {
                let first = self.perm(j);
                then.perm(j).iter().map(|&k| first[k]).collect()
            })
            .collect();
        PermutationRecord::per_trajectory(perms)
    }
}

pub fn apply_permutation(e: &Ensemble, record: &PermutationRecord) -> Ensemble {
    e.reorder(&record.expand(e.n_traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub sigma_eps: f64,
}

impl ObservationNoise {
    pub fn new(sigma_eps: f64) -> Result<Self> {
        if !(sigma_eps >= 0.0 && sigma_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_eps must be ≥ 0, got {sigma_eps}")));
        }
        Ok(Self { sigma_eps })
    }

    pub fn r(&self, d: usize) -> SymMat {
        SymMat::scaled_identity(d, self.sigma_eps * self.sigma_eps)
    }
}

/// Controls for [`make_irreversible_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    /// Magnitude band of the symmetric part's eigenvalues.
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Scale of the skew-symmetric (rotational) part of A; zero gives a
    /// symmetric, reversible drift when H = I.
    pub rotation_scale: f64,
    pub g_scale: f64,
    /// Relative random perturbation of G around `g_scale · I`.
    pub g_jitter: f64,
    pub require_irreversible: bool,
    pub min_irreversibility: f64,
    pub dt: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            lambda_min: 0.2,
            lambda_max: 2.0,
            rotation_scale: 1.0,
            g_scale: 1.0,
            g_jitter: 0.2,
            require_irreversible: true,
            min_irreversibility: 1e-6,
            dt: 0.01,
        }
    }
}

impl GenSpec {
    /// Symmetric negative-definite drift with `H = I`.
    pub fn reversible() -> Self {
        Self { rotation_scale: 0.0, g_jitter: 0.0, require_irreversible: false, ..Self::default() }
    }
}

const GEN_ATTEMPTS: usize = 100;

/// Random stable drift `A = Q diag(−λ) Qᵀ + K` (K skew) and diffusion factor
/// `G`. Eigenvalues of A have real parts inside `[−λ_max, −λ_min]` because
/// the skew part does not move the numerical range of the symmetric part.
pub fn make_irreversible_params(d: usize, seed: RngSeed, spec: &GenSpec) -> Result<LinearSdeParams> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be ≥ 1".into()));
    }
    if !(spec.lambda_min > 0.0 && spec.lambda_max >= spec.lambda_min) {
        return Err(Error::InvalidArgument("eigenvalue band must satisfy 0 < λ_min ≤ λ_max".into()));
    }
    let mut rng = seed.rng();
    for _ in 0..GEN_ATTEMPTS {
        let z = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = z.qr().q();
        let lambdas = Vector::from_fn(d, |_, _| rng.random_range(spec.lambda_min..=spec.lambda_max));
        let sym = -(&q * Mat::from_diagonal(&lambdas) * q.transpose());
        let w = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let skew = (&w - w.transpose()) * (0.5 * spec.rotation_scale / (d as f64).sqrt());
        let a = crate::linalg::symmetrize(&sym) + skew;
        let jitter = Mat::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = (Mat::identity(d, d) + jitter * (spec.g_jitter / (d as f64).sqrt())) * spec.g_scale;
        let params = LinearSdeParams::new(a, g, spec.dt)?;
        if SymmetricEigen::new(params.h.as_mat().clone()).eigenvalues.min() <= 1e-8 {
            continue;
        }
        if spec.require_irreversible {
            let score = match irreversibility_score(&params.a, &params.h) {
                Ok(s) => s,
                Err(_) => continue,
            };
            if score <= spec.min_irreversibility.max(1e-6) {
                continue;
            }
        }
        return Ok(params);
    }
    Err(Error::GenerationFailure { attempts: GEN_ATTEMPTS })
}

/// Normalized stationary probability current of a linear SDE.
///
/// For a Gaussian stationary law the current vanishes iff `AΣ∞ + H/2 = 0`.
/// The Lyapunov equation makes that matrix skew, equal to `(AΣ∞ − Σ∞Aᵀ)/2`,
/// so the score is `‖AΣ∞ − Σ∞Aᵀ‖_F / ‖H‖_F`: zero under detailed balance
/// and invariant to the joint rescaling `(A, H) → (cA, cH)`.
pub fn irreversibility_score(a: &Mat, h: &SymMat) -> Result<f64> {
    let sigma = solve_lyapunov(a, h)?;
    let s = sigma.as_mat();
    let hn = h.norm();
    if hn == 0.0 {
        return Ok(0.0);
    }
    let score = (a * s - s * a.transpose()).norm() / hn;
    // below solver precision the current is indistinguishable from zero
    Ok(if score < 1e-12 { 0.0 } else { score })
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Stationary,
    Gaussian { mean: Vector, cov: SymMat },
}

/// Euler–Maruyama: `X_{i+1} = X_i + A X_i dt + G ΔW_i`, `ΔW_i ~ N(0, dt I)`.
/// Trajectory `j` draws from `seed.derive(j)`, so output is independent of
/// the thread schedule.
pub fn simulate(
    params: &LinearSdeParams,
    n_traj: usize,
    n_steps: usize,
    init: &InitSpec,
    seed: RngSeed,
) -> Result<Ensemble> {
    if n_steps < 2 || n_traj == 0 {
        return Err(Error::InvalidArgument(format!("need N ≥ 1 and T ≥ 2, got {n_traj}, {n_steps}")));
    }
    let d = params.dim();
    let m = params.g.ncols();
    let dt = params.dt;
    let init_sampler = match init {
        InitSpec::Stationary => {
            GaussianSampler::new(Vector::zeros(d), &solve_lyapunov(&params.a, &params.h)?)?
        }
        InitSpec::Gaussian { mean, cov } => GaussianSampler::new(mean.clone(), cov)?,
    };
    // X_{i+1} = (I + A dt) X_i + √dt G z
    let transition = Mat::identity(d, d) + &params.a * dt;
    let noise = &params.g * dt.sqrt();
    let mut data = vec![0.0; n_traj * n_steps * d];
    data.par_chunks_mut(n_steps * d).enumerate().for_each(|(j, out)| {
        let mut rng = seed.derive(j as u64).rng();
        init_sampler.sample_into(&mut rng, &mut out[..d]);
        let mut z = Vector::zeros(m);
        for t in 1..n_steps {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            let prev = Vector::from_column_slice(&out[(t - 1) * d..t * d]);
            let next = &transition * prev + &noise * &z;
            out[t * d..(t + 1) * d].copy_from_slice(next.as_slice());
        }
    });
    Ensemble::from_data(n_traj, n_steps, d, dt, EnsembleKind::Latent, data)
}

/// `Y = X + ε`, `ε ~ N(0, σ_ε² I)` independently per slot and trajectory.
pub fn add_observation_noise(e: &Ensemble, noise: &ObservationNoise, seed: RngSeed) -> Result<Ensemble> {
    if e.kind != EnsembleKind::Latent {
        return Err(Error::InvalidArgument("observation noise applies to latent ensembles".into()));
    }
    let mut data = e.data.clone();
    if noise.sigma_eps > 0.0 {
        let s = noise.sigma_eps;
        data.par_chunks_mut(e.n_steps * e.dim).enumerate().for_each(|(j, out)| {
            let mut rng = seed.derive(j as u64).rng();
            for v in out.iter_mut() {
                *v += s * rng.sample::<f64, _>(StandardNormal);
            }
        });
    }
    Ensemble::from_data(e.n_traj, e.n_steps, e.dim, e.dt, EnsembleKind::Observed, data)
}

/// Shuffle the time axis, returning the shuffled ensemble and the record
/// `perms[j][k]` = true time index of output slot `k`.
pub fn corrupt_order(e: &Ensemble, mode: PermutationMode, seed: RngSeed) -> (Ensemble, PermutationRecord) {
    let t_len = e.n_steps;
    let shuffled = |s: RngSeed| {
        let mut p: Vec<usize> = (0..t_len).collect();
        p.shuffle(&mut s.rng());
        p
    };
    let perms = match mode {
        PermutationMode::Shared => vec![shuffled(seed)],
        PermutationMode::PerTrajectory => (0..e.n_traj).map(|j| shuffled(seed.derive(j as u64))).collect(),
    };
    let record = PermutationRecord { mode, perms };
    (apply_permutation(e, &record), record)
}
