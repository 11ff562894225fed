//! Dense linear-algebra helpers shared by every other module: symmetric
//! matrices, the continuous Lyapunov solver, PSD projection and Gaussian
//! sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::rng::RngSeed;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigenvalue floor applied by [`project_psd`].
pub const PSD_FLOOR: f64 = 1e-8;

const SYM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
}

/// Symmetric matrix. Construction symmetrizes the input after checking that
/// it is symmetric to within 1e-12 relative tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat(Mat);

impl SymMat {
    pub fn new(m: Mat) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYM_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "matrix is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        Ok(SymMat(symmetrize(&m)))
    }

    /// Symmetrize without checking; for matrices that are symmetric up to
    /// rounding by construction.
    pub fn from_symmetric_part(m: &Mat) -> Self {
        SymMat(symmetrize(m))
    }

    pub fn identity(d: usize) -> Self {
        SymMat(Mat::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SymMat(Mat::zeros(d, d))
    }

    pub fn scaled_identity(d: usize, c: f64) -> Self {
        SymMat(Mat::identity(d, d) * c)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn eigenvalues(&self) -> Vector {
        SymmetricEigen::new(self.0.clone()).eigenvalues
    }

    pub fn definiteness(&self) -> Definiteness {
        let ev = self.eigenvalues();
        let scale = ev.amax().max(f64::MIN_POSITIVE);
        let min = ev.min();
        if min > 1e-12 * scale {
            Definiteness::PositiveDefinite
        } else if min >= -1e-12 * scale {
            Definiteness::PositiveSemidefinite
        } else {
            Definiteness::Indefinite
        }
    }
}

impl Deref for SymMat {
    type Target = Mat;
    fn deref(&self) -> &Mat {
        &self.0
    }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

/// Largest real part over the eigenvalues of a general square matrix.
pub fn max_real_eigenvalue(a: &Mat) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Stationary covariance of `dX = AX dt + G dW`: solves `AΣ + ΣAᵀ + H = 0`
/// through the vectorized system `(I⊗A + A⊗I) vec Σ = −vec H`.
pub fn solve_lyapunov(a: &Mat, h: &SymMat) -> Result<SymMat> {
    let d = a.nrows();
    if !a.is_square() || h.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "lyapunov: A is {}x{}, H is {}x{}",
            a.nrows(),
            a.ncols(),
            h.dim(),
            h.dim()
        )));
    }
    let max_real = max_real_eigenvalue(a);
    if max_real >= -1e-10 {
        return Err(Error::NonHurwitz { max_real });
    }
    let eye = Mat::identity(d, d);
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -Vector::from_column_slice(h.as_slice());
    let lu = k.lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SolveFailure("Kronecker system is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolveFailure("non-finite Lyapunov solution".into()));
    }
    let sigma = Mat::from_column_slice(d, d, x.as_slice());
    Ok(SymMat::from_symmetric_part(&sigma))
}

/// Residual `‖AΣ + ΣAᵀ + H‖_F`.
pub fn lyapunov_residual(a: &Mat, sigma: &Mat, h: &Mat) -> f64 {
    (a * sigma + sigma * a.transpose() + h).norm()
}

/// Clip eigenvalues below [`PSD_FLOOR`]. Inputs whose spectrum is already
/// above the floor are returned unchanged.
pub fn project_psd(s: &SymMat) -> SymMat {
    project_psd_with_floor(s, PSD_FLOOR)
}

pub fn project_psd_with_floor(s: &SymMat, floor: f64) -> SymMat {
    let eig = SymmetricEigen::new(s.as_mat().clone());
    if eig.eigenvalues.min() >= floor {
        return s.clone();
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let recon = v * Mat::from_diagonal(&clipped) * v.transpose();
    SymMat::from_symmetric_part(&recon)
}

/// Symmetric square-root factor `L` with `L Lᵀ = cov`, built from the
/// eigendecomposition so that singular (PSD) covariances are accepted.
pub fn psd_factor(cov: &SymMat) -> Result<Mat> {
    let eig = SymmetricEigen::new(cov.as_mat().clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(Error::FactorizationFailure { min_eig });
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Mat::from_diagonal(&roots))
}

/// Draws from `N(mean, cov)` using a precomputed factor.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vector,
    factor: Mat,
}

impl GaussianSampler {
    pub fn new(mean: Vector, cov: &SymMat) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        let factor = psd_factor(cov)?;
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let z: Vector = Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &self.mean + &self.factor * z;
        out.copy_from_slice(x.as_slice());
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        Vector::from_vec(out)
    }
}

pub fn sample_gaussian(mean: &Vector, cov: &SymMat, n: usize, seed: RngSeed) -> Result<Vec<Vector>> {
    let sampler = GaussianSampler::new(mean.clone(), cov)?;
    let mut rng = seed.rng();
    Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
}

/// Inverse of a symmetric positive-definite matrix through its
/// eigendecomposition, with the condition number checked against `max_cond`.
pub fn spd_inverse(m: &SymMat, max_cond: f64) -> Result<Mat> {
    let eig = SymmetricEigen::new(m.as_mat().clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || max / min > max_cond {
        let cond = if min <= 0.0 { f64::INFINITY } else { max / min };
        return Err(Error::SingularCovariance { cond });
    }
    let inv = eig.eigenvalues.map(|v| 1.0 / v);
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * Mat::from_diagonal(&inv) * v.transpose())))
}

/// `log det` of a symmetric positive-definite matrix.
pub fn spd_logdet(m: &SymMat) -> Result<f64> {
    let ev = m.eigenvalues();
    if ev.min() <= 0.0 {
        return Err(Error::SingularCovariance { cond: f64::INFINITY });
    }
    Ok(ev.iter().map(|v| v.ln()).sum())
}
