//! Per-slot Gaussian marginals and their closed-form score.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{project_psd, spd_inverse, Mat, SymMat, Vector};
use crate::simulator::Ensemble;

/// Condition-number ceiling for inverting a slice covariance.
pub const MAX_COND: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct SliceGaussian {
    pub t_index: usize,
    pub mean: Vector,
    /// Noise-corrected covariance after the PSD floor.
    pub cov: SymMat,
    /// Unbiased sample covariance before correction.
    pub raw_cov: SymMat,
    pub n_samples: usize,
    precision: Option<Mat>,
}

impl SliceGaussian {
    pub fn new(t_index: usize, mean: Vector, raw_cov: SymMat, cov: SymMat, n_samples: usize) -> Self {
        let precision = spd_inverse(&cov, MAX_COND).ok();
        Self { t_index, mean, cov, raw_cov, n_samples, precision }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ̂⁻¹`, or the conditioning failure that prevents it.
    pub fn precision(&self) -> Result<&Mat> {
        self.precision.as_ref().ok_or_else(|| {
            let ev = self.cov.eigenvalues();
            Error::SingularCovariance { cond: ev.max() / ev.min() }
        })
    }

    pub fn log_density(&self, x: &Vector) -> Result<f64> {
        let p = self.precision()?;
        let r = x - &self.mean;
        let logdet = crate::linalg::spd_logdet(&self.cov)?;
        let d = self.dim() as f64;
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&(p * &r))))
    }
}

/// Sample mean and unbiased covariance of every time slot across the
/// trajectories, with `Σ̂_t = project_psd(Ŝ_t − R)` when a measurement-noise
/// covariance `R` is supplied.
pub fn fit_slices(e: &Ensemble, r: Option<&SymMat>) -> Result<Vec<SliceGaussian>> {
    let n = e.n_traj;
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = e.dim;
    if let Some(r) = r {
        if r.dim() != d {
            return Err(Error::ShapeMismatch(format!("R is {0}x{0}, states have dimension {d}", r.dim())));
        }
    }
    Ok((0..e.n_steps)
        .into_par_iter()
        .map(|t| {
            let mut mean = Vector::zeros(d);
            for j in 0..n {
                mean += Vector::from_column_slice(e.state(j, t));
            }
            mean /= n as f64;
            let mut s = Mat::zeros(d, d);
            for j in 0..n {
                let c = Vector::from_column_slice(e.state(j, t)) - &mean;
                s.ger(1.0, &c, &c, 1.0);
            }
            s /= (n - 1) as f64;
            let raw = SymMat::from_symmetric_part(&s);
            let corrected = match r {
                Some(r) => SymMat::from_symmetric_part(&(raw.as_mat() - r.as_mat())),
                None => raw.clone(),
            };
            SliceGaussian::new(t, mean, raw, project_psd(&corrected), n)
        })
        .collect())
}

/// `∇ₓ log p̂_t(x) = −Σ̂_t⁻¹ (x − μ̂_t)`.
pub fn score(g: &SliceGaussian, x: &Vector) -> Result<Vector> {
    if x.len() != g.dim() {
        return Err(Error::ShapeMismatch(format!("x has length {}, slice dimension {}", x.len(), g.dim())));
    }
    Ok(-(g.precision()? * (x - &g.mean)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, PSD_FLOOR};
    use crate::rng::RngSeed;
    use crate::simulator::EnsembleKind;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn gaussian(mean: Vec<f64>, cov: Mat) -> SliceGaussian {
        let c = SymMat::new(cov).unwrap();
        SliceGaussian::new(0, Vector::from_vec(mean), c.clone(), c, 100)
    }

    #[test]
    fn standard_normal_score_is_negated_point() {
        let g = gaussian(vec![0.0; 3], Mat::identity(3, 3));
        let x = Vector::from_vec(vec![0.3, -1.0, 2.0]);
        assert_relative_eq!(score(&g, &x).unwrap(), -x, epsilon = 1e-15);
    }

    #[test]
    fn one_dimensional_example() {
        let g = gaussian(vec![1.0], Mat::from_element(1, 1, 2.0));
        let s = score(&g, &Vector::from_vec(vec![3.0])).unwrap();
        assert_relative_eq!(s[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn score_vanishes_at_mean_and_is_affine() {
        let cov = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let g = gaussian(vec![1.0, -1.0], cov);
        assert!(score(&g, &g.mean).unwrap().amax() < 1e-15);
        let a = Vector::from_vec(vec![0.2, 0.7]);
        let b = Vector::from_vec(vec![-1.5, 2.0]);
        let mid = (&a + &b) * 0.5;
        let lhs = score(&g, &mid).unwrap();
        let rhs = (score(&g, &a).unwrap() + score(&g, &b).unwrap()) * 0.5;
        assert_relative_eq!(lhs, rhs, epsilon = 1e-13);
    }

    #[test]
    fn identical_trajectories_give_floored_covariance() {
        let data: Vec<f64> = (0..4).flat_map(|_| vec![1.0, 2.0, 3.0, 4.0]).collect();
        let e = Ensemble::from_data(4, 2, 2, 0.1, EnsembleKind::Observed, data).unwrap();
        let r = SymMat::scaled_identity(2, 0.25);
        let slices = fit_slices(&e, Some(&r)).unwrap();
        for s in &slices {
            assert_eq!(s.raw_cov.amax(), 0.0);
            assert_relative_eq!(*s.cov.as_mat(), Mat::identity(2, 2) * PSD_FLOOR, epsilon = 1e-20);
        }
        let single = Ensemble::from_data(1, 2, 2, 0.1, EnsembleKind::Observed, vec![0.0; 4]).unwrap();
        assert!(matches!(fit_slices(&single, None), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn zero_r_matches_uncorrected() {
        let mut rng = RngSeed(3).rng();
        let data: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let e = Ensemble::from_data(10, 3, 2, 0.1, EnsembleKind::Observed, data).unwrap();
        let a = fit_slices(&e, None).unwrap();
        let b = fit_slices(&e, Some(&SymMat::zeros(2))).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.cov, y.cov);
            assert_eq!(x.cov, x.raw_cov);
        }
    }

    #[test]
    fn large_sample_slice_fit_is_consistent() {
        let mean = Vector::from_vec(vec![1.0, -2.0]);
        let cov = SymMat::new(Mat::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])).unwrap();
        let n = 100_000;
        let xs = sample_gaussian(&mean, &cov, n, RngSeed(12)).unwrap();
        let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied().chain(x.iter().copied())).collect();
        let e = Ensemble::from_data(n, 2, 2, 0.1, EnsembleKind::Latent, data).unwrap();
        let g = &fit_slices(&e, None).unwrap()[0];
        for (a, b) in g.mean.iter().zip(mean.iter()) {
            assert!((a - b).abs() <= 0.02 * b.abs());
        }
        for (a, b) in g.cov.iter().zip(cov.iter()) {
            assert!((a - b).abs() <= 0.02 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn ill_conditioned_slice_is_singular() {
        let cov = Mat::from_diagonal(&Vector::from_vec(vec![1e6, 1e-8]));
        let g = gaussian(vec![0.0, 0.0], cov);
        assert!(matches!(score(&g, &Vector::zeros(2)), Err(Error::SingularCovariance { .. })));
    }
}
