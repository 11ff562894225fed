use approx::assert_relative_eq;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use sdeorder::linalg::{lyapunov_residual, max_real_eigenvalue, solve_lyapunov, SymMat};
use sdeorder::score::score;
use sdeorder::score::SliceGaussian;
use sdeorder::{RngSeed, Vector};

fn random_stable(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shift = max_real_eigenvalue(&m) + rng.random_range(0.1..2.0);
    m - DMatrix::identity(d, d) * shift
}

fn random_pd(d: usize, rng: &mut impl Rng) -> SymMat {
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    SymMat::from_symmetric_part(&(&b * b.transpose() + DMatrix::identity(d, d) * 0.1))
}

#[test]
fn lyapunov_residual_on_random_systems() {
    let mut rng = RngSeed(11).rng();
    for k in 0..1000 {
        let d = 1 + k % 10;
        let a = random_stable(d, &mut rng);
        let h = random_pd(d, &mut rng);
        let sigma = solve_lyapunov(&a, &h).unwrap();
        let bound = 1e-10 * h.as_mat().norm().max(1.0);
        assert!(lyapunov_residual(&a, sigma.as_mat(), h.as_mat()) <= bound, "system {k}");
        assert!(sigma.eigenvalues().min() >= -1e-10);
    }
}

/// Log-density of `N(μ, Σ)` up to its constant.
fn log_density(mu: &Vector, precision: &DMatrix<f64>, x: &Vector) -> f64 {
    let r = x - mu;
    -0.5 * r.dot(&(precision * &r))
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = RngSeed(12).rng();
    for c in 0..10 {
        let d = 1 + c % 5;
        let cov = random_pd(d, &mut rng);
        let mu = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = SliceGaussian::new(0, mu.clone(), cov.clone(), cov.clone(), 100);
        let precision = cov.as_mat().clone().try_inverse().unwrap();
        for _ in 0..10 {
            let x = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let s = score(&g, &x).unwrap();
            for i in 0..d {
                let h = 1e-5;
                let mut up = x.clone();
                let mut dn = x.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (log_density(&mu, &precision, &up) - log_density(&mu, &precision, &dn)) / (2.0 * h);
                assert_relative_eq!(s[i], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }
}
