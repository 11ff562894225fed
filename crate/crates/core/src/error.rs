use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("drift matrix is not Hurwitz (max eigenvalue real part {max_real:.3e})")]
    NonHurwitz { max_real: f64 },
    #[error("linear solve failed: {0}")]
    SolveFailure(String),
    #[error("covariance factorization failed (min eigenvalue {min_eig:.3e})")]
    FactorizationFailure { min_eig: f64 },
    #[error("parameter generation failed after {attempts} attempts")]
    GenerationFailure { attempts: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("covariance is numerically singular (condition number {cond:.3e})")]
    SingularCovariance { cond: f64 },
    #[error("gram matrix of the regressors is singular")]
    SingularGram,
    #[error("EM log-likelihood decreased from {prev} to {next} at iteration {iter}")]
    NonMonotoneLikelihood { iter: usize, prev: f64, next: f64 },
    #[error("eigendecomposition failed: {0}")]
    EigDecompositionFailure(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tumor volume must be positive, got {0}")]
    NonPositiveVolume(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
