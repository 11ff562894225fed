//! Ordering and parameter error metrics.
//!
//! Orderings are compared as [`PermutationRecord`]s over the same source
//! slots: `truth.perm(j)[k]` is the slot that belongs at position `k`,
//! `hyp.perm(j)[k]` the slot a method put there.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::simulator::{PermutationMode, PermutationRecord};

fn n_compared(truth: &PermutationRecord, hyp: &PermutationRecord) -> Result<usize> {
    if truth.n_steps() != hyp.n_steps() || truth.n_steps() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "orderings over {} and {} steps",
            truth.n_steps(),
            hyp.n_steps()
        )));
    }
    use PermutationMode::*;
    match (truth.mode, hyp.mode) {
        (PerTrajectory, PerTrajectory) if truth.perms.len() != hyp.perms.len() => Err(Error::ShapeMismatch(format!(
            "orderings for {} and {} trajectories",
            truth.perms.len(),
            hyp.perms.len()
        ))),
        _ => Ok(truth.perms.len().max(hyp.perms.len())),
    }
}

/// Fraction of exactly matched positions for each trajectory.
pub fn per_trajectory_accuracy(truth: &PermutationRecord, hyp: &PermutationRecord) -> Result<Vec<f64>> {
    let n = n_compared(truth, hyp)?;
    let t = truth.n_steps() as f64;
    Ok((0..n)
        .map(|j| truth.perm(j).iter().zip(hyp.perm(j)).filter(|(a, b)| a == b).count() as f64 / t)
        .collect())
}

/// Mean over trajectories of the exact-position match rate. A reversed
/// ordering earns no credit.
pub fn ordering_accuracy(truth: &PermutationRecord, hyp: &PermutationRecord) -> Result<f64> {
    let acc = per_trajectory_accuracy(truth, hyp)?;
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

/// Kendall's τ of the sequence `r[k]`, `r` a permutation of `0..T`, against
/// the identity: `(concordant − discordant) / (T choose 2)`.
pub fn kendall_tau_ranks(r: &[usize]) -> f64 {
    let t = r.len();
    if t < 2 {
        return 1.0;
    }
    let mut net: i64 = 0;
    for a in 0..t {
        for b in a + 1..t {
            net += if r[a] < r[b] { 1 } else { -1 };
        }
    }
    net as f64 / (t * (t - 1) / 2) as f64
}

/// Per-trajectory Kendall's τ between the true and hypothesized positions of
/// every slot, averaged with sign.
pub fn kendall_tau(truth: &PermutationRecord, hyp: &PermutationRecord) -> Result<f64> {
    let n = n_compared(truth, hyp)?;
    let t = truth.n_steps();
    let mut total = 0.0;
    let mut true_pos = vec![0; t];
    for j in 0..n {
        for (k, &slot) in truth.perm(j).iter().enumerate() {
            true_pos[slot] = k;
        }
        let r: Vec<usize> = hyp.perm(j).iter().map(|&slot| true_pos[slot]).collect();
        total += kendall_tau_ranks(&r);
    }
    Ok(total / n as f64)
}

/// `(1/(rc)) Σ |A_ij − Â_ij|`.
pub fn param_mae(truth: &Mat, est: &Mat) -> Result<f64> {
    if truth.shape() != est.shape() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", truth.shape(), est.shape())));
    }
    Ok((truth - est).abs().sum() / truth.len() as f64)
}

/// Run `f` and report its wall time on the monotonic clock.
pub fn timed<T, F: FnOnce() -> T>(f: F) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ordering_accuracy: f64,
    pub mae_a: f64,
    pub mae_h: f64,
    pub kendall_tau: f64,
    pub mean_iter_runtime_s: f64,
    pub per_trajectory_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn new(
        truth: &PermutationRecord,
        hyp: &PermutationRecord,
        (a, a_hat): (&Mat, &Mat),
        (h, h_hat): (&Mat, &Mat),
        mean_iter_runtime_s: f64,
    ) -> Result<Self> {
        let per = per_trajectory_accuracy(truth, hyp)?;
        Ok(Self {
            ordering_accuracy: per.iter().sum::<f64>() / per.len() as f64,
            mae_a: param_mae(a, a_hat)?,
            mae_h: param_mae(h, h_hat)?,
            kendall_tau: kendall_tau(truth, hyp)?,
            mean_iter_runtime_s,
            per_trajectory_accuracy: per,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p: Vec<usize>) -> PermutationRecord {
        PermutationRecord::per_trajectory(vec![p])
    }

    #[test]
    fn accuracy_examples() {
        let id = rec(vec![0, 1, 2, 3]);
        assert_eq!(ordering_accuracy(&id, &id).unwrap(), 1.0);
        assert_eq!(ordering_accuracy(&id, &rec(vec![3, 2, 1, 0])).unwrap(), 0.0);
        assert_eq!(ordering_accuracy(&id, &rec(vec![1, 0, 2, 3])).unwrap(), 0.5);
    }

    #[test]
    fn tau_examples() {
        let id = rec((0..6).collect());
        assert_eq!(kendall_tau(&id, &id).unwrap(), 1.0);
        assert_eq!(kendall_tau(&id, &rec((0..6).rev().collect())).unwrap(), -1.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(ordering_accuracy(&rec(vec![0, 1]), &rec(vec![0, 1, 2])).is_err());
        let two = PermutationRecord::per_trajectory(vec![vec![0, 1], vec![1, 0]]);
        assert!(kendall_tau(&rec(vec![0, 1]), &two).is_err());
        assert!(param_mae(&Mat::zeros(2, 2), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn shared_truth_broadcasts() {
        let shared = PermutationRecord { mode: PermutationMode::Shared, perms: vec![vec![1, 0]] };
        let hyp = PermutationRecord::per_trajectory(vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(ordering_accuracy(&shared, &hyp).unwrap(), 0.5);
    }

    #[test]
    fn mae_examples() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(param_mae(&a, &a).unwrap(), 0.0);
        assert_eq!(param_mae(&a, &a.add_scalar(0.5)).unwrap(), 0.5);
    }

    #[test]
    fn timing() {
        let (v, s) = timed(|| 3);
        assert_eq!(v, 3);
        assert!((0.0..1e-3).contains(&s));
        let ((_, inner), outer) = timed(|| timed(|| std::thread::sleep(std::time::Duration::from_millis(20))));
        assert!(outer >= inner && outer - inner < 5e-3);
    }

    fn perm_strategy(t: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..t).collect::<Vec<_>>()).prop_shuffle()
    }

    proptest! {
        #[test]
        fn tau_matches_naive(p in perm_strategy(12)) {
            let mut conc = 0i64;
            let mut disc = 0i64;
            for a in 0..12 {
                for b in 0..12 {
                    if a < b {
                        if p[a] < p[b] { conc += 1 } else { disc += 1 }
                    }
                }
            }
            let naive = (conc - disc) as f64 / 66.0;
            prop_assert_eq!(kendall_tau(&rec((0..12).collect()), &rec(p)).unwrap(), naive);
        }

        #[test]
        fn relabel_invariance(truth in perm_strategy(9), hyp in perm_strategy(9), relabel in perm_strategy(9)) {
            let map = |p: &[usize]| rec(p.iter().map(|&i| relabel[i]).collect());
            let (t, h) = (rec(truth.clone()), rec(hyp.clone()));
            let (t2, h2) = (map(&truth), map(&hyp));
            prop_assert_eq!(ordering_accuracy(&t, &h).unwrap(), ordering_accuracy(&t2, &h2).unwrap());
            prop_assert_eq!(kendall_tau(&t, &h).unwrap(), kendall_tau(&t2, &h2).unwrap());
        }

        #[test]
        fn bounds(truth in perm_strategy(7), hyp in perm_strategy(7)) {
            let acc = ordering_accuracy(&rec(truth.clone()), &rec(hyp.clone())).unwrap();
            let tau = kendall_tau(&rec(truth), &rec(hyp)).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((-1.0..=1.0).contains(&tau));
        }

        #[test]
        fn mae_matches_double_loop_and_triangle(v in prop::collection::vec(-5.0f64..5.0, 27)) {
            let a = Mat::from_column_slice(3, 3, &v[0..9]);
            let b = Mat::from_column_slice(3, 3, &v[9..18]);
            let c = Mat::from_column_slice(3, 3, &v[18..27]);
            let mut naive = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    naive += (a[(i, j)] - b[(i, j)]).abs();
                }
            }
            prop_assert!((param_mae(&a, &b).unwrap() - naive / 9.0).abs() <= 1e-14 * naive.max(1.0));
            prop_assert!(param_mae(&a, &c).unwrap() <= param_mae(&a, &b).unwrap() + param_mae(&b, &c).unwrap() + 1e-12);
        }
    }
}
