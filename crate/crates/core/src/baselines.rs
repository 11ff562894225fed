//! Reference ordering methods applied per trajectory: depth-first traversal
//! of the Euclidean minimum spanning tree, and diffusion pseudotime.

use nalgebra::SymmetricEigen;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{mle_fit, FitResult};
use crate::linalg::Mat;
use crate::simulator::{Ensemble, PermutationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    #[default]
    Mst,
    Dpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance.
    #[default]
    MedianHeuristic,
    #[serde(untagged)]
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RootRule {
    #[default]
    MaxEccentricity,
    IndexZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub dpt_bandwidth: Bandwidth,
    pub dpt_n_eigs: usize,
    pub root_rule: RootRule,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Mst,
            dpt_bandwidth: Bandwidth::MedianHeuristic,
            dpt_n_eigs: 10,
            root_rule: RootRule::MaxEccentricity,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.dpt_bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("dpt_bandwidth must be positive, got {s}")));
            }
        }
        if self.dpt_n_eigs == 0 {
            return Err(Error::InvalidArgument("dpt_n_eigs must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn check_points(points: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!("{} values for dimension {dim}", points.len())));
    }
    let t = points.len() / dim;
    if t < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: t });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite state".into()));
    }
    Ok(t)
}

fn sq_distances(points: &[f64], dim: usize, t: usize) -> Mat {
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    Mat::from_fn(t, t, |i, j| row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Parent of each vertex in the minimum spanning tree of the complete
/// Euclidean graph (Prim; ties go to the lower index). Root is vertex 0.
fn prim(dist: &Mat) -> Vec<Option<usize>> {
    let t = dist.nrows();
    let mut in_tree = vec![false; t];
    let mut key = vec![f64::INFINITY; t];
    let mut parent = vec![None; t];
    key[0] = 0.0;
    for _ in 0..t {
        let u = (0..t)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)))
            .unwrap();
        in_tree[u] = true;
        for v in 0..t {
            if !in_tree[v] && dist[(u, v)] < key[v] {
                key[v] = dist[(u, v)];
                parent[v] = Some(u);
            }
        }
    }
    parent
}

fn farthest(adj: &[Vec<(usize, f64)>], from: usize) -> usize {
    let mut dist = vec![f64::NAN; adj.len()];
    dist[from] = 0.0;
    let mut stack = vec![from];
    while let Some(u) = stack.pop() {
        for &(v, w) in &adj[u] {
            if dist[v].is_nan() {
                dist[v] = dist[u] + w;
                stack.push(v);
            }
        }
    }
    (0..adj.len()).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a))).unwrap()
}

/// Ordering from a depth-first traversal of the minimum spanning tree over the
/// `T` rows of `points` (`T × dim`, row-major). Children are visited by
/// increasing edge length, then index.
pub fn mst_order(points: &[f64], dim: usize, root_rule: RootRule) -> Result<Vec<usize>> {
    let t = check_points(points, dim)?;
    let dist = sq_distances(points, dim, t).map(f64::sqrt);
    let parent = prim(&dist);
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); t];
    for (v, p) in parent.iter().enumerate() {
        if let Some(u) = *p {
            adj[u].push((v, dist[(u, v)]));
            adj[v].push((u, dist[(u, v)]));
        }
    }
    for a in &mut adj {
        a.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    }
    let root = match root_rule {
        RootRule::IndexZero => 0,
        RootRule::MaxEccentricity => {
            let u = farthest(&adj, 0);
            let v = farthest(&adj, u);
            u.min(v)
        }
    };
    let mut order = Vec::with_capacity(t);
    let mut seen = vec![false; t];
    let mut stack = vec![root];
    while let Some(u) = stack.pop() {
        if seen[u] {
            continue;
        }
        seen[u] = true;
        order.push(u);
        for &(v, _) in adj[u].iter().rev() {
            if !seen[v] {
                stack.push(v);
            }
        }
    }
    Ok(order)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ordering by diffusion distance from a root on a Gaussian-kernel graph.
pub fn dpt_order(points: &[f64], dim: usize, cfg: &BaselineConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let t = check_points(points, dim)?;
    if t < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: t });
    }
    let d2 = sq_distances(points, dim, t);
    let pair_d: Vec<f64> = (0..t).flat_map(|i| (i + 1..t).map(move |j| (i, j))).map(|(i, j)| d2[(i, j)].sqrt()).collect();
    if pair_d.iter().all(|&x| x == 0.0) {
        return Ok((0..t).collect());
    }
    let sigma = match cfg.dpt_bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => {
            let m = median(pair_d.clone());
            if m > 0.0 {
                m
            } else {
                median(pair_d.into_iter().filter(|&x| x > 0.0).collect())
            }
        }
    };
    let k = d2.map(|v| (-v / (2.0 * sigma * sigma)).exp());
    let deg: Vec<f64> = (0..t).map(|i| k.row(i).sum()).collect();
    let s = Mat::from_fn(t, t, |i, j| k[(i, j)] / (deg[i] * deg[j]).sqrt());
    let eig = SymmetricEigen::try_new(s, 1e-14, 10_000)
        .ok_or_else(|| Error::EigDecompositionFailure("kernel eigendecomposition did not converge".into()))?;
    let mut idx: Vec<usize> = (0..t).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let n_eigs = cfg.dpt_n_eigs.min(t - 1);
    // Right eigenvectors of the random-walk matrix, scaled by λ/(1−λ).
    let mut coords = Mat::zeros(t, n_eigs);
    for (c, &e) in idx.iter().skip(1).take(n_eigs).enumerate() {
        let lam = eig.eigenvalues[e];
        if lam >= 1.0 - 1e-10 {
            continue;
        }
        let w = lam / (1.0 - lam);
        for i in 0..t {
            coords[(i, c)] = w * eig.eigenvectors[(i, e)] / deg[i].sqrt();
        }
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigDecompositionFailure("non-finite diffusion coordinates".into()));
    }
    let dist = |i: usize, j: usize| (coords.row(i) - coords.row(j)).norm();
    let root = match cfg.root_rule {
        RootRule::IndexZero => 0,
        RootRule::MaxEccentricity => {
            let ecc: Vec<f64> = (0..t).map(|i| (0..t).map(|j| dist(i, j)).fold(0.0, f64::max)).collect();
            (0..t).max_by(|&a, &b| ecc[a].total_cmp(&ecc[b]).then(b.cmp(&a))).unwrap()
        }
    };
    let from_root: Vec<f64> = (0..t).map(|i| dist(root, i)).collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        (a != root).cmp(&(b != root)).then(from_root[a].total_cmp(&from_root[b])).then(a.cmp(&b))
    });
    Ok(order)
}

/// Order every trajectory with the configured method, then fit by maximum
/// likelihood on the reordered ensemble. `perms[j][k]` is the input slot
/// placed at position `k`.
pub fn baseline_pipeline(e: &Ensemble, cfg: &BaselineConfig) -> Result<(PermutationRecord, FitResult)> {
    cfg.validate()?;
    let orders = (0..e.n_traj)
        .into_par_iter()
        .map(|j| match cfg.method {
            BaselineMethod::Mst => mst_order(e.trajectory(j), e.dim, cfg.root_rule),
            BaselineMethod::Dpt => dpt_order(e.trajectory(j), e.dim, cfg),
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = mle_fit(&e.reorder(&orders))?;
    Ok((PermutationRecord::per_trajectory(orders), fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn is_perm(p: &[usize]) -> bool {
        let mut s = p.to_vec();
        s.sort_unstable();
        s == (0..p.len()).collect::<Vec<_>>()
    }

    #[test]
    fn mst_collinear() {
        let order = mst_order(&[3.0, 0.0, 1.0, 2.0], 1, RootRule::MaxEccentricity).unwrap();
        assert!(order == vec![1, 2, 3, 0] || order == vec![0, 3, 2, 1]);
    }

    #[test]
    fn mst_two_points() {
        assert_eq!(mst_order(&[5.0, 1.0], 1, RootRule::MaxEccentricity).unwrap(), vec![0, 1]);
        assert_eq!(mst_order(&[5.0, 1.0], 1, RootRule::IndexZero).unwrap(), vec![0, 1]);
    }

    #[test]
    fn mst_duplicates_are_stable() {
        let pts = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let a = mst_order(&pts, 2, RootRule::MaxEccentricity).unwrap();
        assert_eq!(a, mst_order(&pts, 2, RootRule::MaxEccentricity).unwrap());
        assert!(is_perm(&a));
    }

    #[test]
    fn dpt_monotone_on_line() {
        let pts: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let order = dpt_order(&pts, 1, &BaselineConfig { method: BaselineMethod::Dpt, ..Default::default() }).unwrap();
        let fwd: Vec<usize> = (0..12).collect();
        let rev: Vec<usize> = (0..12).rev().collect();
        assert!(order == fwd || order == rev, "{order:?}");
    }

    #[test]
    fn dpt_identical_points_identity() {
        let order = dpt_order(&[2.0; 10], 2, &BaselineConfig::default()).unwrap();
        assert_eq!(order, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn bandwidth_serde() {
        #[derive(Deserialize)]
        struct W {
            b: Bandwidth,
        }
        let w: W = serde_json::from_str(r#"{"b":"median_heuristic"}"#).unwrap();
        assert_eq!(w.b, Bandwidth::MedianHeuristic);
        let w: W = serde_json::from_str(r#"{"b":0.7}"#).unwrap();
        assert_eq!(w.b, Bandwidth::Fixed(0.7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn outputs_are_bijections(pts in prop::collection::vec(-3.0f64..3.0, 6..40)) {
            let pts = &pts[..pts.len() / 2 * 2];
            prop_assume!(pts.len() >= 6);
            prop_assert!(is_perm(&mst_order(pts, 2, RootRule::MaxEccentricity).unwrap()));
            prop_assert!(is_perm(&dpt_order(pts, 2, &BaselineConfig::default()).unwrap()));
        }
    }

    proptest! {
        #[test]
        fn translation_invariance(pts in prop::collection::vec(-3.0f64..3.0, 16), shift in -10.0f64..10.0) {
            let moved: Vec<f64> = pts.iter().map(|v| v + shift).collect();
            prop_assert_eq!(
                mst_order(&pts, 2, RootRule::MaxEccentricity).unwrap(),
                mst_order(&moved, 2, RootRule::MaxEccentricity).unwrap()
            );
        }
    }
}
