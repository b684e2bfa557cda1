//! Pairwise distances, k-reciprocal Jaccard distance and DBSCAN over a
//! precomputed distance matrix.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{PdlError, Result};

/// Symmetric, zero-diagonal, finite, non-negative `N x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(PdlError::Argument(format!(
                "distance matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            if m[[i, i]] != 0.0 {
                return Err(PdlError::Argument(format!("nonzero diagonal at {i}")));
            }
            for j in 0..r {
                let v = m[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(PdlError::Argument(format!("invalid distance {v} at ({i},{j})")));
                }
                if v != m[[j, i]] {
                    return Err(PdlError::Argument(format!("asymmetric entries at ({i},{j})")));
                }
            }
        }
        Ok(DistanceMatrix(m))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Euclidean distances between rows. Entries are computed once per unordered
/// pair so the result is exactly symmetric.
pub fn pairwise_euclidean(features: ArrayView2<'_, f64>) -> Result<DistanceMatrix> {
    if features.iter().any(|v| !v.is_finite()) {
        return Err(PdlError::numeric("pairwise_euclidean", "non-finite feature"));
    }
    let n = features.nrows();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = features.row(i);
            (i + 1..n)
                .map(|j| {
                    a.iter()
                        .zip(features.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let mut m = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (k, &d) in row.iter().enumerate() {
            let j = i + 1 + k;
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    Ok(DistanceMatrix(m))
}

/// Only the plain set-based variant is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JaccardMode {
    #[default]
    Plain,
}

impl FromStr for JaccardMode {
    type Err = PdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(JaccardMode::Plain),
            other => Err(PdlError::Config(format!(
                "unknown jaccard mode `{other}` (expected `plain`)"
            ))),
        }
    }
}

impl fmt::Display for JaccardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("plain")
    }
}

/// The `k` nearest neighbours of each point, excluding itself, ties broken
/// by ascending index.
pub fn k_nearest(base: &DistanceMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = base.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| base.get(i, a).total_cmp(&base.get(i, b)).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect()
}

/// Sorted k-reciprocal sets, each including the point itself.
pub fn k_reciprocal_sets(base: &DistanceMatrix, k: usize) -> Vec<Vec<usize>> {
    let n = base.len();
    let knn = k_nearest(base, k);
    let mut member = vec![false; n * n];
    for (i, nb) in knn.iter().enumerate() {
        for &j in nb {
            member[i * n + j] = true;
        }
    }
    knn.iter()
        .enumerate()
        .map(|(i, nb)| {
            let mut r: Vec<usize> = nb.iter().copied().filter(|&j| member[j * n + i]).collect();
            r.push(i);
            r.sort_unstable();
            r
        })
        .collect()
}

/// `1 - |R(i) n R(j)| / |R(i) u R(j)|` over k-reciprocal sets.
pub fn k_reciprocal_jaccard(base: &DistanceMatrix, k: usize) -> Result<DistanceMatrix> {
    let n = base.len();
    if k < 1 || k >= n {
        return Err(PdlError::Argument(format!(
            "k-reciprocal K={k} must satisfy 1 <= K < N={n}"
        )));
    }
    let sets = k_reciprocal_sets(base, k);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let inter = sorted_intersection_len(&sets[i], &sets[j]);
                    let union = sets[i].len() + sets[j].len() - inter;
                    1.0 - inter as f64 / union as f64
                })
                .collect()
        })
        .collect();
    let mut m = Array2::zeros((n, n));
    for (i, row) in upper.iter().enumerate() {
        for (o, &d) in row.iter().enumerate() {
            m[[i, i + 1 + o]] = d;
            m[[i + 1 + o, i]] = d;
        }
    }
    Ok(DistanceMatrix(m))
}

fn sorted_intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// DBSCAN output. `None` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<Option<usize>>,
    core: Vec<bool>,
    n_clusters: usize,
}

impl ClusterAssignment {
    /// Every point is noise.
    pub fn all_noise(n: usize) -> Self {
        ClusterAssignment {
            labels: vec![None; n],
            core: vec![false; n],
            n_clusters: 0,
        }
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn is_core(&self, i: usize) -> bool {
        self.core[i]
    }

    /// Member lists indexed by cluster label, each in ascending order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                out[*l].push(i);
            }
        }
        out
    }
}

/// DBSCAN on a precomputed matrix. A point is core when at least `min_pts`
/// points (itself included) lie within `eps`. Seeds are expanded in
/// ascending index order; a border point joins the first cluster that
/// reaches it.
pub fn dbscan(dist: &DistanceMatrix, eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(PdlError::Argument(format!("eps must be finite and > 0, got {eps}")));
    }
    if min_pts < 1 {
        return Err(PdlError::Argument("min_pts must be >= 1".into()));
    }
    let n = dist.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![None; n];
    let mut n_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if labels[seed].is_some() || !core[seed] {
            continue;
        }
        let c = n_clusters;
        n_clusters += 1;
        labels[seed] = Some(c);
        queue.push_back(seed);
        while let Some(q) = queue.pop_front() {
            for &j in &neighbors[q] {
                if labels[j].is_none() {
                    labels[j] = Some(c);
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    Ok(ClusterAssignment {
        labels,
        core,
        n_clusters,
    })
}
