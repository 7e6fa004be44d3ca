//! Lloyd's K-means with k-means++ seeding.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::loss::clusters::{ClusterKind, ClusterSet};
use crate::rng::{self, Stream};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub clusters: ClusterSet,
    pub assignments: Vec<usize>,
    /// Inertia after seeding, then after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, ties to the lower index.
fn nearest(z: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(z, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[&[f64]], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining point coincides with a center
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centers.push(points[pick].to_vec());
        let c = centers.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, c));
        }
    }
    centers
}

fn total_inertia(points: &[&[f64]], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centers[a]))
        .sum()
}

/// Recomputes centers as member means. An empty cluster takes over the point
/// farthest from its current center.
fn update_centers(
    points: &[&[f64]],
    k: usize,
    dim: usize,
    assignments: &mut [usize],
    centers: &mut [Vec<f64>],
) -> Vec<usize> {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            let (far, _) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| sizes[assignments[*i]] > 1)
                .map(|(i, p)| (i, squared_distance(p, &centers[assignments[i]])))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            assignments[far] = empty;
            continue;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(assignments.iter()) {
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for (c, (s, &n)) in centers.iter_mut().zip(sums.into_iter().zip(&sizes)) {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
        return sizes;
    }
}

pub fn fit(features: &[&[f64]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if features.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} OoD features cannot form K = {k} clusters; use K <= {}",
            features.len(),
            features.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("features have mixed dimensions".into()));
    }
    let mut rng = rng::stream(seed, Stream::KMeans, 0);
    let mut centers = plus_plus_seed(features, k, &mut rng);
    let mut assignments: Vec<usize> = features.iter().map(|p| nearest(p, &centers).0).collect();
    let mut sizes = update_centers(features, k, dim, &mut assignments, &mut centers);
    let mut history = vec![total_inertia(features, &centers, &assignments)];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = features
            .iter()
            .zip(&assignments)
            .map(|(p, &cur)| {
                let (best, d) = nearest(p, &centers);
                // keep the current center on exact ties so the fixpoint is stable
                if squared_distance(p, &centers[cur]) <= d {
                    cur
                } else {
                    best
                }
            })
            .collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        sizes = update_centers(features, k, dim, &mut assignments, &mut centers);
        history.push(total_inertia(features, &centers, &assignments));
    }

    Ok(KMeansFit {
        clusters: ClusterSet {
            kind: ClusterKind::OodKmeans,
            dim,
            centers,
            sizes,
            class_of: vec![None; k],
            skipped_classes: Vec::new(),
        },
        assignments,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// K-means over OoD features, returning only the cluster set.
pub fn build_ood_clusters_kmeans(features: &[&[f64]], k: usize, seed: u64) -> Result<ClusterSet> {
    fit(features, k, seed).map(|f| f.clusters)
}
