//! Lloyd's k-means with deterministic seeding.
//!
//! Initial centroids are `k` distinct points drawn by a partial Fisher-Yates
//! pass over the input order. A cluster that empties during an update is
//! re-seeded at the point farthest from its assigned centroid.

use super::rng::SeededRng;
use super::tensor::squared_distance;
use crate::error::{arg_err, dim_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Index of the most populated cluster, lowest index on ties.
    pub fn largest_cluster(&self) -> usize {
        let sizes = self.cluster_sizes();
        let mut best = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if s > sizes[best] {
                best = i;
            }
        }
        best
    }
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, squared_distance(&centroids[0], p));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(centroids: &[Vec<f64>], points: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let mut assignments = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    for p in points {
        let (i, d) = nearest(centroids, p);
        assignments.push(i);
        dists.push(d);
    }
    let total = dists.iter().sum();
    (assignments, dists, total)
}

/// Recomputes centroids as cluster means. Returns true if any cluster was re-seeded.
fn update(
    centroids: &mut [Vec<f64>],
    points: &[Vec<f64>],
    assignments: &[usize],
    dists: &[f64],
) -> bool {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut reseeded = false;
    let mut taken = vec![false; points.len()];
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / n).collect();
        } else {
            let mut far = None;
            for (i, &d) in dists.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                match far {
                    Some((_, best)) if d <= best => {}
                    _ => far = Some((i, d)),
                }
            }
            if let Some((i, _)) = far {
                taken[i] = true;
                centroids[c] = points[i].clone();
                reseeded = true;
            }
        }
    }
    reseeded
}

pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut SeededRng,
    max_iters: usize,
) -> Result<KMeansResult> {
    if points.is_empty() {
        return arg_err("k-means needs at least one point");
    }
    if k == 0 || k > points.len() {
        return arg_err(format!("k = {k} with {} points", points.len()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return dim_err("k-means points have differing dimensions");
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    for i in 0..k {
        let j = i + rng.below((points.len() - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| points[i].clone()).collect();

    let (mut assignments, mut dists, objective) = assign(&centroids, points);
    let mut objective_history = vec![objective];
    for _ in 0..max_iters {
        let reseeded = update(&mut centroids, points, &assignments, &dists);
        let (next, next_dists, objective) = assign(&centroids, points);
        objective_history.push(objective);
        let stable = next == assignments && !reseeded;
        assignments = next;
        dists = next_dists;
        if stable {
            break;
        }
    }
    // Leave centroids equal to the means of the final assignment.
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        objective_history,
    })
}
