//! Lloyd's k-means with seeded farthest-first initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::metric::squared_euclidean;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub dim: usize,
    /// `k * dim` centroid coordinates.
    pub centroids: Vec<f32>,
    /// Cluster id per input point.
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Picks `k` distinct point indices: a seeded uniform first pick, then
/// repeatedly the point farthest from the chosen set (ties to the lowest index).
pub fn farthest_first(points: &[&[f32]], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p, points[first]))
        .collect();
    while chosen.len() < k {
        let mut best = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                Some((_, bd)) if min_d[i] <= bd => {}
                _ => best = Some((i, min_d[i])),
            }
        }
        let (next, _) = best.expect("k <= n leaves a candidate");
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            let d = squared_euclidean(points[i], points[next]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    chosen
}

fn nearest_centroid(p: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_euclidean(p, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Clusters `points` into `min(k, n)` groups. Deterministic for a fixed seed.
pub fn kmeans(points: &[&[f32]], k: usize, max_iterations: usize, seed: u64) -> Clustering {
    let n = points.len();
    let dim = points.first().map_or(0, |p| p.len());
    if n == 0 || k == 0 {
        return Clustering {
            dim: dim.max(1),
            centroids: Vec::new(),
            assignments: vec![0; n],
            iterations: 0,
        };
    }
    let init = farthest_first(points, k, seed);
    let k = init.len();
    let mut centroids: Vec<f32> = init
        .iter()
        .flat_map(|&i| points[i].iter().copied())
        .collect();
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;

    for _ in 0..max_iterations {
        iterations += 1;
        let next: Vec<usize> = points
            .par_iter()
            .map(|p| nearest_centroid(p, &centroids, dim))
            .collect();
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p.iter()) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dim {
                centroids[c * dim + d] = (sums[c * dim + d] / counts[c] as f64) as f32;
            }
        }
    }
    if assignments.contains(&usize::MAX) {
        assignments = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids, dim))
            .collect();
    }
    Clustering {
        dim,
        centroids,
        assignments,
        iterations,
    }
}
