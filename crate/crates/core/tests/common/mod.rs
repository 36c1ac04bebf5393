#![allow(dead_code)]

use std::sync::Arc;

use curare_core::store::{EmbeddingSet, ItemMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_set(n: usize, dim: usize, seed: u64) -> Arc<EmbeddingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = (0..n * dim)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let meta = (0..n)
        .map(|i| ItemMeta::new(format!("item{i}"), format!("img/{i}.png")))
        .collect();
    Arc::new(EmbeddingSet::new(dim, vectors, meta).unwrap())
}

pub fn set_from_rows(rows: &[Vec<f32>]) -> Arc<EmbeddingSet> {
    let dim = rows[0].len();
    let meta = (0..rows.len())
        .map(|i| ItemMeta::new(format!("item{i}"), ""))
        .collect();
    Arc::new(EmbeddingSet::new(dim, rows.concat(), meta).unwrap())
}

/// Sequential f64 cosine distance with zero-norm rows at distance 2.
pub fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
    }
    for &x in a {
        aa += x as f64 * x as f64;
    }
    for &y in b {
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        return 2.0;
    }
    (1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0)
}

pub fn oracle_sq_euclid(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

/// Brute-force top-k by (distance, row).
pub fn brute_top_k(
    set: &EmbeddingSet,
    q: &[f32],
    k: usize,
    dist: impl Fn(&[f32], &[f32]) -> f64,
) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..set.len())
        .map(|r| (r, dist(q, set.vector(r))))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Gaussian blobs around `k` centers spaced far apart along distinct axes.
pub fn blobs(k: usize, per: usize, dim: usize, spread: f32, seed: u64) -> Arc<EmbeddingSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in 0..k {
        for _ in 0..per {
            let mut v: Vec<f32> = (0..dim)
                .map(|_| rng.random_range(-spread..spread))
                .collect();
            v[c % dim] += 10.0 * (1 + c / dim) as f32;
            rows.push(v);
        }
    }
    set_from_rows(&rows)
}
