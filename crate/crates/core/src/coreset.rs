//! Farthest-point (greedy maximin) subset selection.
//!
//! Distances are squared euclidean on the raw embeddings; selection order is
//! unchanged by the square root and the squared form is exact to compare.
//! Argmax ties go to the lowest row id.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::squared_euclidean;
use crate::store::EmbeddingSet;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoresetError {
    #[error("subset size {subset} exceeds {count} rows")]
    SubsetTooLarge { subset: usize, count: usize },
    #[error("subset size must be positive")]
    EmptySubset,
    #[error("start row {0} is out of range")]
    BadStartRow(usize),
    #[error("random_sample_size must be positive")]
    ZeroSampleSize,
    #[error("random_sample_size {sample} exceeds {count} rows")]
    SampleTooLarge { sample: usize, count: usize },
    #[error("resample_period must be at least 1")]
    ZeroResamplePeriod,
    #[error("no rows selected")]
    NoRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub subset_size: usize,
    pub start_row: usize,
    pub random_sample_size: usize,
    pub resample_period: usize,
    pub seed: u64,
}

impl CoresetConfig {
    pub fn greedy(subset_size: usize, start_row: usize) -> Self {
        Self {
            subset_size,
            start_row,
            random_sample_size: 1,
            resample_period: 1,
            seed: 0,
        }
    }

    pub fn stratified(
        subset_size: usize,
        start_row: usize,
        sample: usize,
        period: usize,
        seed: u64,
    ) -> Self {
        Self {
            subset_size,
            start_row,
            random_sample_size: sample,
            resample_period: period,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoresetResult {
    pub rows: Vec<usize>,
    pub distance_evaluations: u64,
}

fn check_common(set: &EmbeddingSet, cfg: &CoresetConfig) -> Result<(), CoresetError> {
    if cfg.subset_size == 0 {
        return Err(CoresetError::EmptySubset);
    }
    if cfg.subset_size > set.len() {
        return Err(CoresetError::SubsetTooLarge {
            subset: cfg.subset_size,
            count: set.len(),
        });
    }
    if cfg.start_row >= set.len() {
        return Err(CoresetError::BadStartRow(cfg.start_row));
    }
    Ok(())
}

/// Exhaustive greedy farthest-point sampling starting at `cfg.start_row`.
///
/// Keeps each row's distance to its nearest selected row, so every step
/// costs one distance per row: `subset_size * count` in total.
pub fn greedy_fps(set: &EmbeddingSet, cfg: &CoresetConfig) -> Result<CoresetResult, CoresetError> {
    check_common(set, cfg)?;
    let n = set.len();
    let mut selected = vec![false; n];
    let mut rows = Vec::with_capacity(cfg.subset_size);
    let mut min_d = vec![f64::INFINITY; n];
    let mut evals = 0u64;

    let mut next = cfg.start_row;
    loop {
        selected[next] = true;
        rows.push(next);
        if rows.len() == cfg.subset_size {
            break;
        }
        let anchor = set.vector(next);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = squared_euclidean(set.vector(i), anchor);
            evals += 1;
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        next = best.expect("subset_size <= count").0;
    }
    Ok(CoresetResult {
        rows,
        distance_evaluations: evals,
    })
}

/// Farthest-point sampling over random candidate pools.
///
/// Each step picks the maximin row (distance to the selected set) within a
/// candidate pool of `random_sample_size` unselected rows drawn uniformly
/// without replacement. The pool is redrawn every `resample_period` steps, or
/// sooner if it runs dry. A redraw costs `|selected| * pool` distances and a
/// step costs `pool`, so the total stays within
/// `subset_size^2 * random_sample_size`.
pub fn stratified_fps(
    set: &EmbeddingSet,
    cfg: &CoresetConfig,
) -> Result<CoresetResult, CoresetError> {
    check_common(set, cfg)?;
    if cfg.random_sample_size == 0 {
        return Err(CoresetError::ZeroSampleSize);
    }
    if cfg.random_sample_size > set.len() {
        return Err(CoresetError::SampleTooLarge {
            sample: cfg.random_sample_size,
            count: set.len(),
        });
    }
    if cfg.resample_period == 0 {
        return Err(CoresetError::ZeroResamplePeriod);
    }
    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut selected = vec![false; n];
    let mut rows = vec![cfg.start_row];
    selected[cfg.start_row] = true;
    let mut evals = 0u64;
    // (row, distance to nearest selected)
    let mut pool: Vec<(usize, f64)> = Vec::new();
    let mut steps_since_draw = usize::MAX;

    while rows.len() < cfg.subset_size {
        if steps_since_draw >= cfg.resample_period || pool.is_empty() {
            let unselected: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
            let m = cfg.random_sample_size.min(unselected.len());
            let mut picks: Vec<usize> = sample(&mut rng, unselected.len(), m)
                .into_iter()
                .map(|j| unselected[j])
                .collect();
            picks.sort_unstable();
            pool = picks
                .into_iter()
                .map(|i| {
                    let d = rows
                        .iter()
                        .map(|&s| squared_euclidean(set.vector(i), set.vector(s)))
                        .fold(f64::INFINITY, f64::min);
                    evals += rows.len() as u64;
                    (i, d)
                })
                .collect();
            steps_since_draw = 0;
        }
        // pool is sorted by row, so the first strict maximum is the lowest row
        let (pos, _) = pool
            .iter()
            .enumerate()
            .fold(
                None,
                |best: Option<(usize, f64)>, (p, &(_, d))| match best {
                    Some((_, bd)) if d <= bd => best,
                    _ => Some((p, d)),
                },
            )
            .expect("pool is non-empty");
        let (chosen, _) = pool.remove(pos);
        selected[chosen] = true;
        rows.push(chosen);
        steps_since_draw += 1;
        let anchor = set.vector(chosen);
        for (i, d) in pool.iter_mut() {
            let nd = squared_euclidean(set.vector(*i), anchor);
            evals += 1;
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(CoresetResult {
        rows,
        distance_evaluations: evals,
    })
}

/// Largest euclidean distance from any row to its nearest selected row.
pub fn coverage_radius(set: &EmbeddingSet, rows: &[usize]) -> Result<f64, CoresetError> {
    if rows.is_empty() {
        return Err(CoresetError::NoRows);
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= set.len()) {
        return Err(CoresetError::BadStartRow(bad));
    }
    let worst = (0..set.len())
        .map(|i| {
            rows.iter()
                .map(|&s| squared_euclidean(set.vector(i), set.vector(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Ok(worst.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ItemMeta;

    fn points_1d(xs: &[f32]) -> EmbeddingSet {
        let meta = (0..xs.len())
            .map(|i| ItemMeta::new(format!("p{i}"), ""))
            .collect();
        EmbeddingSet::new(1, xs.to_vec(), meta).unwrap()
    }

    #[test]
    fn four_points_on_a_line() {
        let set = points_1d(&[0.0, 1.0, 2.0, 10.0]);
        let r = greedy_fps(&set, &CoresetConfig::greedy(3, 0)).unwrap();
        assert_eq!(r.rows, vec![0, 3, 2]);
        assert!(r.distance_evaluations <= 3 * 3 * 4);
    }

    #[test]
    fn full_subset_is_a_permutation() {
        let set = points_1d(&[3.0, 3.0, 1.0, 7.0, -2.0]);
        let mut rows = greedy_fps(&set, &CoresetConfig::greedy(5, 2)).unwrap().rows;
        assert_eq!(rows[0], 2);
        rows.sort_unstable();
        assert_eq!(rows, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn errors() {
        let set = points_1d(&[0.0, 1.0]);
        assert_eq!(
            greedy_fps(&set, &CoresetConfig::greedy(3, 0)),
            Err(CoresetError::SubsetTooLarge {
                subset: 3,
                count: 2
            })
        );
        assert_eq!(
            greedy_fps(&set, &CoresetConfig::greedy(1, 9)),
            Err(CoresetError::BadStartRow(9))
        );
        assert_eq!(
            stratified_fps(&set, &CoresetConfig::stratified(2, 0, 0, 1, 0)),
            Err(CoresetError::ZeroSampleSize)
        );
        assert_eq!(
            stratified_fps(&set, &CoresetConfig::stratified(2, 0, 1, 0, 0)),
            Err(CoresetError::ZeroResamplePeriod)
        );
        assert_eq!(coverage_radius(&set, &[]), Err(CoresetError::NoRows));
    }

    #[test]
    fn radius_cases() {
        let set = points_1d(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(coverage_radius(&set, &[0, 1, 2, 3]).unwrap(), 0.0);
        assert_eq!(coverage_radius(&set, &[1]).unwrap(), 9.0);
    }
}
