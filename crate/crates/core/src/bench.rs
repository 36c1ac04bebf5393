//! Simulated-oracle benchmark: synthetic class-clustered embeddings and
//! repeated curation runs scored against ground truth.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{
    f1, resume_loop, LabelRequest, Labeler, LoopAborted, LoopConfig, LoopState, OracleLabeler,
};
use crate::index::VectorIndex;
use crate::labels::Label;
use crate::store::{EmbeddingSet, ItemMeta, StoreError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("degenerate synthetic spec: {0}")]
    Spec(String),
    #[error("item {0:?} has no true_label")]
    MissingLabel(String),
    #[error("class {class} has {count} items, fewer than seed_nn {seed_nn}")]
    ClassTooSmall {
        class: i64,
        count: usize,
        seed_nn: usize,
    },
    #[error("starters_per_class must be at least 1")]
    NoStarters,
    #[error("run for starter {starter:?} failed: {source}")]
    Run {
        starter: String,
        #[source]
        source: LoopAborted,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub separation: f64,
    /// Relative class sizes; class `c` gets `round(w_c / mean(w) * per_class)` items.
    pub imbalance: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            dim: 64,
            cluster_spread: 1.0,
            separation: 4.0,
            imbalance: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn class_counts(&self) -> Result<Vec<usize>, BenchError> {
        if self.classes < 2 {
            return Err(BenchError::Spec("classes must be at least 2".into()));
        }
        if self.per_class < 8 {
            return Err(BenchError::Spec("per_class must be at least 8".into()));
        }
        if self.dim == 0 {
            return Err(BenchError::Spec("dim must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(BenchError::Spec("cluster_spread must be positive".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(BenchError::Spec("separation must be positive".into()));
        }
        match &self.imbalance {
            None => Ok(vec![self.per_class; self.classes]),
            Some(w) => {
                if w.len() != self.classes {
                    return Err(BenchError::Spec(format!(
                        "{} imbalance weights for {} classes",
                        w.len(),
                        self.classes
                    )));
                }
                if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(BenchError::Spec(
                        "imbalance weights must be positive".into(),
                    ));
                }
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                Ok(w.iter()
                    .map(|x| ((x / mean) * self.per_class as f64).round().max(1.0) as usize)
                    .collect())
            }
        }
    }
}

/// Class centers on a seeded sphere of radius `separation`, points drawn
/// around them with isotropic Gaussian noise. Rows are grouped by class.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingSet, BenchError> {
    let counts = spec.class_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut c: Vec<f64> = (0..spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = c
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        c.iter_mut().for_each(|v| *v *= spec.separation / n);
        centers.push(c);
    }
    let noise = Normal::new(0.0, spec.cluster_spread).expect("positive spread");
    let total: usize = counts.iter().sum();
    let mut vectors = Vec::with_capacity(total * spec.dim);
    let mut meta = Vec::with_capacity(total);
    for (class, (&count, center)) in counts.iter().zip(&centers).enumerate() {
        for _ in 0..count {
            vectors.extend(center.iter().map(|&c| (c + noise.sample(&mut rng)) as f32));
            meta.push(ItemMeta::new(format!("syn{:06}", meta.len()), "").with_label(class as i64));
        }
    }
    Ok(EmbeddingSet::new(spec.dim, vectors, meta)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchMetrics {
    pub f1_val: f64,
    pub labeling_effort: f64,
    pub positives_retrieved: f64,
    pub false_positive_fraction: f64,
}

impl BenchMetrics {
    fn mean(all: &[BenchMetrics]) -> BenchMetrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&BenchMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        BenchMetrics {
            f1_val: sum(|m| m.f1_val),
            labeling_effort: sum(|m| m.labeling_effort),
            positives_retrieved: sum(|m| m.positives_retrieved),
            false_positive_fraction: sum(|m| m.false_positive_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub class: i64,
    pub starter: String,
    pub metrics: BenchMetrics,
    /// Loop labels only, over N.
    pub loop_fraction: f64,
    /// Labels requested from the oracle in all phases.
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<RunResult>,
    pub per_class: BTreeMap<i64, BenchMetrics>,
    pub mean: BenchMetrics,
    pub mean_loop_fraction: f64,
}

impl BenchReport {
    /// Table with one row per class plus a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "class\tf1_val\tlabeling_effort\tpositives_retrieved\tfalse_positive_fraction\n",
        );
        let mut row = |name: &str, m: &BenchMetrics| {
            out.push_str(&format!(
                "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                m.f1_val, m.labeling_effort, m.positives_retrieved, m.false_positive_fraction
            ));
        };
        for (class, m) in &self.per_class {
            row(&class.to_string(), m);
        }
        row("mean", &self.mean);
        out
    }
}

/// Oracle that counts every requested label.
struct CountingOracle<'a> {
    inner: OracleLabeler,
    requested: &'a AtomicUsize,
}

impl Labeler for CountingOracle<'_> {
    fn label(&mut self, request: &LabelRequest<'_>) -> Result<Vec<Label>, String> {
        self.requested
            .fetch_add(request.items.len(), Ordering::Relaxed);
        self.inner.label(request)
    }
}

fn run_seed(master: u64, class: i64, starter: usize) -> u64 {
    let mut z = master
        ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (starter as u64).rotate_left(32);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

/// Runs the curation loop for `starters_per_class` seeded starters of every
/// class, answering label requests from `true_label`.
pub fn run_benchmark(
    index: &VectorIndex,
    starters_per_class: usize,
    cfg: &LoopConfig,
) -> Result<BenchReport, BenchError> {
    if starters_per_class == 0 {
        return Err(BenchError::NoStarters);
    }
    let set = index.set();
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (row, m) in set.metas().iter().enumerate() {
        let label = m
            .true_label
            .ok_or_else(|| BenchError::MissingLabel(m.item_id.clone()))?;
        by_class.entry(label).or_default().push(row);
    }
    let mut jobs: Vec<(i64, usize)> = Vec::new();
    for (&class, rows) in &by_class {
        if rows.len() < cfg.seed_nn {
            return Err(BenchError::ClassTooSmall {
                class,
                count: rows.len(),
                seed_nn: cfg.seed_nn,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(cfg.seed, class, usize::MAX));
        let k = starters_per_class.min(rows.len());
        let mut picks: Vec<usize> = sample(&mut rng, rows.len(), k)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        picks.sort_unstable();
        jobs.extend(picks.into_iter().map(|r| (class, r)));
    }

    let n = set.len() as f64;
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(class, starter)| {
            let starter_id = set.meta(starter).item_id.clone();
            let run_cfg = LoopConfig {
                seed: run_seed(cfg.seed, class, starter),
                ..cfg.clone()
            };
            let requested = AtomicUsize::new(0);
            let mut oracle = CountingOracle {
                inner: OracleLabeler {
                    relevant_class: class,
                },
                requested: &requested,
            };
            let state =
                LoopState::start(index, &starter_id, run_cfg).map_err(|e| BenchError::Run {
                    starter: starter_id.clone(),
                    source: e.into(),
                })?;
            let outcome =
                resume_loop(index, state, &mut oracle).map_err(|source| BenchError::Run {
                    starter: starter_id.clone(),
                    source,
                })?;
            let requested = requested.into_inner();
            debug_assert_eq!(requested, outcome.counts.total());

            let class_size = by_class[&class].len() as f64;
            let curated = &outcome.predicted;
            let true_pos = curated
                .items
                .iter()
                .filter(|c| set.meta(c.row).true_label == Some(class))
                .count();
            let false_positive_fraction = if curated.is_empty() {
                0.0
            } else {
                (curated.len() - true_pos) as f64 / curated.len() as f64
            };
            let f1_val = outcome
                .history
                .last()
                .and_then(|h| h.f1_val)
                .unwrap_or_else(|| {
                    let pred: Vec<bool> = (0..set.len())
                        .map(|r| curated.items.iter().any(|c| c.row == r))
                        .collect();
                    let truth: Vec<bool> = set
                        .metas()
                        .iter()
                        .map(|m| m.true_label == Some(class))
                        .collect();
                    f1(&pred, &truth).unwrap_or(0.0)
                });
            Ok(RunResult {
                class,
                starter: starter_id,
                metrics: BenchMetrics {
                    f1_val,
                    labeling_effort: requested as f64 / n,
                    positives_retrieved: true_pos as f64 / class_size,
                    false_positive_fraction,
                },
                loop_fraction: outcome.counts.looped as f64 / n,
                requested,
            })
        })
        .collect::<Result<_, BenchError>>()?;

    let per_class = by_class
        .keys()
        .map(|&class| {
            let ms: Vec<BenchMetrics> = runs
                .iter()
                .filter(|r| r.class == class)
                .map(|r| r.metrics)
                .collect();
            (class, BenchMetrics::mean(&ms))
        })
        .collect();
    let all: Vec<BenchMetrics> = runs.iter().map(|r| r.metrics).collect();
    let mean_loop_fraction =
        runs.iter().map(|r| r.loop_fraction).sum::<f64>() / runs.len().max(1) as f64;
    Ok(BenchReport {
        mean: BenchMetrics::mean(&all),
        per_class,
        runs,
        mean_loop_fraction,
    })
}
