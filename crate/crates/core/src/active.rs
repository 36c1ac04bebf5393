//! Seed-set construction and the human-in-the-loop active learning loop.
//!
//! The loop is a resumable state machine ([`LoopState`]): it issues one batch
//! of label requests at a time, accepts labels for it, then retrains and
//! selects the next batch. [`run_loop`] drives it with a [`Labeler`]
//! callback; the HTTP service drives the same machine from label
//! submissions, so both paths produce identical results for the same seed.

use std::collections::{BTreeMap, HashSet};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coreset::{stratified_fps, CoresetConfig, CoresetError};
use crate::head::{train, HeadError, LinearModel, TrainConfig};
use crate::index::{IndexError, VectorIndex};
use crate::kmeans::kmeans;
use crate::labels::{Label, LabelRecord, LabelSource, LabelStore};
use crate::metric::{euclidean, squared_euclidean};
use crate::store::{EmbeddingSet, ItemMeta};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("unknown starter item {0:?}")]
    UnknownStarter(String),
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("seed_nn {seed_nn} must be smaller than the {count} items")]
    SeedTooLarge { seed_nn: usize, count: usize },
    #[error("only {available} items are eligible for {requested} random seeds")]
    NotEnoughItems { requested: usize, available: usize },
    #[error("probability row {0} is malformed")]
    MalformedProbabilities(usize),
    #[error("batch of {batch} requested from a pool of {pool}")]
    BatchTooLarge { batch: usize, pool: usize },
    #[error("{0} scores for {1} pool rows")]
    ScoreLength(usize, usize),
    #[error("no batch is outstanding")]
    NoPendingBatch,
    #[error("item {0:?} is not in the outstanding batch")]
    NotInBatch(String),
    #[error("the outstanding batch still has {0} unlabeled items")]
    BatchIncomplete(usize),
    #[error("labeler returned {got} labels for {expected} requests")]
    LabelCount { expected: usize, got: usize },
    #[error("labeler failed: {0}")]
    Labeler(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Coreset(#[from] CoresetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uncertainty {
    #[default]
    LeastConfidence,
    Margin,
    Entropy,
    Random,
}

impl std::str::FromStr for Uncertainty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "least_confidence" => Ok(Self::LeastConfidence),
            "margin" => Ok(Self::Margin),
            "entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown uncertainty strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    #[default]
    None,
    Proximity,
    Gaussian,
    Cluster,
}

impl std::str::FromStr for Diversity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "proximity" => Ok(Self::Proximity),
            "gaussian" => Ok(Self::Gaussian),
            "cluster" => Ok(Self::Cluster),
            other => Err(format!("unknown diversity strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub seed_nn: usize,
    pub seed_random: usize,
    pub batch_size: usize,
    pub label_budget_fraction: f64,
    pub uncertainty: Uncertainty,
    pub diversity: Diversity,
    pub relevance_threshold: f64,
    pub seed: u64,
    /// Partitions probed for seed-set neighbor search.
    pub nprobe: usize,
    pub train: TrainConfig,
    /// Proximity kernel width; `None` uses the median pairwise distance of a
    /// 1024-row seeded sample of the pool.
    pub sigma: Option<f64>,
    /// Fraction held out for validation F1 when every item has a true label.
    pub validation_fraction: f64,
    /// Maximum size of the final verification batch; 0 skips verification.
    pub verify_cap: usize,
    /// Pool size above which scoring runs on a coreset subsample.
    pub coreset_threshold: usize,
    pub coreset_fraction: f64,
    pub coreset_max: usize,
    /// Full-set nearest neighbors added per selected coreset point.
    pub coreset_neighbors: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            seed_nn: 64,
            seed_random: 32,
            batch_size: 64,
            label_budget_fraction: 0.05,
            uncertainty: Uncertainty::LeastConfidence,
            diversity: Diversity::None,
            relevance_threshold: 0.5,
            seed: 0,
            nprobe: crate::index::DEFAULT_NPROBE,
            train: TrainConfig::default(),
            sigma: None,
            validation_fraction: 0.1,
            verify_cap: 200,
            coreset_threshold: 200_000,
            coreset_fraction: 0.1,
            coreset_max: 8192,
            coreset_neighbors: 3,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        let bad = |m: &str| Err(LoopError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.seed_nn + self.seed_random < 2 {
            return bad("seed_nn + seed_random must be at least 2");
        }
        if !(self.label_budget_fraction > 0.0 && self.label_budget_fraction <= 1.0) {
            return bad("label_budget_fraction must be in (0, 1]");
        }
        if !(self.relevance_threshold > 0.0 && self.relevance_threshold < 1.0) {
            return bad("relevance_threshold must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if self.sigma.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return bad("sigma must be non-negative");
        }
        if !(self.coreset_fraction > 0.0 && self.coreset_fraction <= 1.0) {
            return bad("coreset_fraction must be in (0, 1]");
        }
        Ok(())
    }

    /// Loop-label budget `ceil(label_budget_fraction * n)`.
    pub fn loop_budget(&self, n: usize) -> usize {
        (self.label_budget_fraction * n as f64).ceil() as usize
    }
}

/// Stream-separated RNG seeds derived from the master seed.
fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xD1B5_4A32_D192_ED69);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SEED_SET: u64 = 1;
const STREAM_SCORES: u64 = 2;
const STREAM_SELECT: u64 = 3;
const STREAM_VALIDATION: u64 = 4;
const STREAM_CORESET: u64 = 5;
const STREAM_SIGMA: u64 = 6;

/// Informativeness per probability row; higher means more informative.
pub fn score_uncertainty(
    probs: &[[f64; 2]],
    strategy: Uncertainty,
    seed: u64,
) -> Result<Vec<f64>, LoopError> {
    for (i, p) in probs.iter().enumerate() {
        let ok = p
            .iter()
            .all(|v| v.is_finite() && (-1e-12..=1.0 + 1e-12).contains(v));
        if !ok || (p[0] + p[1] - 1.0).abs() > 1e-4 {
            return Err(LoopError::MalformedProbabilities(i));
        }
    }
    Ok(match strategy {
        Uncertainty::LeastConfidence => probs.iter().map(|p| 1.0 - p[0].max(p[1])).collect(),
        Uncertainty::Margin => probs.iter().map(|p| 1.0 - (p[0] - p[1]).abs()).collect(),
        Uncertainty::Entropy => probs
            .iter()
            .map(|p| {
                -p.iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>()
            })
            .collect(),
        Uncertainty::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            probs.iter().map(|_| rng.random::<f64>()).collect()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectParams {
    pub diversity: Diversity,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma: Option<f64>,
}

fn by_score_desc(scores: &[f64], rows: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(rows[a].cmp(&rows[b])));
    order
}

/// Median pairwise euclidean distance over a seeded sample of up to 1024 rows.
pub fn median_pairwise_distance(set: &EmbeddingSet, pool: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = pool.len().min(1024);
    let mut picks: Vec<usize> = sample(&mut rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picks.sort_unstable();
    let mut d: Vec<f64> = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(euclidean(set.vector(picks[i]), set.vector(picks[j])));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *median
}

/// Picks `batch_size` rows of `pool`; `scores[i]` belongs to `pool[i]`.
pub fn select_batch(
    pool: &[usize],
    scores: &[f64],
    set: &EmbeddingSet,
    params: &SelectParams,
) -> Result<Vec<usize>, LoopError> {
    if scores.len() != pool.len() {
        return Err(LoopError::ScoreLength(scores.len(), pool.len()));
    }
    let b = params.batch_size;
    if b > pool.len() {
        return Err(LoopError::BatchTooLarge {
            batch: b,
            pool: pool.len(),
        });
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    match params.diversity {
        Diversity::None => Ok(by_score_desc(scores, pool)[..b]
            .iter()
            .map(|&i| pool[i])
            .collect()),
        Diversity::Proximity => {
            let sigma = params.sigma.unwrap_or_else(|| {
                median_pairwise_distance(set, pool, derive_seed(params.seed, STREAM_SIGMA, 0))
            });
            let two_sigma_sq = 2.0 * sigma * sigma;
            let mut current = scores.to_vec();
            let mut alive = vec![true; pool.len()];
            let mut picked = Vec::with_capacity(b);
            for _ in 0..b {
                let mut best: Option<usize> = None;
                for i in 0..pool.len() {
                    if !alive[i] {
                        continue;
                    }
                    best = match best {
                        Some(j)
                            if current[i] < current[j]
                                || (current[i] == current[j] && pool[i] > pool[j]) =>
                        {
                            Some(j)
                        }
                        _ => Some(i),
                    };
                }
                let j = best.expect("b <= pool");
                alive[j] = false;
                picked.push(pool[j]);
                let anchor = set.vector(pool[j]);
                current
                    .par_iter_mut()
                    .zip(pool.par_iter())
                    .zip(alive.par_iter())
                    .filter(|(_, &a)| a)
                    .for_each(|((s, &row), _)| {
                        let d2 = squared_euclidean(set.vector(row), anchor);
                        let keep = if two_sigma_sq > 0.0 {
                            1.0 - (-d2 / two_sigma_sq).exp()
                        } else if d2 == 0.0 {
                            0.0
                        } else {
                            1.0
                        };
                        *s *= keep;
                    });
            }
            Ok(picked)
        }
        Diversity::Gaussian => {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let noise = Normal::new(0.0, sd.max(0.0)).expect("finite sd");
            // Efraimidis-Spirakis: weighted sampling without replacement by
            // taking the largest ln(u)/w keys.
            let mut keyed: Vec<(f64, usize)> = scores
                .iter()
                .zip(pool)
                .map(|(&s, &row)| {
                    let w = (s + noise.sample(&mut rng)).max(0.0);
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let key = if w > 0.0 {
                        u.ln() / w
                    } else {
                        f64::NEG_INFINITY
                    };
                    (key, row)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            Ok(keyed[..b].iter().map(|&(_, row)| row).collect())
        }
        Diversity::Cluster => {
            let points: Vec<&[f32]> = pool.iter().map(|&r| set.vector(r)).collect();
            let clustering = kmeans(&points, b, crate::index::KMEANS_MAX_ITERATIONS, params.seed);
            let mut best: BTreeMap<usize, usize> = BTreeMap::new();
            for (i, &c) in clustering.assignments.iter().enumerate() {
                let e = best.entry(c).or_insert(i);
                let j = *e;
                if scores[i] > scores[j] || (scores[i] == scores[j] && pool[i] < pool[j]) {
                    *e = i;
                }
            }
            let mut chosen: Vec<usize> = best.into_values().collect();
            if chosen.len() < b {
                let taken: HashSet<usize> = chosen.iter().copied().collect();
                let extra: Vec<usize> = by_score_desc(scores, pool)
                    .into_iter()
                    .filter(|i| !taken.contains(i))
                    .take(b - chosen.len())
                    .collect();
                chosen.extend(extra);
            }
            Ok(chosen.into_iter().map(|i| pool[i]).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedOrigin {
    Neighbor,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRequest {
    pub row: usize,
    pub item_id: String,
    pub origin: SeedOrigin,
}

/// The starter's `seed_nn` nearest neighbors followed by `seed_random`
/// uniformly drawn items. Every entry still has to be labeled.
pub fn build_seed_set(
    index: &VectorIndex,
    starter: &str,
    cfg: &LoopConfig,
) -> Result<Vec<SeedRequest>, LoopError> {
    let set = index.set();
    let row = set
        .row_of(starter)
        .ok_or_else(|| LoopError::UnknownStarter(starter.to_string()))?;
    seed_rows(index, row, cfg, &|_| false)
}

fn seed_rows(
    index: &VectorIndex,
    starter: usize,
    cfg: &LoopConfig,
    excluded: &(dyn Fn(usize) -> bool + Sync),
) -> Result<Vec<SeedRequest>, LoopError> {
    let set = index.set();
    let n = set.len();
    if cfg.seed_nn >= n {
        return Err(LoopError::SeedTooLarge {
            seed_nn: cfg.seed_nn,
            count: n,
        });
    }
    let mut out = Vec::with_capacity(cfg.seed_nn + cfg.seed_random);
    let mut used: HashSet<usize> = HashSet::from([starter]);
    if cfg.seed_nn > 0 {
        let hits = index.query_where(set.vector(starter), cfg.seed_nn, cfg.nprobe, None, |r| {
            r != starter && !excluded(r)
        })?;
        for h in hits {
            used.insert(h.row_id);
            out.push(SeedRequest {
                row: h.row_id,
                item_id: h.item_id,
                origin: SeedOrigin::Neighbor,
            });
        }
    }
    let available = (0..n)
        .filter(|&r| !used.contains(&r) && !excluded(r))
        .count();
    if available < cfg.seed_random {
        return Err(LoopError::NotEnoughItems {
            requested: cfg.seed_random,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SEED_SET, starter as u64));
    let mut drawn = 0;
    while drawn < cfg.seed_random {
        let r = rng.random_range(0..n);
        // duplicates and excluded rows are redrawn
        if excluded(r) || !used.insert(r) {
            continue;
        }
        out.push(SeedRequest {
            row: r,
            item_id: set.meta(r).item_id.clone(),
            origin: SeedOrigin::Random,
        });
        drawn += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seeding,
    Looping,
    Verifying,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Seeding => "seeding",
            Phase::Looping => "looping",
            Phase::Verifying => "verifying",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub id: u64,
    pub iteration: u32,
    pub phase: Phase,
    pub rows: Vec<usize>,
    pub answered: BTreeMap<usize, Label>,
}

impl PendingBatch {
    pub fn remaining(&self) -> usize {
        self.rows.len() - self.answered.len()
    }

    pub fn is_complete(&self) -> bool {
        self.remaining() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub labels_used: usize,
    pub f1_val: Option<f64>,
    pub positives_found: usize,
}

impl IterationRecord {
    /// `iteration \t labels_used \t f1_val|- \t positives_found`
    pub fn to_tsv(&self) -> String {
        let f1 = self
            .f1_val
            .map_or_else(|| "-".to_string(), |f| format!("{f:.6}"));
        format!(
            "{}\t{}\t{}\t{}",
            self.iteration, self.labels_used, f1, self.positives_found
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedItem {
    pub row: usize,
    pub item_id: String,
    /// Model probability of relevance.
    pub score: f64,
    /// Source of the effective label; `Weak` for model-only predictions.
    pub provenance: LabelSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CuratedSet {
    /// Sorted by score descending, then row ascending.
    pub items: Vec<CuratedItem>,
}

impl CuratedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.row).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Validation {
    rows: Vec<usize>,
    truth: Vec<bool>,
}

/// Label counts by phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub seed: usize,
    pub looped: usize,
    pub verify: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.seed + self.looped + self.verify
    }
}

/// Resumable state of one curation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopState {
    pub config: LoopConfig,
    pub starter: usize,
    pub starter_id: String,
    pub phase: Phase,
    pub iteration: u32,
    pub labels: LabelStore,
    pub counts: LabelCounts,
    pub history: Vec<IterationRecord>,
    pending: Option<PendingBatch>,
    next_batch_id: u64,
    issued: HashSet<usize>,
    validation: Option<Validation>,
    coreset: Option<Vec<usize>>,
    curated: Option<CuratedSet>,
    predicted: Option<CuratedSet>,
    #[serde(skip)]
    model: Option<LinearModel>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl LoopState {
    /// Creates the run and issues the seed batch.
    pub fn start(
        index: &VectorIndex,
        starter: &str,
        config: LoopConfig,
    ) -> Result<Self, LoopError> {
        config.validate()?;
        let set = index.set();
        let starter_row = set
            .row_of(starter)
            .ok_or_else(|| LoopError::UnknownStarter(starter.to_string()))?;
        let validation = Self::validation_split(set, starter_row, &config);
        let held_out: HashSet<usize> = validation
            .iter()
            .flat_map(|v| v.rows.iter().copied())
            .collect();
        let seeds = seed_rows(index, starter_row, &config, &|r| held_out.contains(&r))?;
        let rows: Vec<usize> = seeds.iter().map(|s| s.row).collect();
        let mut state = Self {
            starter: starter_row,
            starter_id: starter.to_string(),
            phase: Phase::Seeding,
            iteration: 0,
            labels: LabelStore::new(),
            counts: LabelCounts::default(),
            history: Vec::new(),
            pending: None,
            next_batch_id: 0,
            issued: HashSet::new(),
            validation,
            coreset: None,
            curated: None,
            predicted: None,
            model: None,
            config,
        };
        state.issue(rows, Phase::Seeding);
        Ok(state)
    }

    fn validation_split(
        set: &EmbeddingSet,
        starter: usize,
        cfg: &LoopConfig,
    ) -> Option<Validation> {
        let target = set.meta(starter).true_label?;
        if cfg.validation_fraction <= 0.0 || set.metas().iter().any(|m| m.true_label.is_none()) {
            return None;
        }
        let candidates: Vec<usize> = (0..set.len()).filter(|&r| r != starter).collect();
        let m =
            ((cfg.validation_fraction * set.len() as f64).floor() as usize).min(candidates.len());
        if m == 0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_VALIDATION, 0));
        let mut rows: Vec<usize> = sample(&mut rng, candidates.len(), m)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        rows.sort_unstable();
        let truth = rows
            .iter()
            .map(|&r| set.meta(r).true_label == Some(target))
            .collect();
        Some(Validation { rows, truth })
    }

    fn issue(&mut self, rows: Vec<usize>, phase: Phase) {
        self.issued.extend(rows.iter().copied());
        self.pending = Some(PendingBatch {
            id: self.next_batch_id,
            iteration: self.iteration,
            phase,
            rows,
            answered: BTreeMap::new(),
        });
        self.next_batch_id += 1;
    }

    pub fn pending(&self) -> Option<&PendingBatch> {
        self.pending.as_ref()
    }

    pub fn model(&self) -> Option<&LinearModel> {
        self.model.as_ref()
    }

    pub fn curated(&self) -> Option<&CuratedSet> {
        self.curated.as_ref()
    }

    /// Curated set as predicted when the loop stopped, before verification.
    pub fn predicted(&self) -> Option<&CuratedSet> {
        self.predicted.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Loop-label budget for this set size.
    pub fn budget(&self, n: usize) -> usize {
        self.config.loop_budget(n)
    }

    /// Records a label for an item of the outstanding batch. A repeated label
    /// for the same item replaces the earlier one.
    pub fn record(
        &mut self,
        set: &EmbeddingSet,
        item_id: &str,
        label: Label,
        timestamp: u64,
    ) -> Result<(), LoopError> {
        let pending = self.pending.as_mut().ok_or(LoopError::NoPendingBatch)?;
        let row = set
            .row_of(item_id)
            .filter(|r| pending.rows.contains(r))
            .ok_or_else(|| LoopError::NotInBatch(item_id.to_string()))?;
        pending.answered.insert(row, label);
        let source = if pending.phase == Phase::Seeding {
            LabelSource::Seed
        } else {
            LabelSource::Human
        };
        self.labels.append(LabelRecord {
            item_id: item_id.to_string(),
            label,
            source,
            iteration: pending.iteration,
            timestamp,
        });
        Ok(())
    }

    /// Closes the completed batch, retrains, and issues the next batch or
    /// finishes the run.
    pub fn advance(&mut self, index: &VectorIndex) -> Result<(), LoopError> {
        let pending = self.pending.as_ref().ok_or(LoopError::NoPendingBatch)?;
        if !pending.is_complete() {
            return Err(LoopError::BatchIncomplete(pending.remaining()));
        }
        let pending = self.pending.take().unwrap();
        let set = index.set().clone();
        match pending.phase {
            Phase::Seeding => self.counts.seed += pending.rows.len(),
            Phase::Looping => self.counts.looped += pending.rows.len(),
            Phase::Verifying => {
                self.counts.verify += pending.rows.len();
                self.curated = Some(self.build_curated(&set)?);
                self.phase = Phase::Done;
                return Ok(());
            }
            Phase::Done => unreachable!("no batches are issued once done"),
        }

        self.retrain(&set)?;
        self.history.push(self.snapshot(&set)?);

        let budget = self.budget(set.len());
        let pool = self.pool(&set);
        let remaining = budget.saturating_sub(self.counts.looped);
        if remaining == 0 || pool.is_empty() {
            return self.finish_loop(&set);
        }
        self.iteration += 1;
        self.phase = Phase::Looping;
        let b = self.config.batch_size.min(remaining).min(pool.len());
        let rows = self.choose(index, &pool, b)?;
        self.issue(rows, Phase::Looping);
        Ok(())
    }

    fn finish_loop(&mut self, set: &EmbeddingSet) -> Result<(), LoopError> {
        let curated = self.build_curated(set)?;
        let to_verify: Vec<usize> = curated
            .items
            .iter()
            .filter(|c| c.provenance == LabelSource::Weak && !self.issued.contains(&c.row))
            .take(self.config.verify_cap)
            .map(|c| c.row)
            .collect();
        self.predicted = Some(curated.clone());
        self.curated = Some(curated);
        if to_verify.is_empty() {
            self.phase = Phase::Done;
        } else {
            self.iteration += 1;
            self.phase = Phase::Verifying;
            self.issue(to_verify, Phase::Verifying);
        }
        Ok(())
    }

    /// Rows eligible for loop requests: never issued, not the starter, not
    /// held out.
    fn pool(&self, set: &EmbeddingSet) -> Vec<usize> {
        let held: HashSet<usize> = self
            .validation
            .iter()
            .flat_map(|v| v.rows.iter().copied())
            .collect();
        (0..set.len())
            .filter(|r| *r != self.starter && !self.issued.contains(r) && !held.contains(r))
            .collect()
    }

    fn training_data(&self, set: &EmbeddingSet) -> (Vec<f32>, Vec<bool>) {
        let mut rows: Vec<(usize, bool)> = self
            .labels
            .effective_records()
            .filter_map(|r| {
                set.row_of(&r.item_id)
                    .map(|row| (row, r.label.is_relevant()))
            })
            .collect();
        if !rows.iter().any(|&(r, _)| r == self.starter) {
            rows.push((self.starter, true));
        }
        rows.sort_unstable();
        let mut x = Vec::with_capacity(rows.len() * set.dim());
        for &(r, _) in &rows {
            x.extend_from_slice(set.vector(r));
        }
        (x, rows.into_iter().map(|(_, y)| y).collect())
    }

    fn retrain(&mut self, set: &EmbeddingSet) -> Result<(), LoopError> {
        let (x, y) = self.training_data(set);
        let cfg = TrainConfig {
            seed: derive_seed(self.config.seed, 0, self.iteration as u64),
            ..self.config.train
        };
        self.model = match train(&x, set.dim(), &y, &cfg) {
            Ok(m) => Some(m),
            Err(HeadError::SingleClass) => {
                log::warn!("labels contain a single class; selection falls back to random scores");
                None
            }
            Err(e) => return Err(e.into()),
        };
        Ok(())
    }

    /// Rebuilds the model after deserialization.
    pub fn restore(&mut self, set: &EmbeddingSet) -> Result<(), LoopError> {
        self.labels.reindex();
        if !self.history.is_empty() {
            let iteration = self.iteration;
            // the model was trained at the iteration of the last history record
            self.iteration = self.history.last().unwrap().iteration;
            let r = self.retrain(set);
            self.iteration = iteration;
            r?;
        }
        Ok(())
    }

    fn probabilities(&self, set: &EmbeddingSet, rows: &[usize]) -> Vec<[f64; 2]> {
        match &self.model {
            Some(m) => rows
                .par_iter()
                .map(|&r| {
                    m.predict_row(set.vector(r))
                        .expect("dimension checked at training")
                })
                .collect(),
            None => vec![[0.5, 0.5]; rows.len()],
        }
    }

    fn snapshot(&self, set: &EmbeddingSet) -> Result<IterationRecord, LoopError> {
        let f1_val = match (&self.validation, &self.model) {
            (Some(v), Some(_)) if v.truth.iter().any(|&t| t) => {
                let probs = self.probabilities(set, &v.rows);
                let pred: Vec<bool> = probs
                    .iter()
                    .map(|p| p[1] >= self.config.relevance_threshold)
                    .collect();
                Some(f1(&pred, &v.truth).expect("equal lengths"))
            }
            _ => None,
        };
        Ok(IterationRecord {
            iteration: self.iteration,
            labels_used: self.counts.seed + self.counts.looped,
            f1_val,
            positives_found: self
                .labels
                .effective_records()
                .filter(|r| r.label.is_relevant())
                .count(),
        })
    }

    fn choose(
        &mut self,
        index: &VectorIndex,
        pool: &[usize],
        b: usize,
    ) -> Result<Vec<usize>, LoopError> {
        let set = index.set();
        let score_seed = derive_seed(self.config.seed, STREAM_SCORES, self.iteration as u64);
        let select_seed = derive_seed(self.config.seed, STREAM_SELECT, self.iteration as u64);
        let strategy = if self.model.is_some() {
            self.config.uncertainty
        } else {
            Uncertainty::Random
        };
        let params = |batch_size| SelectParams {
            diversity: self.config.diversity,
            batch_size,
            seed: select_seed,
            sigma: self.config.sigma,
        };

        if pool.len() <= self.config.coreset_threshold {
            let scores = score_uncertainty(&self.probabilities(set, pool), strategy, score_seed)?;
            return select_batch(pool, &scores, set, &params(b));
        }

        // Coreset path: score only the coreset members still in the pool,
        // then grow each pick with its nearest eligible neighbors.
        if self.coreset.is_none() {
            self.coreset = Some(self.compute_coreset(set)?);
        }
        let eligible: HashSet<usize> = pool.iter().copied().collect();
        let sub: Vec<usize> = self
            .coreset
            .as_ref()
            .unwrap()
            .iter()
            .copied()
            .filter(|r| eligible.contains(r))
            .collect();
        let group = 1 + self.config.coreset_neighbors;
        let picks = b.div_ceil(group).min(sub.len());
        if picks == 0 {
            let scores = score_uncertainty(&self.probabilities(set, pool), strategy, score_seed)?;
            return select_batch(pool, &scores, set, &params(b));
        }
        let mut sub_sorted = sub;
        sub_sorted.sort_unstable();
        let scores =
            score_uncertainty(&self.probabilities(set, &sub_sorted), strategy, score_seed)?;
        let anchors = select_batch(&sub_sorted, &scores, set, &params(picks))?;
        let mut batch: Vec<usize> = anchors.clone();
        let mut taken: HashSet<usize> = anchors.iter().copied().collect();
        for &a in &anchors {
            if batch.len() >= b {
                break;
            }
            let want = self.config.coreset_neighbors.min(b - batch.len());
            let hits =
                index.query_where(set.vector(a), want, index.default_nprobe(), None, |r| {
                    eligible.contains(&r) && !taken.contains(&r)
                })?;
            for h in hits {
                taken.insert(h.row_id);
                batch.push(h.row_id);
            }
        }
        if batch.len() < b {
            let rest: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|r| !taken.contains(r))
                .collect();
            let scores = score_uncertainty(&self.probabilities(set, &rest), strategy, score_seed)?;
            let more = select_batch(&rest, &scores, set, &params(b - batch.len()))?;
            batch.extend(more);
        }
        Ok(batch)
    }

    fn compute_coreset(&self, set: &EmbeddingSet) -> Result<Vec<usize>, LoopError> {
        let n = set.len();
        let size = ((self.config.coreset_fraction * n as f64).ceil() as usize)
            .clamp(1, self.config.coreset_max.max(1))
            .min(n);
        let cfg = CoresetConfig::stratified(
            size,
            self.starter,
            n.min(256),
            64,
            derive_seed(self.config.seed, STREAM_CORESET, 0),
        );
        Ok(stratified_fps(set, &cfg)?.rows)
    }

    fn build_curated(&self, set: &EmbeddingSet) -> Result<CuratedSet, LoopError> {
        let rows: Vec<usize> = (0..set.len()).collect();
        let probs = self.probabilities(set, &rows);
        let mut items: Vec<CuratedItem> = rows
            .into_iter()
            .filter_map(|r| {
                let meta = set.meta(r);
                let score = probs[r][1];
                let (include, provenance) = match self.labels.effective(&meta.item_id) {
                    Some(rec) => (rec.label.is_relevant(), rec.source),
                    None => (
                        self.model.is_some() && score >= self.config.relevance_threshold,
                        LabelSource::Weak,
                    ),
                };
                include.then(|| CuratedItem {
                    row: r,
                    item_id: meta.item_id.clone(),
                    score,
                    provenance,
                })
            })
            .collect();
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.row.cmp(&b.row)));
        Ok(CuratedSet { items })
    }

    /// Rows issued so far in any batch.
    pub fn issued_count(&self) -> usize {
        self.issued.len()
    }

    pub fn was_issued(&self, row: usize) -> bool {
        self.issued.contains(&row)
    }
}

/// A label request batch handed to a [`Labeler`].
#[derive(Debug, Clone)]
pub struct LabelRequest<'a> {
    pub phase: Phase,
    pub iteration: u32,
    pub items: Vec<&'a ItemMeta>,
}

pub trait Labeler {
    /// One label per requested item, in request order.
    fn label(&mut self, request: &LabelRequest<'_>) -> Result<Vec<Label>, String>;
}

/// Labeler backed by a per-item closure.
pub struct FnLabeler<F>(pub F);

impl<F> Labeler for FnLabeler<F>
where
    F: FnMut(&ItemMeta) -> Result<Label, String>,
{
    fn label(&mut self, request: &LabelRequest<'_>) -> Result<Vec<Label>, String> {
        request.items.iter().map(|m| (self.0)(m)).collect()
    }
}

/// Simulated labeler answering from `true_label` metadata.
#[derive(Debug, Clone, Copy)]
pub struct OracleLabeler {
    pub relevant_class: i64,
}

impl Labeler for OracleLabeler {
    fn label(&mut self, request: &LabelRequest<'_>) -> Result<Vec<Label>, String> {
        request
            .items
            .iter()
            .map(|m| match m.true_label {
                Some(l) => Ok(Label::from_bool(l == self.relevant_class)),
                None => Err(format!("item {:?} has no true_label", m.item_id)),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub model: Option<LinearModel>,
    pub curated: CuratedSet,
    /// Curated set before verification labels were applied.
    pub predicted: CuratedSet,
    pub history: Vec<IterationRecord>,
    pub labels: LabelStore,
    pub counts: LabelCounts,
}

/// A labeler failure, carrying the state needed to resume.
#[derive(Debug)]
pub struct LoopAborted {
    pub error: LoopError,
    pub state: Option<Box<LoopState>>,
}

impl std::fmt::Display for LoopAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for LoopAborted {}

impl From<LoopError> for LoopAborted {
    fn from(error: LoopError) -> Self {
        Self { error, state: None }
    }
}

/// Runs seed phase, loop iterations and verification to completion.
pub fn run_loop(
    index: &VectorIndex,
    starter: &str,
    labeler: &mut dyn Labeler,
    cfg: LoopConfig,
) -> Result<LoopOutcome, LoopAborted> {
    let state = LoopState::start(index, starter, cfg)?;
    resume_loop(index, state, labeler)
}

/// Continues a run from a (possibly restored) state.
pub fn resume_loop(
    index: &VectorIndex,
    mut state: LoopState,
    labeler: &mut dyn Labeler,
) -> Result<LoopOutcome, LoopAborted> {
    let set = index.set().clone();
    while let Some(pending) = state.pending() {
        let open: Vec<usize> = pending
            .rows
            .iter()
            .copied()
            .filter(|r| !pending.answered.contains_key(r))
            .collect();
        let request = LabelRequest {
            phase: pending.phase,
            iteration: pending.iteration,
            items: open.iter().map(|&r| set.meta(r)).collect(),
        };
        let labels = match labeler.label(&request) {
            Ok(l) if l.len() == open.len() => l,
            Ok(l) => {
                return Err(LoopAborted {
                    error: LoopError::LabelCount {
                        expected: open.len(),
                        got: l.len(),
                    },
                    state: Some(Box::new(state)),
                })
            }
            Err(e) => {
                return Err(LoopAborted {
                    error: LoopError::Labeler(e),
                    state: Some(Box::new(state)),
                })
            }
        };
        let ts = now_ms();
        for (&r, label) in open.iter().zip(labels) {
            let id = set.meta(r).item_id.clone();
            state.record(&set, &id, label, ts)?;
        }
        state.advance(index)?;
    }
    Ok(LoopOutcome {
        model: state.model.clone(),
        curated: state.curated.clone().unwrap_or_default(),
        predicted: state.predicted.clone().unwrap_or_default(),
        history: state.history.clone(),
        labels: state.labels.clone(),
        counts: state.counts,
    })
}

/// F1 of binary predictions; 0 when precision + recall is 0.
pub fn f1(predictions: &[bool], truth: &[bool]) -> Result<f64, String> {
    if predictions.len() != truth.len() {
        return Err(format!(
            "{} predictions for {} truth values",
            predictions.len(),
            truth.len()
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
