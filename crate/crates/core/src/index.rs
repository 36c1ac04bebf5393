//! Exact and facet-partitioned nearest-neighbor index.
//!
//! Partitioned mode first groups rows into facet cells keyed by
//! `(date bucket, resolution_level, product)`, then runs seeded k-means inside
//! each cell. A query ranks the centroids of every cell that can satisfy the
//! filter and scans the members of the `nprobe` closest partitions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::kmeans;
use crate::metric::{cosine_distance_with_norms, euclidean, norm, Metric};
use crate::store::{load_embeddings, EmbeddingSet, ItemMeta, StoreError};

pub const DEFAULT_NPROBE: usize = 4;
pub const KMEANS_MAX_ITERATIONS: usize = 25;
const INDEX_MAGIC: [u8; 4] = *b"CURI";
const PARALLEL_SCAN_THRESHOLD: usize = 32_768;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot index an empty embedding set")]
    EmptySet,
    #[error("partitions_per_cell must be at least 1")]
    ZeroPartitions,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query has dimension {actual}, index has {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("indexes are built over different embedding sets")]
    MismatchedUniverse,
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    #[default]
    Exact,
    Partitioned,
}

impl std::str::FromStr for IndexMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(IndexMode::Exact),
            "partitioned" => Ok(IndexMode::Partitioned),
            other => Err(format!("unknown index mode {other:?}")),
        }
    }
}

/// Granularity used to bucket item dates into facet cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateBucket {
    Day,
    #[default]
    Month,
    Year,
}

impl DateBucket {
    pub fn start(self, d: NaiveDate) -> NaiveDate {
        match self {
            DateBucket::Day => d,
            DateBucket::Month => d.with_day(1).unwrap(),
            DateBucket::Year => NaiveDate::from_ymd_opt(d.year(), 1, 1).unwrap(),
        }
    }

    /// Last day inside the bucket starting at `start`.
    pub fn end(self, start: NaiveDate) -> NaiveDate {
        match self {
            DateBucket::Day => start,
            DateBucket::Month => {
                let (y, m) = if start.month() == 12 {
                    (start.year() + 1, 1)
                } else {
                    (start.year(), start.month() + 1)
                };
                NaiveDate::from_ymd_opt(y, m, 1)
                    .unwrap()
                    .pred_opt()
                    .unwrap()
            }
            DateBucket::Year => NaiveDate::from_ymd_opt(start.year(), 12, 31).unwrap(),
        }
    }

    fn code(self) -> u8 {
        match self {
            DateBucket::Day => 0,
            DateBucket::Month => 1,
            DateBucket::Year => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DateBucket::Day),
            1 => Some(DateBucket::Month),
            2 => Some(DateBucket::Year),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionKey {
    /// First day of the date bucket.
    pub date_bucket: Option<NaiveDate>,
    pub resolution_level: Option<u32>,
    pub product: Option<String>,
    pub centroid: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub key: PartitionKey,
    pub centroid: Vec<f32>,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    pub metric: Metric,
    pub mode: IndexMode,
    pub partitions_per_cell: usize,
    pub seed: u64,
    pub date_bucket: DateBucket,
    pub nprobe: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            mode: IndexMode::Exact,
            partitions_per_cell: 1,
            seed: 0,
            date_bucket: DateBucket::Month,
            nprobe: DEFAULT_NPROBE,
        }
    }
}

/// Facet predicate. Items lacking a constrained facet never pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetFilter {
    pub product: Option<String>,
    pub date_from: Option<NaiveDate>,
    pub date_to: Option<NaiveDate>,
    pub resolution_level: Option<u32>,
}

impl FacetFilter {
    pub fn is_empty(&self) -> bool {
        self.product.is_none()
            && self.date_from.is_none()
            && self.date_to.is_none()
            && self.resolution_level.is_none()
    }

    pub fn matches(&self, m: &ItemMeta) -> bool {
        if let Some(p) = &self.product {
            if m.product.as_ref() != Some(p) {
                return false;
            }
        }
        if let Some(r) = self.resolution_level {
            if m.resolution_level != Some(r) {
                return false;
            }
        }
        if self.date_from.is_some() || self.date_to.is_some() {
            let Some(d) = m.date else { return false };
            if self.date_from.is_some_and(|f| d < f) || self.date_to.is_some_and(|t| d > t) {
                return false;
            }
        }
        true
    }

    /// Whether any item in a cell with this key could pass.
    fn admits_cell(&self, key: &PartitionKey, bucket: DateBucket) -> bool {
        if let Some(p) = &self.product {
            if key.product.as_ref() != Some(p) {
                return false;
            }
        }
        if let Some(r) = self.resolution_level {
            if key.resolution_level != Some(r) {
                return false;
            }
        }
        if self.date_from.is_some() || self.date_to.is_some() {
            let Some(start) = key.date_bucket else {
                return false;
            };
            let end = bucket.end(start);
            if self.date_from.is_some_and(|f| end < f) || self.date_to.is_some_and(|t| start > t) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub row_id: usize,
    pub item_id: String,
    pub distance: f64,
}

/// Max-heap entry ordered by `(distance, row)`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.row.cmp(&other.row))
    }
}

#[derive(Debug)]
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn merge(mut self, other: TopK) -> TopK {
        for c in other.heap {
            self.push(c);
        }
        self
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    set: Arc<EmbeddingSet>,
    metric: Metric,
    mode: IndexMode,
    date_bucket: DateBucket,
    default_nprobe: usize,
    partitions: Vec<Partition>,
    norms: Vec<f64>,
    warnings: Vec<String>,
}

fn cell_of(m: &ItemMeta, bucket: DateBucket) -> PartitionKey {
    PartitionKey {
        date_bucket: m.date.map(|d| bucket.start(d)),
        resolution_level: m.resolution_level,
        product: m.product.clone(),
        centroid: 0,
    }
}

fn mean_vector(set: &EmbeddingSet, rows: &[usize]) -> Vec<f32> {
    let dim = set.dim();
    let mut acc = vec![0f64; dim];
    for &r in rows {
        for (a, &x) in acc.iter_mut().zip(set.vector(r)) {
            *a += x as f64;
        }
    }
    let n = rows.len().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

fn normalized(v: &[f32]) -> Vec<f32> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (x as f64 / n) as f32).collect()
    }
}

fn cell_seed(seed: u64, cell: usize) -> u64 {
    seed ^ (cell as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl VectorIndex {
    pub fn build(set: Arc<EmbeddingSet>, cfg: &IndexConfig) -> Result<Self, IndexError> {
        if set.is_empty() {
            return Err(IndexError::EmptySet);
        }
        if cfg.partitions_per_cell == 0 {
            return Err(IndexError::ZeroPartitions);
        }
        let mut warnings = Vec::new();
        let partitions = match cfg.mode {
            IndexMode::Exact => {
                let members: Vec<usize> = (0..set.len()).collect();
                vec![Partition {
                    key: PartitionKey {
                        date_bucket: None,
                        resolution_level: None,
                        product: None,
                        centroid: 0,
                    },
                    centroid: mean_vector(&set, &members),
                    members,
                }]
            }
            IndexMode::Partitioned => {
                let mut cells: BTreeMap<PartitionKey, Vec<usize>> = BTreeMap::new();
                for m in set.metas() {
                    cells
                        .entry(cell_of(m, cfg.date_bucket))
                        .or_default()
                        .push(m.row_id);
                }
                let mut partitions = Vec::new();
                for (cell_no, (cell, rows)) in cells.into_iter().enumerate() {
                    let mut k = cfg.partitions_per_cell;
                    if k > rows.len() {
                        let msg = format!(
                            "cell {:?}/{:?}/{:?} has {} rows; partitions clamped from {} to {}",
                            cell.date_bucket,
                            cell.resolution_level,
                            cell.product,
                            rows.len(),
                            k,
                            rows.len()
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                        k = rows.len();
                    }
                    let owned: Vec<Vec<f32>> = match cfg.metric {
                        Metric::Cosine => rows.iter().map(|&r| normalized(set.vector(r))).collect(),
                        Metric::Euclidean => rows.iter().map(|&r| set.vector(r).to_vec()).collect(),
                    };
                    let points: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
                    let clustering = kmeans(
                        &points,
                        k,
                        KMEANS_MAX_ITERATIONS,
                        cell_seed(cfg.seed, cell_no),
                    );
                    let mut members = vec![Vec::new(); clustering.k()];
                    for (&row, &c) in rows.iter().zip(&clustering.assignments) {
                        members[c].push(row);
                    }
                    for (c, members) in members.into_iter().enumerate() {
                        partitions.push(Partition {
                            key: PartitionKey {
                                centroid: c as u32,
                                ..cell.clone()
                            },
                            centroid: clustering.centroid(c).to_vec(),
                            members,
                        });
                    }
                }
                partitions
            }
        };
        Ok(Self::from_parts(
            set,
            cfg.metric,
            cfg.mode,
            cfg.date_bucket,
            cfg.nprobe.max(1),
            partitions,
            warnings,
        ))
    }

    fn from_parts(
        set: Arc<EmbeddingSet>,
        metric: Metric,
        mode: IndexMode,
        date_bucket: DateBucket,
        default_nprobe: usize,
        partitions: Vec<Partition>,
        warnings: Vec<String>,
    ) -> Self {
        let norms = match metric {
            Metric::Cosine => set.rows().map(norm).collect(),
            Metric::Euclidean => Vec::new(),
        };
        Self {
            set,
            metric,
            mode,
            date_bucket,
            default_nprobe,
            partitions,
            norms,
            warnings,
        }
    }

    pub fn set(&self) -> &Arc<EmbeddingSet> {
        &self.set
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn default_nprobe(&self) -> usize {
        self.default_nprobe
    }

    /// Build-time notices such as clamped partition counts.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    /// Distance from `query` to stored row `row` under the index metric.
    pub fn distance_to_row(&self, query: &[f32], query_norm: f64, row: usize) -> f64 {
        match self.metric {
            Metric::Cosine => {
                cosine_distance_with_norms(query, self.set.vector(row), query_norm, self.norms[row])
            }
            Metric::Euclidean => euclidean(query, self.set.vector(row)),
        }
    }

    /// Top-`k` hits among rows passing `filter`. `nprobe` is ignored in exact
    /// mode and clamped to the number of admissible partitions otherwise.
    pub fn query(
        &self,
        vector: &[f32],
        k: usize,
        filter: Option<&FacetFilter>,
        nprobe: usize,
    ) -> Result<Vec<Hit>, IndexError> {
        match filter.filter(|f| !f.is_empty()) {
            Some(f) => self.query_where(vector, k, nprobe, Some(f), |row| {
                f.matches(self.set.meta(row))
            }),
            None => self.query_where(vector, k, nprobe, None, |_| true),
        }
    }

    /// Query for the stored item `item_id`. The item itself is included.
    pub fn query_item(
        &self,
        item_id: &str,
        k: usize,
        filter: Option<&FacetFilter>,
        nprobe: usize,
    ) -> Result<Vec<Hit>, IndexError> {
        let row = self
            .set
            .row_of(item_id)
            .ok_or_else(|| IndexError::UnknownItem(item_id.to_string()))?;
        self.query(self.set.vector(row), k, filter, nprobe)
    }

    /// General query with an arbitrary row predicate. `cell_filter`, when
    /// given, prunes partitions whose facet cell cannot match.
    pub fn query_where<P>(
        &self,
        vector: &[f32],
        k: usize,
        nprobe: usize,
        cell_filter: Option<&FacetFilter>,
        keep: P,
    ) -> Result<Vec<Hit>, IndexError>
    where
        P: Fn(usize) -> bool + Sync,
    {
        if vector.len() != self.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim(),
                actual: vector.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let qnorm = norm(vector);
        let probed: Vec<&Partition> = match self.mode {
            IndexMode::Exact => self.partitions.iter().collect(),
            IndexMode::Partitioned => {
                let mut ranked: Vec<(f64, usize)> = self
                    .partitions
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| !p.members.is_empty())
                    .filter(|(_, p)| {
                        cell_filter.is_none_or(|f| f.admits_cell(&p.key, self.date_bucket))
                    })
                    .map(|(i, p)| (self.metric.distance(vector, &p.centroid), i))
                    .collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                ranked
                    .into_iter()
                    .take(nprobe.max(1))
                    .map(|(_, i)| &self.partitions[i])
                    .collect()
            }
        };

        let scan = |rows: &[usize]| {
            let mut top = TopK::new(k);
            for &row in rows {
                if keep(row) {
                    top.push(Candidate {
                        distance: self.distance_to_row(vector, qnorm, row),
                        row,
                    });
                }
            }
            top
        };
        let mut top = TopK::new(k);
        for p in probed {
            let part = if p.members.len() >= PARALLEL_SCAN_THRESHOLD {
                p.members
                    .par_chunks(8192)
                    .map(scan)
                    .reduce(|| TopK::new(k), TopK::merge)
            } else {
                scan(&p.members)
            };
            top = top.merge(part);
        }
        Ok(top
            .into_sorted()
            .into_iter()
            .map(|c| Hit {
                row_id: c.row,
                item_id: self.set.meta(c.row).item_id.clone(),
                distance: c.distance,
            })
            .collect())
    }

    /// Writes the partition table, referencing `source` as the embedding file.
    pub fn write(&self, path: &Path, source: &Path) -> Result<(), IndexError> {
        let mut out = BufWriter::new(File::create(path)?);
        let src = source.to_string_lossy();
        let src_bytes = src.as_bytes();
        out.write_all(&INDEX_MAGIC)?;
        out.write_all(&(src_bytes.len() as u32).to_le_bytes())?;
        out.write_all(src_bytes)?;
        out.write_all(&[
            match self.metric {
                Metric::Cosine => 0,
                Metric::Euclidean => 1,
            },
            match self.mode {
                IndexMode::Exact => 0,
                IndexMode::Partitioned => 1,
            },
            self.date_bucket.code(),
        ])?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        out.write_all(&(self.default_nprobe as u32).to_le_bytes())?;
        out.write_all(&(self.partitions.len() as u32).to_le_bytes())?;
        for p in &self.partitions {
            let flags = u8::from(p.key.date_bucket.is_some())
                | (u8::from(p.key.resolution_level.is_some()) << 1)
                | (u8::from(p.key.product.is_some()) << 2);
            out.write_all(&[flags])?;
            if let Some(d) = p.key.date_bucket {
                out.write_all(&d.num_days_from_ce().to_le_bytes())?;
            }
            if let Some(r) = p.key.resolution_level {
                out.write_all(&r.to_le_bytes())?;
            }
            if let Some(prod) = &p.key.product {
                out.write_all(&(prod.len() as u32).to_le_bytes())?;
                out.write_all(prod.as_bytes())?;
            }
            out.write_all(&p.key.centroid.to_le_bytes())?;
            for x in &p.centroid {
                out.write_all(&x.to_le_bytes())?;
            }
            out.write_all(&(p.members.len() as u32).to_le_bytes())?;
            for &m in &p.members {
                out.write_all(&(m as u32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a partition table and loads the embedding file it references.
    /// Relative source paths resolve against the index file's directory.
    pub fn read(path: &Path) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(4)? != INDEX_MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let len = r.u32()? as usize;
        let src = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| IndexError::Format(e.to_string()))?;
        let mut source = PathBuf::from(&src);
        if source.is_relative() {
            if let Some(parent) = path.parent() {
                source = parent.join(source);
            }
        }
        let set = Arc::new(load_embeddings(&source)?);
        Self::read_table(&mut r, set)
    }

    fn read_table(r: &mut Reader<'_>, set: Arc<EmbeddingSet>) -> Result<Self, IndexError> {
        let fmt = |m: &str| IndexError::Format(m.to_string());
        let metric = match r.u8()? {
            0 => Metric::Cosine,
            1 => Metric::Euclidean,
            _ => return Err(fmt("bad metric")),
        };
        let mode = match r.u8()? {
            0 => IndexMode::Exact,
            1 => IndexMode::Partitioned,
            _ => return Err(fmt("bad mode")),
        };
        let date_bucket = DateBucket::from_code(r.u8()?).ok_or_else(|| fmt("bad date bucket"))?;
        let dim = r.u32()? as usize;
        if dim != set.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: set.dim(),
                actual: dim,
            });
        }
        let nprobe = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut seen = vec![false; set.len()];
        let mut partitions = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let flags = r.u8()?;
            let date_bucket = if flags & 1 != 0 {
                Some(
                    NaiveDate::from_num_days_from_ce_opt(r.i32()?)
                        .ok_or_else(|| fmt("bad date"))?,
                )
            } else {
                None
            };
            let resolution_level = if flags & 2 != 0 { Some(r.u32()?) } else { None };
            let product = if flags & 4 != 0 {
                let n = r.u32()? as usize;
                Some(String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt("bad product"))?)
            } else {
                None
            };
            let centroid_id = r.u32()?;
            let centroid = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            let n = r.u32()? as usize;
            let mut members = Vec::with_capacity(n.min(set.len()));
            for _ in 0..n {
                let m = r.u32()? as usize;
                if m >= set.len() || std::mem::replace(&mut seen[m], true) {
                    return Err(fmt("member row out of range or repeated"));
                }
                members.push(m);
            }
            partitions.push(Partition {
                key: PartitionKey {
                    date_bucket,
                    resolution_level,
                    product,
                    centroid: centroid_id,
                },
                centroid,
                members,
            });
        }
        if seen.iter().any(|s| !s) {
            return Err(fmt("some rows belong to no partition"));
        }
        if r.pos != r.bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        Ok(Self::from_parts(
            set,
            metric,
            mode,
            date_bucket,
            nprobe.max(1),
            partitions,
            Vec::new(),
        ))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| IndexError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, IndexError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, IndexError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Mean over `queries` of `|approx ∩ exact| / k`.
pub fn recall_at_k(
    index: &VectorIndex,
    oracle: &VectorIndex,
    queries: &[Vec<f32>],
    k: usize,
    nprobe: usize,
) -> Result<f64, IndexError> {
    if !Arc::ptr_eq(index.set(), oracle.set())
        && (index.set().len() != oracle.set().len() || index.set().dim() != oracle.set().dim())
    {
        return Err(IndexError::MismatchedUniverse);
    }
    if queries.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = queries
        .par_iter()
        .map(|q| -> Result<f64, IndexError> {
            let approx = index.query(q, k, None, nprobe)?;
            let exact = oracle.query(q, k, None, usize::MAX)?;
            let exact_rows: std::collections::HashSet<usize> =
                exact.iter().map(|h| h.row_id).collect();
            let found = approx
                .iter()
                .filter(|h| exact_rows.contains(&h.row_id))
                .count();
            Ok(found as f64 / k as f64)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    Ok(total / queries.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_set(n: usize) -> Arc<EmbeddingSet> {
        let vectors = (0..n).flat_map(|i| [i as f32, 1.0]).collect();
        let meta = (0..n)
            .map(|i| ItemMeta::new(format!("i{i:04}"), ""))
            .collect();
        Arc::new(EmbeddingSet::new(2, vectors, meta).unwrap())
    }

    #[test]
    fn exact_mode_is_single_partition() {
        let idx = VectorIndex::build(line_set(4), &IndexConfig::default()).unwrap();
        assert_eq!(idx.partitions().len(), 1);
        assert_eq!(idx.partitions()[0].members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = Arc::new(EmbeddingSet::new(2, vec![], vec![]).unwrap());
        assert!(matches!(
            VectorIndex::build(empty, &IndexConfig::default()),
            Err(IndexError::EmptySet)
        ));
        let cfg = IndexConfig {
            partitions_per_cell: 0,
            ..Default::default()
        };
        assert!(matches!(
            VectorIndex::build(line_set(3), &cfg),
            Err(IndexError::ZeroPartitions)
        ));
        let idx = VectorIndex::build(line_set(3), &IndexConfig::default()).unwrap();
        assert!(matches!(
            idx.query(&[1.0], 1, None, 1),
            Err(IndexError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
        assert!(matches!(
            idx.query(&[1.0, 0.0], 0, None, 1),
            Err(IndexError::ZeroK)
        ));
    }

    #[test]
    fn euclidean_ties_break_by_row() {
        let vectors = vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 5.0, 5.0];
        let meta = (0..4).map(|i| ItemMeta::new(format!("{i}"), "")).collect();
        let set = Arc::new(EmbeddingSet::new(2, vectors, meta).unwrap());
        let cfg = IndexConfig {
            metric: Metric::Euclidean,
            ..Default::default()
        };
        let idx = VectorIndex::build(set, &cfg).unwrap();
        let hits = idx.query(&[0.0, 0.0], 3, None, 1).unwrap();
        let rows: Vec<usize> = hits.iter().map(|h| h.row_id).collect();
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn clamps_partitions_in_small_cells() {
        let cfg = IndexConfig {
            mode: IndexMode::Partitioned,
            partitions_per_cell: 10,
            ..Default::default()
        };
        let idx = VectorIndex::build(line_set(3), &cfg).unwrap();
        assert_eq!(idx.partitions().len(), 3);
        assert_eq!(idx.warnings().len(), 1);
    }

    #[test]
    fn filter_prunes_cells_and_rows() {
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        let meta = vec![
            ItemMeta::new("a", "")
                .with_product("A")
                .with_date(d("2021-01-03")),
            ItemMeta::new("b", "")
                .with_product("B")
                .with_date(d("2021-01-20")),
            ItemMeta::new("c", "")
                .with_product("A")
                .with_date(d("2021-02-10")),
            ItemMeta::new("d", "").with_product("A"),
        ];
        let set = Arc::new(EmbeddingSet::new(1, vec![1.0, 2.0, 3.0, 4.0], meta).unwrap());
        for mode in [IndexMode::Exact, IndexMode::Partitioned] {
            let cfg = IndexConfig {
                metric: Metric::Euclidean,
                mode,
                ..Default::default()
            };
            let idx = VectorIndex::build(set.clone(), &cfg).unwrap();
            let f = FacetFilter {
                product: Some("A".into()),
                date_from: Some(d("2021-01-01")),
                date_to: Some(d("2021-01-31")),
                ..Default::default()
            };
            let hits = idx.query(&[0.0], 10, Some(&f), 100).unwrap();
            assert_eq!(
                hits.iter().map(|h| h.item_id.as_str()).collect::<Vec<_>>(),
                ["a"]
            );
            let f = FacetFilter {
                product: Some("A".into()),
                ..Default::default()
            };
            let hits = idx.query(&[0.0], 10, Some(&f), 100).unwrap();
            assert_eq!(hits.len(), 3);
            let f = FacetFilter {
                product: Some("Z".into()),
                ..Default::default()
            };
            assert!(idx.query(&[0.0], 10, Some(&f), 100).unwrap().is_empty());
        }
    }

    #[test]
    fn month_bucket_bounds() {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
        assert_eq!(DateBucket::Month.start(d(2020, 2, 17)), d(2020, 2, 1));
        assert_eq!(DateBucket::Month.end(d(2020, 2, 1)), d(2020, 2, 29));
        assert_eq!(DateBucket::Month.end(d(2021, 12, 1)), d(2021, 12, 31));
        assert_eq!(DateBucket::Year.end(d(2021, 1, 1)), d(2021, 12, 31));
    }
}
