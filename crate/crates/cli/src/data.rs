use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::Args;
use curare_core::coreset::{coverage_radius, greedy_fps, stratified_fps, CoresetConfig};
use curare_core::head::{train as train_head, write_model, Batch, ClassWeighting, TrainConfig};
use curare_core::index::{
    DateBucket, FacetFilter, IndexConfig, IndexMode, VectorIndex, DEFAULT_NPROBE,
};
use curare_core::labels::{LabelRecord, LabelStore};
use curare_core::metric::Metric;
use curare_core::store::{load_embeddings_with_meta, sidecar_path, EmbeddingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::DataArgs;

pub fn load_set(a: &DataArgs) -> Result<EmbeddingSet> {
    let meta = a.meta.clone().unwrap_or_else(|| sidecar_path(&a.vectors));
    load_embeddings_with_meta(&a.vectors, &meta)
        .with_context(|| format!("loading {} with {}", a.vectors.display(), meta.display()))
}

pub fn parse_bucket(s: &str) -> Result<DateBucket, String> {
    match s {
        "day" => Ok(DateBucket::Day),
        "month" => Ok(DateBucket::Month),
        "year" => Ok(DateBucket::Year),
        other => Err(format!("unknown date bucket {other:?}")),
    }
}

pub fn default_index_path(vectors: &Path) -> PathBuf {
    let mut os = vectors.as_os_str().to_owned();
    os.push(".curi");
    PathBuf::from(os)
}

/// An index from `--index`, or an exact index built over `--vectors`.
#[derive(Args, Clone)]
pub struct IndexSource {
    /// Persisted index file.
    #[arg(long, conflicts_with_all = ["vectors", "meta"])]
    pub index: Option<PathBuf>,
    /// Vector file, indexed exactly on the fly.
    #[arg(long, required_unless_present = "index")]
    pub vectors: Option<PathBuf>,
    /// Metadata sidecar; defaults to `<vectors>.meta.tsv`.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long, default_value = "cosine")]
    pub metric: Metric,
}

impl IndexSource {
    pub fn open(&self) -> Result<VectorIndex> {
        if let Some(p) = &self.index {
            return VectorIndex::read(p).with_context(|| format!("reading index {}", p.display()));
        }
        let data = DataArgs {
            vectors: self.vectors.clone().expect("clap requires vectors"),
            meta: self.meta.clone(),
        };
        let set = Arc::new(load_set(&data)?);
        let cfg = IndexConfig {
            metric: self.metric,
            ..IndexConfig::default()
        };
        Ok(VectorIndex::build(set, &cfg)?)
    }
}

pub fn ingest(a: &DataArgs) -> Result<()> {
    let set = load_set(a)?;
    let metas = set.metas();
    let products: BTreeSet<&str> = metas.iter().filter_map(|m| m.product.as_deref()).collect();
    let dates: Vec<NaiveDate> = metas.iter().filter_map(|m| m.date).collect();
    let labeled = metas.iter().filter(|m| m.true_label.is_some()).count();
    println!("count\t{}", set.len());
    println!("dim\t{}", set.dim());
    println!("products\t{}", products.len());
    match (dates.iter().min(), dates.iter().max()) {
        (Some(lo), Some(hi)) => println!("dates\t{lo}..{hi}"),
        _ => println!("dates\t-"),
    }
    println!("labeled\t{labeled}");
    Ok(())
}

#[derive(Args)]
pub struct IndexBuildArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "exact")]
    mode: IndexMode,
    #[arg(long, default_value = "cosine")]
    metric: Metric,
    /// Partitions per facet cell.
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Date granularity of facet cells: day, month or year.
    #[arg(long, default_value = "month", value_parser = parse_bucket)]
    date_bucket: DateBucket,
    /// Default number of partitions probed per query.
    #[arg(long, default_value_t = DEFAULT_NPROBE)]
    nprobe: usize,
    /// Output file; defaults to `<vectors>.curi`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn index_build(a: &IndexBuildArgs) -> Result<()> {
    if a.data
        .meta
        .as_ref()
        .is_some_and(|m| *m != sidecar_path(&a.data.vectors))
    {
        bail!("a persisted index resolves metadata from the sidecar next to the vector file; drop --meta");
    }
    let set = Arc::new(load_set(&a.data)?);
    let cfg = IndexConfig {
        metric: a.metric,
        mode: a.mode,
        partitions_per_cell: a.partitions,
        seed: a.seed,
        date_bucket: a.date_bucket,
        nprobe: a.nprobe,
    };
    let index = VectorIndex::build(set, &cfg)?;
    for w in index.warnings() {
        log::warn!("{w}");
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| default_index_path(&a.data.vectors));
    let source = fs::canonicalize(&a.data.vectors)?;
    index.write(&out, &source)?;
    println!("partitions\t{}", index.partitions().len());
    println!("index\t{}", out.display());
    Ok(())
}

/// Facet constraints shared by search-like commands.
#[derive(Args, Clone, Default)]
pub struct FacetArgs {
    #[arg(long)]
    pub product: Option<String>,
    #[arg(long)]
    pub date_from: Option<NaiveDate>,
    #[arg(long)]
    pub date_to: Option<NaiveDate>,
    #[arg(long)]
    pub resolution_level: Option<u32>,
}

impl FacetArgs {
    pub fn filter(&self) -> FacetFilter {
        FacetFilter {
            product: self.product.clone(),
            date_from: self.date_from,
            date_to: self.date_to,
            resolution_level: self.resolution_level,
        }
    }
}

#[derive(Args)]
pub struct SearchArgs {
    #[command(flatten)]
    source: IndexSource,
    /// Query item.
    #[arg(long)]
    id: String,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[command(flatten)]
    facets: FacetArgs,
    /// Partitions probed; defaults to the index setting.
    #[arg(long)]
    nprobe: Option<usize>,
}

pub fn search(a: &SearchArgs) -> Result<()> {
    let index = a.source.open()?;
    let filter = a.facets.filter();
    let nprobe = a.nprobe.unwrap_or(index.default_nprobe());
    let hits = index.query_item(&a.id, a.k, Some(&filter), nprobe)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "rank\titem_id\tdistance\turi")?;
    for (i, h) in hits.iter().enumerate() {
        writeln!(
            out,
            "{}\t{}\t{:.6}\t{}",
            i + 1,
            h.item_id,
            h.distance,
            index.set().meta(h.row_id).uri
        )?;
    }
    Ok(())
}

#[derive(Args)]
pub struct CoresetArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of rows to select.
    #[arg(long)]
    size: usize,
    /// Sample candidates instead of scanning every row per step.
    #[arg(long)]
    stratified: bool,
    #[arg(long, default_value_t = 256, requires = "stratified")]
    sample_size: usize,
    #[arg(long, default_value_t = 64, requires = "stratified")]
    resample_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First selected item; drawn from the seed when absent.
    #[arg(long)]
    start: Option<String>,
    /// Output file, one row id per line; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn coreset(a: &CoresetArgs) -> Result<()> {
    let set = load_set(&a.data)?;
    if set.is_empty() {
        bail!("embedding set is empty");
    }
    let start = match &a.start {
        Some(id) => set
            .row_of(id)
            .with_context(|| format!("unknown item {id:?}"))?,
        None => ChaCha8Rng::seed_from_u64(a.seed).random_range(0..set.len()),
    };
    let result = if a.stratified {
        let cfg = CoresetConfig::stratified(a.size, start, a.sample_size, a.resample_every, a.seed);
        stratified_fps(&set, &cfg)?
    } else {
        greedy_fps(&set, &CoresetConfig::greedy(a.size, start))?
    };
    let text: String = result.rows.iter().map(|r| format!("{r}\n")).collect();
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    log::info!(
        "selected {} rows, coverage radius {:.6}, {} distance evaluations",
        result.rows.len(),
        coverage_radius(&set, &result.rows)?,
        result.distance_evaluations
    );
    Ok(())
}

pub fn parse_weighting(s: &str) -> Result<ClassWeighting, String> {
    match s {
        "none" => Ok(ClassWeighting::None),
        "balanced" => Ok(ClassWeighting::Balanced),
        other => Err(format!("unknown class weighting {other:?}")),
    }
}

/// Optimizer settings; defaults match the loop's.
#[derive(Args, Clone)]
pub struct HeadArgs {
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().l2)]
    pub l2: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub minibatch: usize,
    /// none or balanced.
    #[arg(long, default_value = "none", value_parser = parse_weighting)]
    pub class_weighting: ClassWeighting,
}

impl HeadArgs {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.minibatch,
            l2: self.l2,
            seed,
            class_weighting: self.class_weighting,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Label log: item_id, label and optional source, iteration, timestamp.
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    head: HeadArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "model.curm")]
    out: PathBuf,
}

/// Reads a label log. Blank lines, `#` comments and an `item_id` header are skipped.
pub fn read_labels(path: &Path) -> Result<LabelStore> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut log = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line.starts_with("item_id\t") {
            continue;
        }
        log.push(
            LabelRecord::from_tsv(line)
                .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1))?,
        );
    }
    Ok(LabelStore::from_log(log))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let set = load_set(&a.data)?;
    let store = read_labels(&a.labels)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for r in store.effective_records() {
        let row = set
            .row_of(&r.item_id)
            .with_context(|| format!("unknown item {:?}", r.item_id))?;
        features.extend_from_slice(set.vector(row));
        labels.push(r.label.is_relevant());
    }
    if labels.is_empty() {
        bail!("no labels in {}", a.labels.display());
    }
    let model = train_head(&features, set.dim(), &labels, &a.head.config(a.seed))?;
    write_model(&model, &a.out)?;
    let probs = model.predict_proba(&features)?;
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| (p[1] >= 0.5) == l)
        .count();
    println!("examples\t{}", labels.len());
    println!("positives\t{}", labels.iter().filter(|&&l| l).count());
    println!("loss\t{:.6}", model.loss(&Batch::new(&features, &labels))?);
    println!("accuracy\t{:.4}", correct as f64 / labels.len() as f64);
    println!("model\t{}", a.out.display());
    Ok(())
}
