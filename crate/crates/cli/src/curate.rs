use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use curare_core::active::{
    run_loop, CuratedSet, Diversity, IterationRecord, LoopConfig, OracleLabeler, Uncertainty,
};
use curare_core::bench::{make_synthetic, run_benchmark, BenchMetrics, SyntheticSpec};
use curare_core::index::{IndexConfig, VectorIndex};
use curare_core::labels::LabelStore;
use curare_core::store::EmbeddingSet;
use curare_service::{AppState, BackgroundServer, ServiceConfig};

use crate::data::{load_set, HeadArgs, IndexSource};
use crate::DataArgs;

/// Loop settings shared by `loop` and `serve`.
#[derive(Args, Clone)]
pub struct LoopSettings {
    /// least_confidence, margin, entropy or random.
    #[arg(long, default_value = "least_confidence")]
    pub strategy: Uncertainty,
    /// none, proximity, gaussian or cluster.
    #[arg(long, default_value = "none")]
    pub diversity: Diversity,
    /// Loop labels as a fraction of the dataset.
    #[arg(long, default_value_t = LoopConfig::default().label_budget_fraction)]
    pub budget: f64,
    #[arg(long, default_value_t = LoopConfig::default().batch_size)]
    pub batch: usize,
    #[arg(long, default_value_t = LoopConfig::default().seed_nn)]
    pub seed_nn: usize,
    #[arg(long, default_value_t = LoopConfig::default().seed_random)]
    pub seed_random: usize,
    /// Probability above which unlabeled items are curated.
    #[arg(long, default_value_t = LoopConfig::default().relevance_threshold)]
    pub threshold: f64,
    /// Largest final verification batch; 0 disables it.
    #[arg(long, default_value_t = LoopConfig::default().verify_cap)]
    pub verify_cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub head: HeadArgs,
}

impl LoopSettings {
    pub fn config(&self) -> LoopConfig {
        LoopConfig {
            seed_nn: self.seed_nn,
            seed_random: self.seed_random,
            batch_size: self.batch,
            label_budget_fraction: self.budget,
            uncertainty: self.strategy,
            diversity: self.diversity,
            relevance_threshold: self.threshold,
            seed: self.seed,
            train: self.head.config(self.seed),
            verify_cap: self.verify_cap,
            ..LoopConfig::default()
        }
    }
}

/// HTTP listener and asset locations.
#[derive(Args, Clone)]
pub struct HttpArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Directory item uris resolve against for `/images`.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    /// Built UI assets served under `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Session persistence directory.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
}

impl HttpArgs {
    fn state(&self, index: VectorIndex, base_loop: LoopConfig) -> Result<Arc<AppState>> {
        let cfg = ServiceConfig {
            base_loop,
            images_root: self.images_root.clone(),
            ui_dir: self.ui_dir.clone(),
            state_dir: self.state_dir.clone(),
        };
        Ok(Arc::new(AppState::new(Arc::new(index), cfg)?))
    }
}

#[derive(Args)]
#[command(group(ArgGroup::new("labeler").required(true).args(["oracle", "interactive"])))]
pub struct LoopArgs {
    #[command(flatten)]
    source: IndexSource,
    /// Item the curation starts from.
    #[arg(long)]
    starter: String,
    #[command(flatten)]
    settings: LoopSettings,
    /// Simulated labeler; `meta` answers from the true_label column.
    #[arg(long, value_parser = ["meta"])]
    oracle: Option<String>,
    /// Class treated as relevant by the oracle; defaults to the starter's.
    #[arg(long, requires = "oracle")]
    relevant_class: Option<i64>,
    /// Label through the web UI instead.
    #[arg(long)]
    interactive: bool,
    #[command(flatten)]
    http: HttpArgs,
    /// Curated set output (item_id, score, provenance, uri).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label log output.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

pub fn run(a: &LoopArgs) -> Result<()> {
    let index = a.source.open()?;
    let cfg = a.settings.config();
    let set = Arc::clone(index.set());
    let (curated, history, labels) = if a.interactive {
        interactive(a, index, cfg)?
    } else {
        let row = set
            .row_of(&a.starter)
            .with_context(|| format!("unknown starter {:?}", a.starter))?;
        let class = match a.relevant_class.or(set.meta(row).true_label) {
            Some(c) => c,
            None => bail!(
                "starter {:?} has no true_label; pass --relevant-class",
                a.starter
            ),
        };
        let mut oracle = OracleLabeler {
            relevant_class: class,
        };
        let outcome =
            run_loop(&index, &a.starter, &mut oracle, cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
        log::info!(
            "labels requested: {} seed, {} loop, {} verification",
            outcome.counts.seed,
            outcome.counts.looped,
            outcome.counts.verify
        );
        (outcome.curated, outcome.history, outcome.labels)
    };
    let mut out = std::io::stdout().lock();
    for h in &history {
        writeln!(out, "{}", h.to_tsv())?;
    }
    log::info!("curated {} items", curated.len());
    if let Some(p) = &a.out {
        write_curated(p, &curated, &set)?;
    }
    if let Some(p) = &a.labels_out {
        let text: String = labels.log().iter().map(|r| r.to_tsv() + "\n").collect();
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn write_curated(path: &Path, curated: &CuratedSet, set: &EmbeddingSet) -> Result<()> {
    let mut text = String::from("item_id\tscore\tprovenance\turi\n");
    for item in &curated.items {
        let uri = &set.meta(item.row).uri;
        text.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\n",
            item.item_id,
            item.score,
            item.provenance.as_str(),
            uri
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn interactive(
    a: &LoopArgs,
    index: VectorIndex,
    cfg: LoopConfig,
) -> Result<(CuratedSet, Vec<IterationRecord>, LabelStore)> {
    let state = a.http.state(index, cfg)?;
    let session = state.create_session(&a.starter, &serde_json::Value::Null)?;
    let server = BackgroundServer::start(
        Arc::clone(&state),
        SocketAddr::new(a.http.host, a.http.port),
    )?;
    {
        let s = session.lock().unwrap();
        println!(
            "label at {}",
            server.url(&format!("/#/label/{}/{}", s.id, s.share_token))
        );
    }
    let mut reported = 0;
    loop {
        std::thread::sleep(Duration::from_millis(500));
        let s = session.lock().unwrap();
        let status = s.status(state.index.set());
        for h in &status.history[reported..] {
            log::info!("iteration {}", h.to_tsv());
        }
        reported = status.history.len();
        if s.state().is_done() && !status.training {
            let st = s.state();
            let curated = st.curated().cloned().unwrap_or_default();
            return Ok((curated, st.history.clone(), st.labels.clone()));
        }
    }
}

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    http: HttpArgs,
    #[command(flatten)]
    settings: LoopSettings,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let set = Arc::new(load_set(&a.data)?);
    let index = VectorIndex::build(set, &IndexConfig::default())?;
    let state = a.http.state(index, a.settings.config())?;
    let server = BackgroundServer::start(state, SocketAddr::new(a.http.host, a.http.port))?;
    println!("listening on {}", server.url("/"));
    server.wait();
    Ok(())
}

#[derive(Args)]
#[command(group(ArgGroup::new("dataset").required(true).args(["synthetic", "vectors"])))]
pub struct BenchArgs {
    /// Synthetic dataset, e.g. `classes=10,per_class=200,dim=64,separation=2.5`.
    #[arg(long, value_parser = parse_synthetic)]
    synthetic: Option<SyntheticSpec>,
    /// Labeled embedding file instead of synthetic data.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long, requires = "vectors")]
    meta: Option<PathBuf>,
    /// Starters drawn per class.
    #[arg(long, default_value_t = 10)]
    starters: usize,
    /// Master seeds 0..seeds.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma separated strategies to compare.
    #[arg(long, value_delimiter = ',', default_values = ["least_confidence", "random"])]
    strategy: Vec<Uncertainty>,
    #[command(flatten)]
    settings: BenchLoopArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchLoopArgs {
    #[arg(long, default_value = "none")]
    diversity: Diversity,
    #[arg(long, default_value_t = LoopConfig::default().label_budget_fraction)]
    budget: f64,
    #[arg(long, default_value_t = LoopConfig::default().batch_size)]
    batch: usize,
    #[command(flatten)]
    head: HeadArgs,
}

/// `key=value` pairs over the synthetic generator parameters. `imbalance`
/// takes colon separated weights.
pub fn parse_synthetic(s: &str) -> Result<SyntheticSpec, String> {
    let mut spec = SyntheticSpec::default();
    for pair in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        let (k, v) = (k.trim(), v.trim());
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{k}: {e}"));
        let float = |v: &str| v.parse::<f64>().map_err(|e| format!("{k}: {e}"));
        match k {
            "classes" => spec.classes = int(v)?,
            "per_class" => spec.per_class = int(v)?,
            "dim" => spec.dim = int(v)?,
            "spread" | "cluster_spread" => spec.cluster_spread = float(v)?,
            "separation" => spec.separation = float(v)?,
            "imbalance" => {
                spec.imbalance = Some(v.split(':').map(float).collect::<Result<_, _>>()?)
            }
            other => return Err(format!("unknown synthetic parameter {other:?}")),
        }
    }
    Ok(spec)
}

fn row(out: &mut String, strategy: Uncertainty, seed: &str, m: &BenchMetrics, loop_fraction: f64) {
    out.push_str(&format!(
        "{}\t{seed}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        strategy_name(strategy),
        m.f1_val,
        m.labeling_effort,
        m.positives_retrieved,
        m.false_positive_fraction,
        loop_fraction
    ));
}

fn strategy_name(s: Uncertainty) -> &'static str {
    match s {
        Uncertainty::LeastConfidence => "least_confidence",
        Uncertainty::Margin => "margin",
        Uncertainty::Entropy => "entropy",
        Uncertainty::Random => "random",
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.seeds == 0 || a.strategy.is_empty() {
        bail!("need at least one seed and one strategy");
    }
    let shared = match &a.vectors {
        Some(v) => {
            let data = DataArgs {
                vectors: v.clone(),
                meta: a.meta.clone(),
            };
            Some(Arc::new(VectorIndex::build(
                Arc::new(load_set(&data)?),
                &IndexConfig::default(),
            )?))
        }
        None => None,
    };
    let mut table = String::from(
        "strategy\tseed\tf1_val\tlabeling_effort\tpositives_retrieved\tfalse_positive_fraction\tloop_fraction\n",
    );
    let mut per_strategy: Vec<(Vec<BenchMetrics>, Vec<f64>)> =
        vec![Default::default(); a.strategy.len()];
    for seed in 0..a.seeds {
        let index = match (&shared, &a.synthetic) {
            (Some(i), _) => Arc::clone(i),
            (None, Some(spec)) => {
                let spec = SyntheticSpec {
                    seed,
                    ..spec.clone()
                };
                Arc::new(VectorIndex::build(
                    Arc::new(make_synthetic(&spec)?),
                    &IndexConfig::default(),
                )?)
            }
            (None, None) => unreachable!("clap requires a dataset"),
        };
        for (i, &strategy) in a.strategy.iter().enumerate() {
            let cfg = LoopConfig {
                uncertainty: strategy,
                diversity: a.settings.diversity,
                label_budget_fraction: a.settings.budget,
                batch_size: a.settings.batch,
                seed,
                train: a.settings.head.config(seed),
                ..LoopConfig::default()
            };
            let report = run_benchmark(&index, a.starters, &cfg)?;
            log::info!(
                "seed {seed} {}: positives {:.4}, f1 {:.4}",
                strategy_name(strategy),
                report.mean.positives_retrieved,
                report.mean.f1_val
            );
            row(
                &mut table,
                strategy,
                &seed.to_string(),
                &report.mean,
                report.mean_loop_fraction,
            );
            per_strategy[i].0.push(report.mean);
            per_strategy[i].1.push(report.mean_loop_fraction);
        }
    }
    for (&strategy, (metrics, loops)) in a.strategy.iter().zip(&per_strategy) {
        let n = metrics.len() as f64;
        let avg = |f: fn(&BenchMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
        let mean = BenchMetrics {
            f1_val: avg(|m| m.f1_val),
            labeling_effort: avg(|m| m.labeling_effort),
            positives_retrieved: avg(|m| m.positives_retrieved),
            false_positive_fraction: avg(|m| m.false_positive_fraction),
        };
        row(
            &mut table,
            strategy,
            "mean",
            &mean,
            loops.iter().sum::<f64>() / n,
        );
    }
    match &a.out {
        Some(p) => fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{table}"),
    }
    Ok(())
}
