//! Embedding store, vector index, coreset sampling, linear head and the
//! active learning loop behind the curare curation tool.

pub mod active;
pub mod bench;
pub mod coreset;
pub mod head;
pub mod index;
pub mod kmeans;
pub mod labels;
pub mod metric;
pub mod store;

pub use active::{
    build_seed_set, run_loop, score_uncertainty, select_batch, CuratedItem, CuratedSet, Diversity,
    Labeler, LoopConfig, LoopState, Phase, Uncertainty,
};
pub use bench::{make_synthetic, run_benchmark, BenchMetrics, SyntheticSpec};
pub use coreset::{greedy_fps, stratified_fps, CoresetConfig};
pub use head::{train, LinearModel, TrainConfig};
pub use index::{FacetFilter, Hit, IndexConfig, IndexMode, VectorIndex};
pub use labels::{Label, LabelRecord, LabelSource, LabelStore};
pub use metric::Metric;
pub use store::{load_embeddings, write_embeddings, EmbeddingSet, ItemMeta};
