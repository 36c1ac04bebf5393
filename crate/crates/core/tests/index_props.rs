mod common;

use std::sync::Arc;

use chrono::NaiveDate;
use common::{blobs, brute_top_k, oracle_cosine, oracle_sq_euclid, random_set};
use curare_core::index::{recall_at_k, FacetFilter, IndexConfig, IndexMode, VectorIndex};
use curare_core::metric::Metric;
use curare_core::store::{EmbeddingSet, ItemMeta};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact(set: Arc<EmbeddingSet>, metric: Metric) -> VectorIndex {
    VectorIndex::build(
        set,
        &IndexConfig {
            metric,
            ..Default::default()
        },
    )
    .unwrap()
}

fn partitioned(set: Arc<EmbeddingSet>, metric: Metric, per_cell: usize, seed: u64) -> VectorIndex {
    let cfg = IndexConfig {
        metric,
        mode: IndexMode::Partitioned,
        partitions_per_cell: per_cell,
        seed,
        ..Default::default()
    };
    VectorIndex::build(set, &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exact_matches_brute_force(n in 1usize..300, dim in 1usize..12, k in 1usize..20, seed in any::<u64>(), cosine in any::<bool>()) {
        let set = random_set(n, dim, seed);
        let metric = if cosine { Metric::Cosine } else { Metric::Euclidean };
        let index = exact(set.clone(), metric);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hits = index.query(&q, k, None, 4).unwrap();
        let oracle = if cosine {
            brute_top_k(&set, &q, k, oracle_cosine)
        } else {
            brute_top_k(&set, &q, k, |a, b| oracle_sq_euclid(a, b).sqrt())
        };
        let got: Vec<usize> = hits.iter().map(|h| h.row_id).collect();
        let want: Vec<usize> = oracle.iter().map(|h| h.0).collect();
        prop_assert_eq!(got, want);
        for w in hits.windows(2) {
            prop_assert!(w[0].distance <= w[1].distance);
        }
    }

    #[test]
    fn cosine_distances_stay_in_range(a in proptest::collection::vec(-1e3f32..1e3, 1..16), scale in -5.0f32..5.0) {
        let b: Vec<f32> = a.iter().map(|x| x * scale).collect();
        let d = curare_core::metric::cosine_distance(&a, &b);
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn filters_are_respected_and_exact_among_passing(n in 10usize..200, seed in any::<u64>(), partitioned_mode in any::<bool>()) {
        let products = ["VIIRS", "MODIS", "OLI"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let meta: Vec<ItemMeta> = (0..n)
            .map(|i| {
                let mut m = ItemMeta::new(format!("t{i}"), "");
                if i % 7 != 0 {
                    m = m.with_product(products[i % 3]);
                }
                m.with_date(NaiveDate::from_ymd_opt(2021, 1 + (i % 6) as u32, 1 + (i % 27) as u32).unwrap())
                    .with_resolution((i % 2) as u32)
            })
            .collect();
        let set = Arc::new(EmbeddingSet::new(4, rows, meta).unwrap());
        let filter = FacetFilter {
            product: Some("MODIS".into()),
            date_from: NaiveDate::from_ymd_opt(2021, 2, 10),
            date_to: NaiveDate::from_ymd_opt(2021, 5, 3),
            resolution_level: None,
        };
        let q = set.vector(0).to_vec();
        let index = if partitioned_mode {
            partitioned(set.clone(), Metric::Cosine, 2, seed)
        } else {
            exact(set.clone(), Metric::Cosine)
        };
        let hits = index.query(&q, 10, Some(&filter), usize::MAX).unwrap();
        for h in &hits {
            prop_assert!(filter.matches(set.meta(h.row_id)));
        }
        // full probing makes partitioned mode exhaustive as well
        let mut passing: Vec<(usize, f64)> = (0..n)
            .filter(|&r| filter.matches(set.meta(r)))
            .map(|r| (r, oracle_cosine(&q, set.vector(r))))
            .collect();
        passing.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        passing.truncate(10);
        let got: Vec<usize> = hits.iter().map(|h| h.row_id).collect();
        let want: Vec<usize> = passing.iter().map(|p| p.0).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn self_query_is_first_hit() {
    let set = random_set(500, 16, 9);
    let index = exact(set.clone(), Metric::Cosine);
    for r in [0, 17, 499] {
        let hits = index.query(set.vector(r), 3, None, 4).unwrap();
        assert_eq!(hits[0].row_id, r);
        assert!(hits[0].distance <= 1e-6);
    }
}

#[test]
fn two_products_four_partitions_each() {
    let base = random_set(1000, 8, 5);
    let meta: Vec<ItemMeta> = (0..1000)
        .map(|i| {
            ItemMeta::new(format!("i{i}"), "").with_product(if i % 2 == 0 { "A" } else { "B" })
        })
        .collect();
    let set = Arc::new(EmbeddingSet::new(8, base.vectors().to_vec(), meta).unwrap());
    let a = partitioned(set.clone(), Metric::Euclidean, 4, 42);
    let b = partitioned(set.clone(), Metric::Euclidean, 4, 42);
    assert_eq!(a.partitions().len(), 8);
    let mut all: Vec<usize> = a
        .partitions()
        .iter()
        .flat_map(|p| p.members.iter().copied())
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    for (x, y) in a.partitions().iter().zip(b.partitions()) {
        assert_eq!(x.key, y.key);
        assert_eq!(x.members, y.members);
        assert_eq!(x.centroid, y.centroid);
    }
}

#[test]
fn recall_full_probe_is_one_and_cluster_aligned_probe_is_high() {
    let set = blobs(10, 100, 16, 1.0, 7);
    let oracle = exact(set.clone(), Metric::Euclidean);
    let index = partitioned(set.clone(), Metric::Euclidean, 10, 3);
    let queries: Vec<Vec<f32>> = (0..50).map(|i| set.vector(i * 20).to_vec()).collect();
    let full = recall_at_k(&index, &oracle, &queries, 10, 10).unwrap();
    assert_eq!(full, 1.0);
    let one = recall_at_k(&index, &oracle, &queries, 10, 1).unwrap();
    assert!(one >= 0.95, "nprobe=1 recall {one}");
    let selfq = recall_at_k(&index, &oracle, &queries, 1, 1).unwrap();
    assert_eq!(selfq, 1.0);
}

#[test]
fn persisted_index_answers_identically() {
    let set = blobs(4, 50, 8, 1.0, 1);
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("e.cur");
    curare_core::store::write_embeddings(&set, &emb).unwrap();
    let index = partitioned(set.clone(), Metric::Cosine, 3, 11);
    let table = dir.path().join("e.idx");
    index.write(&table, &emb).unwrap();
    let back = VectorIndex::read(&table).unwrap();
    assert_eq!(back.partitions().len(), index.partitions().len());
    for r in [0, 51, 120, 199] {
        let a = index.query(set.vector(r), 12, None, 2).unwrap();
        let b = back.query(set.vector(r), 12, None, 2).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn empty_filtered_universe_returns_no_hits() {
    let set = random_set(20, 4, 2);
    let index = exact(set.clone(), Metric::Cosine);
    let f = FacetFilter {
        product: Some("nothing".into()),
        ..Default::default()
    };
    assert!(index
        .query(set.vector(0), 5, Some(&f), 4)
        .unwrap()
        .is_empty());
    assert!(index.query(&[1.0], 5, None, 4).is_err());
}

#[test]
fn zero_norm_vectors_are_at_distance_two() {
    let set = common::set_from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let index = exact(set, Metric::Cosine);
    let hits = index.query(&[1.0, 0.0], 3, None, 4).unwrap();
    assert_eq!(
        hits.iter().map(|h| h.row_id).collect::<Vec<_>>(),
        vec![1, 2, 0]
    );
    assert_eq!(hits[2].distance, 2.0);
}
