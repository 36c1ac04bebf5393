use std::sync::Arc;

use curare_core::active::{f1, LoopConfig};
use curare_core::bench::{make_synthetic, run_benchmark, BenchError, SyntheticSpec};
use curare_core::index::{IndexConfig, VectorIndex};
use curare_core::metric::squared_euclidean;
use proptest::prelude::*;

fn index_for(spec: &SyntheticSpec) -> VectorIndex {
    VectorIndex::build(
        Arc::new(make_synthetic(spec).unwrap()),
        &IndexConfig::default(),
    )
    .unwrap()
}

#[test]
fn separable_spec_is_nearest_center_classifiable() {
    let spec = SyntheticSpec {
        classes: 2,
        per_class: 100,
        dim: 16,
        separation: 20.0,
        cluster_spread: 0.5,
        ..Default::default()
    };
    let set = make_synthetic(&spec).unwrap();
    let mean = |c: i64| -> Vec<f32> {
        let rows: Vec<&[f32]> = (0..set.len())
            .filter(|&r| set.meta(r).true_label == Some(c))
            .map(|r| set.vector(r))
            .collect();
        (0..16)
            .map(|d| rows.iter().map(|r| r[d]).sum::<f32>() / rows.len() as f32)
            .collect()
    };
    let centers = [mean(0), mean(1)];
    for r in 0..set.len() {
        let v = set.vector(r);
        let guess = if squared_euclidean(v, &centers[0]) <= squared_euclidean(v, &centers[1]) {
            0
        } else {
            1
        };
        assert_eq!(Some(guess), set.meta(r).true_label);
    }
    assert_eq!(make_synthetic(&spec).unwrap(), set);
}

#[test]
fn separable_benchmark_retrieves_everything() {
    let spec = SyntheticSpec {
        classes: 2,
        per_class: 150,
        dim: 16,
        separation: 12.0,
        ..Default::default()
    };
    let index = index_for(&spec);
    let cfg = LoopConfig {
        seed_nn: 32,
        seed_random: 16,
        ..Default::default()
    };
    let report = run_benchmark(&index, 3, &cfg).unwrap();
    assert_eq!(report.runs.len(), 6);
    assert!(report.mean.positives_retrieved >= 0.99);
    assert!(report.mean.false_positive_fraction <= 0.01);
    for run in &report.runs {
        assert_eq!(run.metrics.labeling_effort, run.requested as f64 / 300.0);
        for v in [
            run.metrics.f1_val,
            run.metrics.labeling_effort,
            run.metrics.positives_retrieved,
            run.metrics.false_positive_fraction,
        ] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn exhaustive_budget_labels_everything() {
    let spec = SyntheticSpec {
        classes: 2,
        per_class: 40,
        dim: 8,
        separation: 10.0,
        ..Default::default()
    };
    let index = index_for(&spec);
    let cfg = LoopConfig {
        seed_nn: 16,
        seed_random: 8,
        batch_size: 16,
        label_budget_fraction: 1.0,
        validation_fraction: 0.0,
        ..Default::default()
    };
    let report = run_benchmark(&index, 2, &cfg).unwrap();
    for run in &report.runs {
        assert_eq!(run.metrics.positives_retrieved, 1.0);
        assert_eq!(run.metrics.labeling_effort, 1.0);
    }
}

#[test]
fn benchmark_is_deterministic_and_reports_per_class() {
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 80,
        dim: 12,
        separation: 3.0,
        ..Default::default()
    };
    let index = index_for(&spec);
    let cfg = LoopConfig {
        seed_nn: 20,
        seed_random: 10,
        batch_size: 10,
        seed: 17,
        ..Default::default()
    };
    let a = run_benchmark(&index, 2, &cfg).unwrap();
    let b = run_benchmark(&index, 2, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_class.len(), 3);
    let tsv = a.to_tsv();
    assert!(tsv.starts_with(
        "class\tf1_val\tlabeling_effort\tpositives_retrieved\tfalse_positive_fraction\n"
    ));
    assert_eq!(tsv.lines().count(), 5);
    assert!(a.mean_loop_fraction > 0.0 && a.mean_loop_fraction < a.mean.labeling_effort);
}

#[test]
fn small_classes_are_rejected() {
    let spec = SyntheticSpec {
        classes: 2,
        per_class: 30,
        dim: 4,
        ..Default::default()
    };
    let index = index_for(&spec);
    assert!(matches!(
        run_benchmark(&index, 1, &LoopConfig::default()),
        Err(BenchError::ClassTooSmall { seed_nn: 64, .. })
    ));
}

proptest! {
    #[test]
    fn f1_matches_confusion_matrix(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let pred: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(truth.iter().any(|&t| t));
        let mut m = [[0usize; 2]; 2];
        for (&p, &t) in pred.iter().zip(&truth) {
            m[p as usize][t as usize] += 1;
        }
        let (tp, fp, fn_) = (m[1][1] as f64, m[1][0] as f64, m[0][1] as f64);
        let want = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        prop_assert!((f1(&pred, &truth).unwrap() - want).abs() < 1e-12);
    }
}
