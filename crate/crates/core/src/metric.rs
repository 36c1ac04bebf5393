//! Distance kernels. All accumulation is sequential in f64 so results are
//! reproducible bit-for-bit across call sites.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    squared_euclidean(a, b).sqrt()
}

/// `1 - cos(a, b)` given precomputed norms, clamped to `[0, 2]`. A zero-norm
/// operand is at distance 2 from everything.
pub fn cosine_distance_with_norms(a: &[f32], b: &[f32], norm_a: f64, norm_b: f64) -> f64 {
    if norm_a == 0.0 || norm_b == 0.0 {
        return 2.0;
    }
    (1.0 - dot(a, b) / (norm_a * norm_b)).clamp(0.0, 2.0)
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    cosine_distance_with_norms(a, b, norm(a), norm(b))
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Cosine => cosine_distance(a, b),
            Metric::Euclidean => euclidean(a, b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_vector_is_at_distance_two() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]), 2.0);
    }

    #[test]
    fn known_values() {
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-3.0, 0.0]) - 2.0).abs() < 1e-12);
        assert_eq!(euclidean(&[0.0, 3.0], &[4.0, 0.0]), 5.0);
    }

    proptest! {
        #[test]
        fn cosine_distance_in_range(
            a in prop::collection::vec(-1e3f32..1e3, 1..16),
            b in prop::collection::vec(-1e3f32..1e3, 1..16),
        ) {
            let n = a.len().min(b.len());
            let d = cosine_distance(&a[..n], &b[..n]);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
