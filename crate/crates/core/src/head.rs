//! Two-class softmax classifier trained on frozen embedding features.
//!
//! Training minimizes the (optionally class-weighted) mean cross-entropy plus
//! `l2 * ||W||^2` with seeded mini-batch gradient descent. The bias is not
//! regularized. Class index 1 is "relevant".

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingSet, StoreError};

pub const MODEL_MAGIC: [u8; 4] = *b"CURM";

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("training data needs both classes")]
    SingleClass,
    #[error("need at least two training examples")]
    TooFewExamples,
    #[error("non-finite feature at example {0}")]
    NonFinite(usize),
    #[error("feature dimension {actual} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("target_dim {target} exceeds source dimension {source_dim}")]
    TargetTooLarge { target: usize, source_dim: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    None,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 100,
            batch_size: 64,
            l2: 0.05,
            seed: 0,
            class_weighting: ClassWeighting::None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), HeadError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HeadError::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HeadError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(HeadError::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// A borrowed training batch: `labels.len()` rows of `features`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f32],
    pub labels: &'a [bool],
    /// Per-example loss weights; `None` means all ones.
    pub example_weights: Option<&'a [f64]>,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f32], labels: &'a [bool]) -> Self {
        Self {
            features,
            labels,
            example_weights: None,
        }
    }
}

/// Parameter-shaped gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    dim: usize,
    /// `dim x 2`, row-major: `weights[d * 2 + class]`.
    weights: Vec<f64>,
    bias: [f64; 2],
    pub config: TrainConfig,
}

fn softmax2(s0: f64, s1: f64) -> [f64; 2] {
    // p1 = sigmoid(s1 - s0); both computed from the same difference so the
    // pair sums to one to rounding.
    let d = s1 - s0;
    let p1 = 1.0 / (1.0 + (-d).exp());
    let p0 = 1.0 / (1.0 + d.exp());
    [p0, p1]
}

impl LinearModel {
    pub fn zeros(dim: usize, config: TrainConfig) -> Self {
        Self {
            dim,
            weights: vec![0.0; dim * 2],
            bias: [0.0; 2],
            config,
        }
    }

    pub fn from_parameters(
        dim: usize,
        weights: Vec<f64>,
        bias: [f64; 2],
        config: TrainConfig,
    ) -> Result<Self, HeadError> {
        if weights.len() != dim * 2 {
            return Err(HeadError::DimensionMismatch {
                expected: dim * 2,
                actual: weights.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(HeadError::Format("non-finite parameter".into()));
        }
        Ok(Self {
            dim,
            weights,
            bias,
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> [f64; 2] {
        self.bias
    }

    fn scores(&self, x: &[f32]) -> (f64, f64) {
        let mut s0 = self.bias[0];
        let mut s1 = self.bias[1];
        for (d, &v) in x.iter().enumerate() {
            let v = v as f64;
            s0 += v * self.weights[2 * d];
            s1 += v * self.weights[2 * d + 1];
        }
        (s0, s1)
    }

    fn check_rows(&self, features: &[f32]) -> Result<usize, HeadError> {
        if self.dim == 0 || !features.len().is_multiple_of(self.dim) {
            return Err(HeadError::DimensionMismatch {
                expected: self.dim,
                actual: features.len(),
            });
        }
        Ok(features.len() / self.dim)
    }

    /// Probability of one row: `[p(not relevant), p(relevant)]`.
    pub fn predict_row(&self, x: &[f32]) -> Result<[f64; 2], HeadError> {
        if x.len() != self.dim {
            return Err(HeadError::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let (s0, s1) = self.scores(x);
        Ok(softmax2(s0, s1))
    }

    pub fn predict_proba(&self, features: &[f32]) -> Result<Vec<[f64; 2]>, HeadError> {
        self.check_rows(features)?;
        Ok(features
            .chunks_exact(self.dim)
            .map(|x| {
                let (s0, s1) = self.scores(x);
                softmax2(s0, s1)
            })
            .collect())
    }

    fn batch_rows(&self, batch: &Batch<'_>) -> Result<usize, HeadError> {
        let m = self.check_rows(batch.features)?;
        if m != batch.labels.len() {
            return Err(HeadError::LengthMismatch {
                features: m,
                labels: batch.labels.len(),
            });
        }
        if let Some(w) = batch.example_weights {
            if w.len() != m {
                return Err(HeadError::LengthMismatch {
                    features: m,
                    labels: w.len(),
                });
            }
        }
        Ok(m)
    }

    /// Weighted mean cross-entropy plus the l2 penalty.
    pub fn loss(&self, batch: &Batch<'_>) -> Result<f64, HeadError> {
        let m = self.batch_rows(batch)?;
        let mut total = 0.0;
        for (i, x) in batch.features.chunks_exact(self.dim).enumerate() {
            let (s0, s1) = self.scores(x);
            let hi = s0.max(s1);
            let lse = hi + ((s0 - hi).exp() + (s1 - hi).exp()).ln();
            let target = if batch.labels[i] { s1 } else { s0 };
            let w = batch.example_weights.map_or(1.0, |w| w[i]);
            total += w * (lse - target);
        }
        let reg: f64 = self.weights.iter().map(|w| w * w).sum();
        Ok(total / m.max(1) as f64 + self.config.l2 * reg)
    }

    /// Analytic gradient of [`LinearModel::loss`].
    pub fn gradient(&self, batch: &Batch<'_>) -> Result<Gradient, HeadError> {
        let m = self.batch_rows(batch)?;
        let scale = 1.0 / m.max(1) as f64;
        let mut gw: Vec<f64> = self
            .weights
            .iter()
            .map(|w| 2.0 * self.config.l2 * w)
            .collect();
        let mut gb = [0.0; 2];
        for (i, x) in batch.features.chunks_exact(self.dim).enumerate() {
            let (s0, s1) = self.scores(x);
            let p = softmax2(s0, s1);
            let y1 = if batch.labels[i] { 1.0 } else { 0.0 };
            let w = batch.example_weights.map_or(1.0, |w| w[i]) * scale;
            let g = [w * (p[0] - (1.0 - y1)), w * (p[1] - y1)];
            gb[0] += g[0];
            gb[1] += g[1];
            for (d, &v) in x.iter().enumerate() {
                let v = v as f64;
                gw[2 * d] += v * g[0];
                gw[2 * d + 1] += v * g[1];
            }
        }
        Ok(Gradient {
            weights: gw,
            bias: gb,
        })
    }

    fn step(&mut self, g: &Gradient, lr: f64) {
        for (w, gw) in self.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        self.bias[0] -= lr * g.bias[0];
        self.bias[1] -= lr * g.bias[1];
    }
}

/// Per-example weights `M / (2 * count(class))` for the balanced scheme.
pub fn balanced_weights(labels: &[bool]) -> Vec<f64> {
    let m = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = m - pos;
    labels
        .iter()
        .map(|&l| m / (2.0 * if l { pos } else { neg }))
        .collect()
}

/// Trains from zero-initialized parameters. Rows are visited in index order
/// when `batch_size >= M`; otherwise each epoch shuffles with the seeded RNG.
pub fn train(
    features: &[f32],
    dim: usize,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<LinearModel, HeadError> {
    train_with_history(features, dim, labels, cfg).map(|(m, _)| m)
}

/// Like [`train`], also returning the full-data loss after every epoch.
pub fn train_with_history(
    features: &[f32],
    dim: usize,
    labels: &[bool],
    cfg: &TrainConfig,
) -> Result<(LinearModel, Vec<f64>), HeadError> {
    cfg.validate()?;
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(HeadError::LengthMismatch {
            features: features.len() / dim.max(1),
            labels: labels.len(),
        });
    }
    let m = labels.len();
    if m < 2 {
        return Err(HeadError::TooFewExamples);
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        return Err(HeadError::NonFinite(pos / dim));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == m {
        return Err(HeadError::SingleClass);
    }
    let weights = match cfg.class_weighting {
        ClassWeighting::None => vec![1.0; m],
        ClassWeighting::Balanced => balanced_weights(labels),
    };
    let full = Batch {
        features,
        labels,
        example_weights: Some(&weights),
    };

    let mut model = LinearModel::zeros(dim, *cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.batch_size >= m {
        for _ in 0..cfg.epochs {
            let g = model.gradient(&full)?;
            model.step(&g, cfg.learning_rate);
            history.push(model.loss(&full)?);
        }
        return Ok((model, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut xb = Vec::with_capacity(cfg.batch_size * dim);
    let mut yb = Vec::with_capacity(cfg.batch_size);
    let mut wb = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            xb.clear();
            yb.clear();
            wb.clear();
            for &i in chunk {
                xb.extend_from_slice(&features[i * dim..(i + 1) * dim]);
                yb.push(labels[i]);
                wb.push(weights[i]);
            }
            let batch = Batch {
                features: &xb,
                labels: &yb,
                example_weights: Some(&wb),
            };
            let g = model.gradient(&batch)?;
            model.step(&g, cfg.learning_rate);
        }
        history.push(model.loss(&full)?);
    }
    Ok((model, history))
}

pub fn write_model(model: &LinearModel, path: &Path) -> Result<(), HeadError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MODEL_MAGIC)?;
    out.write_all(&(model.dim as u32).to_le_bytes())?;
    for w in &model.weights {
        out.write_all(&(*w as f32).to_le_bytes())?;
    }
    for b in model.bias {
        out.write_all(&(b as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a model file. The training config is not stored and comes back as
/// the default.
pub fn read_model(path: &Path) -> Result<LinearModel, HeadError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || bytes[..4] != MODEL_MAGIC {
        return Err(HeadError::Format("bad magic".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let floats: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if bytes.len() - 8 != (dim * 2 + 2) * 4 {
        return Err(HeadError::Format(
            "payload length does not match dimension".into(),
        ));
    }
    let bias = [floats[dim * 2], floats[dim * 2 + 1]];
    LinearModel::from_parameters(
        dim,
        floats[..dim * 2].to_vec(),
        bias,
        TrainConfig::default(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub target_dim: usize,
    pub seed: u64,
    /// Return the input unchanged when `target_dim` equals the source dimension.
    pub identity_when_square: bool,
}

/// Seeded Gaussian random projection scaled by `1/sqrt(target_dim)`.
pub fn random_project(
    set: &EmbeddingSet,
    cfg: &ProjectionConfig,
) -> Result<EmbeddingSet, HeadError> {
    let src = set.dim();
    let dst = cfg.target_dim;
    if dst == 0 {
        return Err(HeadError::Config("target_dim must be positive".into()));
    }
    if dst > src {
        return Err(HeadError::TargetTooLarge {
            target: dst,
            source_dim: src,
        });
    }
    if dst == src && cfg.identity_when_square {
        return Ok(set.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (dst as f64).sqrt();
    // src x dst, row-major
    let matrix: Vec<f64> = (0..src * dst)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect::<Vec<f64>>();
    let mut out = Vec::with_capacity(set.len() * dst);
    for row in set.rows() {
        let mut acc = vec![0f64; dst];
        for (i, &x) in row.iter().enumerate() {
            let x = x as f64;
            for (a, m) in acc.iter_mut().zip(&matrix[i * dst..(i + 1) * dst]) {
                *a += x * m;
            }
        }
        out.extend(acc.into_iter().map(|a| a as f32));
    }
    Ok(set.with_vectors(dst, out)?)
}
