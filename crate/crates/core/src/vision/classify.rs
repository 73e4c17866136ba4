//! Ten-crop feature extraction, linear classification, and adding categories
//! to a trained linear classifier with shared-covariance LDA.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::{imageops, RgbImage};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::container::{self, ContainerError, ModelFrames};
use crate::job::ContentHash;
use crate::storage::{CacheKey, CacheStatus, Storage};
use crate::vision::{synthetic, Plane};

/// Crop side as a fraction of the short image side.
pub const DEFAULT_CROP_RATIO: f64 = 0.875;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error("image too small: crop side would be {side} px")]
    DegenerateImage { side: u32 },
    #[error("crop ratio must lie in (0, 1], got {0}")]
    BadCropRatio(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model was trained on backend `{model}`, features come from `{backend}`")]
    BackendMismatch { model: String, backend: String },
    #[error("label `{0}` already present")]
    DuplicateLabel(String),
    #[error("at least {needed} samples required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("covariance is singular even after regularization (eps = {eps:e})")]
    SingularAfterRegularization { eps: f64 },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("unknown feature backend `{0}`")]
    UnknownBackend(String),
    #[error("model file: {0}")]
    ModelFile(#[from] ContainerError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Position of a crop within the ten-crop set.
pub const CROP_NAMES: [&str; 10] = [
    "TL", "TR", "BL", "BR", "C", "mirror(TL)", "mirror(TR)", "mirror(BL)", "mirror(BR)", "mirror(C)",
];

#[derive(Debug, Clone)]
pub struct CropSet {
    pub side: u32,
    /// Top-left `(x, y)` of the five base crops in the source image.
    pub offsets: [(u32, u32); 5],
    pub patches: Vec<RgbImage>,
}

/// The four corner crops, the centre crop, and their horizontal mirrors.
pub fn ten_crop(img: &RgbImage, ratio: f64) -> Result<CropSet, ClassifyError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ClassifyError::BadCropRatio(ratio));
    }
    let (w, h) = img.dimensions();
    let side = (ratio * w.min(h) as f64).floor() as u32;
    if side < 2 {
        return Err(ClassifyError::DegenerateImage { side });
    }
    let (dx, dy) = (w - side, h - side);
    let offsets = [(0, 0), (dx, 0), (0, dy), (dx, dy), (dx / 2, dy / 2)];
    let mut patches: Vec<RgbImage> = offsets
        .iter()
        .map(|&(x, y)| imageops::crop_imm(img, x, y, side, side).to_image())
        .collect();
    let mirrored: Vec<RgbImage> = patches.iter().map(imageops::flip_horizontal).collect();
    patches.extend(mirrored);
    Ok(CropSet {
        side,
        offsets,
        patches,
    })
}

pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn extract(&self, patch: &RgbImage) -> Vec<f64>;
    /// Whether `extract(mirror(p))` equals `extract(p)` for every patch.
    fn mirror_equivariant(&self) -> bool;
}

/// Colour and gradient-orientation histograms.
///
/// The feature vector is four equal blocks of `D / 4` bins: red, green and
/// blue intensity histograms (each normalized to sum 1) followed by a
/// magnitude-weighted unsigned gradient-orientation histogram (normalized to
/// sum 1, or all zeros on a flat patch).
#[derive(Debug, Clone)]
pub struct HistogramBackend {
    bins: usize,
}

impl HistogramBackend {
    pub const NAME: &'static str = "hist";

    pub fn new(dimension: usize) -> Result<Self, ClassifyError> {
        if dimension < 4 || dimension % 4 != 0 {
            return Err(ClassifyError::DimensionMismatch {
                expected: dimension.next_multiple_of(4).max(4),
                got: dimension,
            });
        }
        Ok(HistogramBackend { bins: dimension / 4 })
    }
}

impl FeatureBackend for HistogramBackend {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        self.bins * 4
    }

    fn extract(&self, patch: &RgbImage) -> Vec<f64> {
        let b = self.bins;
        let mut out = vec![0.0; 4 * b];
        let n = (patch.width() * patch.height()) as f64;
        for p in patch.pixels() {
            for c in 0..3 {
                let bin = (p[c] as usize * b) / 256;
                out[c * b + bin] += 1.0 / n;
            }
        }
        let plane = Plane::from_rgb(patch);
        let (w, h) = (plane.width, plane.height);
        let mut grad = vec![0.0; b];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let gx = plane.at(x + 1, y) - plane.at(x - 1, y);
                let gy = plane.at(x, y + 1) - plane.at(x, y - 1);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let bin = ((theta / std::f64::consts::PI * b as f64) as usize).min(b - 1);
                grad[bin] += mag;
            }
        }
        let total: f64 = grad.iter().sum();
        if total > 0.0 {
            for (o, g) in out[3 * b..].iter_mut().zip(grad) {
                *o = g / total;
            }
        }
        out
    }

    fn mirror_equivariant(&self) -> bool {
        // Mirroring permutes orientation bins.
        false
    }
}

/// Looks up a backend by the name used in job params. `decaf` has no desk
/// implementation and resolves to the histogram backend.
pub fn backend_by_name(name: &str, dimension: usize) -> Result<Box<dyn FeatureBackend>, ClassifyError> {
    match name {
        HistogramBackend::NAME | "decaf" => Ok(Box::new(HistogramBackend::new(dimension)?)),
        other => Err(ClassifyError::UnknownBackend(other.to_string())),
    }
}

/// One row per crop, in [`CROP_NAMES`] order.
pub fn extract_features(
    img: &RgbImage,
    backend: &dyn FeatureBackend,
    ratio: f64,
) -> Result<DMatrix<f64>, ClassifyError> {
    let crops = ten_crop(img, ratio)?;
    let d = backend.dimension();
    let mut m = DMatrix::zeros(10, d);
    for (i, patch) in crops.patches.iter().enumerate() {
        let row = backend.extract(patch);
        if row.len() != d {
            return Err(ClassifyError::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFinite("backend features"));
        }
        m.row_mut(i).copy_from_slice(&row);
    }
    Ok(m)
}

/// Feature extraction through the storage feature cache.
pub fn extract_features_cached(
    storage: &Storage,
    content_hash: ContentHash,
    img: &RgbImage,
    backend: &dyn FeatureBackend,
    ratio: f64,
) -> Result<(DMatrix<f64>, CacheStatus), ClassifyError> {
    let mut params = BTreeMap::new();
    params.insert("dim".to_string(), backend.dimension().to_string());
    params.insert("rho".to_string(), format!("{:?}", ratio));
    let key = CacheKey::new(content_hash, backend.name(), &params);
    storage.cache_get_or_compute(&key, || extract_features(img, backend, ratio))
}

/// Linear classifier `s = W x + b` over backend features.
///
/// Weight rows are individually reference counted so appending a category
/// never copies the existing rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    labels: Vec<String>,
    rows: Vec<Arc<[f64]>>,
    biases: Vec<f64>,
    backend: String,
    dimension: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prediction {
    pub label: String,
    pub confidence: f64,
}

impl ClassifierModel {
    pub fn empty(backend: impl Into<String>, dimension: usize) -> Self {
        ClassifierModel {
            labels: Vec::new(),
            rows: Vec::new(),
            biases: Vec::new(),
            backend: backend.into(),
            dimension,
        }
    }

    pub fn from_parts(
        backend: impl Into<String>,
        labels: Vec<String>,
        weights: &DMatrix<f64>,
        biases: Vec<f64>,
    ) -> Result<Self, ClassifyError> {
        let k = labels.len();
        if weights.nrows() != k || biases.len() != k {
            return Err(ClassifyError::DimensionMismatch {
                expected: k,
                got: weights.nrows().max(biases.len()),
            });
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFinite("model parameters"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(ClassifyError::DuplicateLabel(l.clone()));
            }
        }
        let rows = (0..k)
            .map(|r| weights.row(r).iter().copied().collect::<Vec<_>>().into())
            .collect();
        Ok(ClassifierModel {
            labels,
            rows,
            biases,
            backend: backend.into(),
            dimension: weights.ncols(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn backend(&self) -> &str {
        &self.backend
    }

    pub fn weight_row(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weights(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dimension, |r, c| self.rows[r][c])
    }

    /// Raw linear scores for one feature vector.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        if x.len() != self.dimension {
            return Err(ClassifyError::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
            });
        }
        Ok(self
            .rows
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::encode_model(&ModelFrames {
            backend: self.backend.clone(),
            labels: self.labels.clone(),
            weights: self.weights(),
            biases: self.biases.clone(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifyError> {
        let f = container::decode_model(bytes)?;
        ClassifierModel::from_parts(f.backend, f.labels, &f.weights, f.biases)
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean of the rows of a feature matrix.
pub fn fuse_rows(features: &DMatrix<f64>) -> Vec<f64> {
    let n = features.nrows() as f64;
    (0..features.ncols())
        .map(|c| features.column(c).iter().sum::<f64>() / n)
        .collect()
}

/// The `k` most confident labels for a ten-crop feature matrix, sorted by
/// confidence descending with ties broken by label.
pub fn top_k_from_features(
    features: &DMatrix<f64>,
    model: &ClassifierModel,
    k: usize,
) -> Result<Vec<Prediction>, ClassifyError> {
    let x = fuse_rows(features);
    let conf = softmax(&model.scores(&x)?);
    let mut preds: Vec<Prediction> = model
        .labels
        .iter()
        .zip(conf)
        .map(|(label, confidence)| Prediction {
            label: label.clone(),
            confidence,
        })
        .collect();
    preds.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.label.cmp(&b.label))
    });
    preds.truncate(k);
    Ok(preds)
}

pub fn classify_top_k(
    img: &RgbImage,
    model: &ClassifierModel,
    backend: &dyn FeatureBackend,
    ratio: f64,
    k: usize,
) -> Result<Vec<Prediction>, ClassifyError> {
    if model.backend() != backend.name() {
        return Err(ClassifyError::BackendMismatch {
            model: model.backend().to_string(),
            backend: backend.name().to_string(),
        });
    }
    if model.dimension() != backend.dimension() {
        return Err(ClassifyError::DimensionMismatch {
            expected: model.dimension(),
            got: backend.dimension(),
        });
    }
    top_k_from_features(&extract_features(img, backend, ratio)?, model, k)
}

/// Shared covariance of a reference corpus together with its regularized inverse.
#[derive(Debug, Clone)]
pub struct CovarianceCache {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    regularization: f64,
    corpus_size: usize,
}

const IDENTITY_TOLERANCE: f64 = 1e-8;

impl CovarianceCache {
    /// Wraps a precomputed covariance and inverse without re-verifying it.
    pub fn from_parts(
        covariance: DMatrix<f64>,
        precision: DMatrix<f64>,
        regularization: f64,
        corpus_size: usize,
    ) -> Result<Self, ClassifyError> {
        let d = covariance.nrows();
        for m in [&covariance, &precision] {
            if m.nrows() != d || m.ncols() != d {
                return Err(ClassifyError::DimensionMismatch {
                    expected: d,
                    got: m.ncols(),
                });
            }
        }
        Ok(CovarianceCache {
            covariance,
            precision,
            regularization,
            corpus_size,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `(Σ + ε I)⁻¹`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn dimension(&self) -> usize {
        self.covariance.nrows()
    }

    /// Spectral norm of `(Σ + εI)·P − I`, bounded above by the Frobenius norm.
    pub fn identity_residual(&self) -> f64 {
        identity_residual(&self.regularized(), &self.precision)
    }

    fn regularized(&self) -> DMatrix<f64> {
        let d = self.dimension();
        &self.covariance + DMatrix::identity(d, d) * self.regularization
    }

    /// Three frames: covariance, precision, and `[ε, n]` as a 1x2 matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = container::encode_matrix(&self.covariance);
        out.extend(container::encode_matrix(&self.precision));
        out.extend(container::encode_matrix(&DMatrix::from_row_slice(
            1,
            2,
            &[self.regularization, self.corpus_size as f64],
        )));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClassifyError> {
        let frame_len = |at: usize| -> Result<usize, ContainerError> {
            let header = bytes.get(at..at + 13).ok_or(ContainerError::Truncated {
                needed: at + 13,
                have: bytes.len(),
            })?;
            let rows = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
            Ok(13 + rows * cols * 8)
        };
        let a = frame_len(0)?;
        let b = frame_len(a)?;
        let c = frame_len(a + b)?;
        let end = (a + b + c).min(bytes.len());
        let cov = container::decode_matrix(&bytes[..a])?;
        let prec = container::decode_matrix(bytes.get(a..a + b).unwrap_or(&[]))?;
        let meta = container::decode_matrix(&bytes[a + b..end])?;
        if end != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - end).into());
        }
        if meta.shape() != (1, 2) {
            return Err(ContainerError::Inconsistent("covariance metadata frame".into()).into());
        }
        CovarianceCache::from_parts(cov, prec, meta[(0, 0)], meta[(0, 1)] as usize)
    }
}

fn identity_residual(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    let r = a * p - DMatrix::<f64>::identity(d, d);
    let frob = r.norm();
    if frob <= IDENTITY_TOLERANCE || d > 512 {
        return frob;
    }
    r.singular_values().max()
}

/// Sample covariance `Σ = 1/(n-1) Σ (x_i - x̄)(x_i - x̄)ᵀ` of the rows of
/// `corpus`, and the inverse of `Σ + εI`.
///
/// `regularization = None` uses `ε = 1e-6 · trace(Σ) / D`.
pub fn compute_shared_covariance(
    corpus: &DMatrix<f64>,
    regularization: Option<f64>,
) -> Result<CovarianceCache, ClassifyError> {
    let (n, d) = corpus.shape();
    if n < 2 {
        return Err(ClassifyError::TooFewSamples { needed: 2, got: n });
    }
    if corpus.iter().any(|v| !v.is_finite()) {
        return Err(ClassifyError::NonFinite("corpus"));
    }
    let mean = corpus.row_mean();
    let mut centered = corpus.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut covariance = centered.transpose() * &centered / (n as f64 - 1.0);
    // Symmetrize away rounding asymmetry.
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let eps = regularization.unwrap_or_else(|| 1e-6 * covariance.trace() / d as f64);
    let regularized = &covariance + DMatrix::identity(d, d) * eps;
    let chol = regularized
        .clone()
        .cholesky()
        .ok_or(ClassifyError::SingularAfterRegularization { eps })?;
    let mut precision = chol.inverse();
    let mut residual = identity_residual(&regularized, &precision);
    if residual > IDENTITY_TOLERANCE {
        // One Newton-Schulz step: P <- P (2I - A P).
        let two_i = DMatrix::<f64>::identity(d, d) * 2.0;
        precision = &precision * (two_i - &regularized * &precision);
        residual = identity_residual(&regularized, &precision);
    }
    if !(residual <= IDENTITY_TOLERANCE) {
        return Err(ClassifyError::SingularAfterRegularization { eps });
    }
    let precision = (&precision + precision.transpose()) * 0.5;
    Ok(CovarianceCache {
        covariance,
        precision,
        regularization: eps,
        corpus_size: n,
    })
}

/// Class priors `π_k`; positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrior(Vec<f64>);

impl CategoryPrior {
    pub fn uniform(k: usize) -> Self {
        CategoryPrior(vec![1.0 / k as f64; k])
    }

    pub fn new(priors: Vec<f64>) -> Result<Self, ClassifyError> {
        if priors.is_empty() {
            return Err(ClassifyError::InvalidPrior("no categories".into()));
        }
        if let Some(p) = priors.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(ClassifyError::InvalidPrior(format!("{p} is not a positive probability")));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ClassifyError::InvalidPrior(format!("priors sum to {total}")));
        }
        Ok(CategoryPrior(priors))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Appends category `new_label` to `model` from its training features using
/// shared-covariance LDA:
///
/// ```text
/// w_k = Σ⁻¹ μ_k
/// b_k = log π_k − ½ μ_kᵀ Σ⁻¹ μ_k
/// ```
///
/// `μ_k` is the mean of the rows of `training`; `π_k` is the last entry of
/// `priors`, which must cover `K + 1` categories. Existing rows and biases are
/// shared with the input model, not recomputed. Cost is `O(n·D + D²)`.
pub fn lda_extend_model(
    model: &ClassifierModel,
    new_label: &str,
    training: &DMatrix<f64>,
    cache: &CovarianceCache,
    priors: &CategoryPrior,
) -> Result<ClassifierModel, ClassifyError> {
    if model.labels.iter().any(|l| l == new_label) {
        return Err(ClassifyError::DuplicateLabel(new_label.to_string()));
    }
    let d = model.dimension;
    if training.ncols() != d {
        return Err(ClassifyError::DimensionMismatch {
            expected: d,
            got: training.ncols(),
        });
    }
    if cache.dimension() != d {
        return Err(ClassifyError::DimensionMismatch {
            expected: d,
            got: cache.dimension(),
        });
    }
    if training.nrows() == 0 {
        return Err(ClassifyError::TooFewSamples { needed: 1, got: 0 });
    }
    if priors.len() != model.len() + 1 {
        return Err(ClassifyError::InvalidPrior(format!(
            "need priors for {} categories, got {}",
            model.len() + 1,
            priors.len()
        )));
    }
    let n = training.nrows() as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for row in training.row_iter() {
        mean += row.transpose();
    }
    mean /= n;
    let w = cache.precision() * &mean;
    let bias = priors.as_slice()[model.len()].ln() - 0.5 * mean.dot(&w);
    if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(ClassifyError::NonFinite("new category parameters"));
    }
    let mut out = model.clone();
    out.labels.push(new_label.to_string());
    out.rows.push(w.as_slice().into());
    out.biases.push(bias);
    Ok(out)
}

/// Colour categories of the built-in desk model.
pub const DESK_LABELS: [(&str, [u8; 3]); 6] = [
    ("red", [200, 30, 30]),
    ("green", [30, 170, 40]),
    ("blue", [30, 50, 200]),
    ("yellow", [220, 210, 40]),
    ("white", [235, 235, 235]),
    ("black", [20, 20, 20]),
];

/// A small colour classifier built entirely by LDA extension from seeded
/// synthetic images, used when a job does not name a stored model.
pub fn desk_model(backend: &dyn FeatureBackend) -> Result<ClassifierModel, ClassifyError> {
    let per_class = 6;
    let mut class_features = Vec::new();
    let mut corpus_rows = Vec::new();
    for (ci, (_, color)) in DESK_LABELS.iter().enumerate() {
        let mut rows = Vec::new();
        for s in 0..per_class {
            let img = synthetic::noisy_color(40, 40, *color, 40, (ci * 100 + s) as u64);
            let x = fuse_rows(&extract_features(&img, backend, DEFAULT_CROP_RATIO)?);
            rows.push(x.clone());
            corpus_rows.push(x);
        }
        class_features.push(rows);
    }
    let d = backend.dimension();
    // Within-class scatter: centre each class on its own mean.
    let mut centered = Vec::new();
    for rows in &class_features {
        let m = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
        let mean = m.row_mean();
        for r in 0..rows.len() {
            centered.push((m.row(r) - &mean).iter().copied().collect::<Vec<_>>());
        }
    }
    let corpus = DMatrix::from_fn(centered.len(), d, |r, c| centered[r][c]);
    let trace = {
        let cov = compute_shared_covariance(&corpus, Some(1.0))?;
        cov.covariance().trace()
    };
    let cache = compute_shared_covariance(&corpus, Some(1e-2 * trace / d as f64))?;
    let priors = CategoryPrior::uniform(DESK_LABELS.len());
    let mut model = ClassifierModel::empty(backend.name(), d);
    for ((label, _), rows) in DESK_LABELS.iter().zip(&class_features) {
        let training = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
        let partial = CategoryPrior(priors.as_slice()[..model.len() + 1].to_vec());
        model = lda_extend_model(&model, label, &training, &cache, &partial)?;
    }
    Ok(model)
}
