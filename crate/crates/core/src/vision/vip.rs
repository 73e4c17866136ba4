//! Importance ranking of people in group photos from pairwise face geometry.

use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VipError {
    #[error("cannot parse face list: {0}")]
    BadFaceList(String),
    #[error("image has zero size")]
    EmptyImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub index: usize,
}

impl FaceBox {
    fn area(&self) -> f64 {
        self.w * self.h
    }

    fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    fn scaled(&self, s: f64) -> FaceBox {
        FaceBox {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
            index: self.index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDims {
    pub width: f64,
    pub height: f64,
}

impl ImageDims {
    pub fn new(width: f64, height: f64) -> Self {
        ImageDims { width, height }
    }

    fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn scaled(&self, s: f64) -> Self {
        ImageDims::new(self.width * s, self.height * s)
    }
}

/// Where face boxes come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectMode {
    Provided(Vec<(f64, f64, f64, f64)>),
    Builtin,
}

impl DetectMode {
    /// Parses the `faces` job parameter: `builtin` or `x,y,w,h;x,y,w,h;...`.
    pub fn from_param(raw: &str) -> Result<Self, VipError> {
        let raw = raw.trim();
        if raw.is_empty() || raw == "builtin" {
            return Ok(DetectMode::Builtin);
        }
        let boxes = raw
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let v: Vec<f64> = item
                    .split(',')
                    .map(|n| n.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| VipError::BadFaceList(format!("`{item}`: {e}")))?;
                match v.as_slice() {
                    [x, y, w, h] if v.iter().all(|n| n.is_finite()) => Ok((*x, *y, *w, *h)),
                    _ => Err(VipError::BadFaceList(format!("`{item}` is not x,y,w,h"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DetectMode::Provided(boxes))
    }
}

/// Clamps a box to the image; `None` if nothing is left.
fn clamp_box(x: f64, y: f64, w: f64, h: f64, dims: ImageDims) -> Option<(f64, f64, f64, f64)> {
    let x0 = x.max(0.0).min(dims.width);
    let y0 = y.max(0.0).min(dims.height);
    let x1 = (x + w).max(0.0).min(dims.width);
    let y1 = (y + h).max(0.0).min(dims.height);
    (x1 > x0 && y1 > y0).then(|| (x0, y0, x1 - x0, y1 - y0))
}

pub fn detect_faces(img: &RgbImage, mode: &DetectMode) -> Result<Vec<FaceBox>, VipError> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(VipError::EmptyImage);
    }
    let dims = ImageDims::new(w as f64, h as f64);
    let raw = match mode {
        DetectMode::Provided(boxes) => boxes.clone(),
        DetectMode::Builtin => skin_regions(img),
    };
    Ok(raw
        .into_iter()
        .filter_map(|(x, y, bw, bh)| clamp_box(x, y, bw, bh, dims))
        .enumerate()
        .map(|(index, (x, y, w, h))| FaceBox { x, y, w, h, index })
        .collect())
}

fn is_skin(p: &image::Rgb<u8>) -> bool {
    let [r, g, b] = p.0.map(i32::from);
    r > 95 && g > 40 && b > 20 && r > g && r > b && r - g.min(b) > 15 && (r - g).abs() > 15
}

/// Sliding-window skin detector: 4x4 cells that are mostly skin-toned and
/// textured less than a threshold, merged into 4-connected regions.
fn skin_regions(img: &RgbImage) -> Vec<(f64, f64, f64, f64)> {
    const CELL: u32 = 4;
    let (w, h) = img.dimensions();
    let (cw, ch) = ((w / CELL) as usize, (h / CELL) as usize);
    let mut mask = vec![false; cw * ch];
    for cy in 0..ch {
        for cx in 0..cw {
            let mut skin = 0;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in 0..CELL {
                for x in 0..CELL {
                    let p = img.get_pixel(cx as u32 * CELL + x, cy as u32 * CELL + y);
                    if is_skin(p) {
                        skin += 1;
                    }
                    let v = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (CELL * CELL) as f64;
            let var = sq / n - (sum / n).powi(2);
            mask[cy * cw + cx] = skin * 4 >= (CELL * CELL) * 3 && var < 900.0;
        }
    }
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut cells = 0;
        while let Some(i) = stack.pop() {
            cells += 1;
            let (x, y) = (i % cw, i / cw);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < cw {
                push(i + 1);
            }
            if y > 0 {
                push(i - cw);
            }
            if y + 1 < ch {
                push(i + cw);
            }
        }
        if cells >= 4 {
            let c = CELL as f64;
            regions.push((
                x0 as f64 * c,
                y0 as f64 * c,
                (x1 - x0 + 1) as f64 * c,
                (y1 - y0 + 1) as f64 * c,
            ));
        }
    }
    regions
}

pub const PAIR_FEATURES: usize = 6;

/// Relative configuration of a face pair:
/// `[log(area_a/area_b), dist/diag, Δx/W, Δy/H, IoU, (centrality_a − centrality_b)/diag]`.
/// Components 0, 2, 3 and 5 are antisymmetric in `(a, b)`; 1 and 4 are symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFeatures(pub [f64; PAIR_FEATURES]);

fn iou(a: &FaceBox, b: &FaceBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn pairwise_features(a: &FaceBox, b: &FaceBox, dims: ImageDims) -> PairFeatures {
    let diag = dims.diagonal();
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (mx, my) = (dims.width / 2.0, dims.height / 2.0);
    let centrality_a = (ax - mx).hypot(ay - my);
    let centrality_b = (bx - mx).hypot(by - my);
    PairFeatures([
        (a.area() / b.area()).ln(),
        (ax - bx).hypot(ay - by) / diag,
        (ax - bx) / dims.width,
        (ay - by) / dims.height,
        iou(a, b),
        (centrality_a - centrality_b) / diag,
    ])
}

/// Linear relative-importance regressor; positive output means `a` matters more.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRegressor {
    pub weights: [f64; PAIR_FEATURES],
    pub bias: f64,
}

impl PairRegressor {
    /// Weights fitted by [`train_pair_regressor`] on [`synthetic_corpus`] with
    /// the default seed.
    pub fn shipped() -> Self {
        PairRegressor {
            weights: SHIPPED_WEIGHTS,
            bias: SHIPPED_BIAS,
        }
    }

    pub fn predict(&self, f: &PairFeatures) -> f64 {
        self.weights.iter().zip(f.0).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }
}

pub const DEFAULT_CORPUS_SEED: u64 = 0x5eed_0f_u64;

const SHIPPED_WEIGHTS: [f64; PAIR_FEATURES] = [
    0.9999574805905005,
    0.0,
    -0.0009570744918843887,
    0.0031600524323659586,
    0.0,
    -3.016309069391989,
];
const SHIPPED_BIAS: f64 = 0.0;

/// One pairwise training example: features and target importance difference.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub features: PairFeatures,
    pub target: f64,
}

/// Synthetic group photos where ground-truth importance grows with face size
/// and shrinks with distance from the image centre. Every ordered pair of
/// faces becomes a sample whose target is the importance difference.
pub fn synthetic_corpus(photos: usize, seed: u64) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..photos {
        let dims = ImageDims::new(rng.gen_range(320.0..1280.0), rng.gen_range(240.0..960.0));
        let n = rng.gen_range(2..7);
        let faces: Vec<FaceBox> = (0..n)
            .map(|index| {
                let side = rng.gen_range(0.04..0.25) * dims.width.min(dims.height);
                FaceBox {
                    x: rng.gen_range(0.0..dims.width - side),
                    y: rng.gen_range(0.0..dims.height - side),
                    w: side * rng.gen_range(0.8..1.2),
                    h: side,
                    index,
                }
            })
            .collect();
        let importance: Vec<f64> = faces
            .iter()
            .map(|f| {
                let (cx, cy) = f.center();
                let centrality = (cx - dims.width / 2.0).hypot(cy - dims.height / 2.0) / dims.diagonal();
                f.area().ln() - 3.0 * centrality + rng.gen_range(-0.1..0.1)
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(PairSample {
                        features: pairwise_features(&faces[i], &faces[j], dims),
                        target: importance[i] - importance[j],
                    });
                }
            }
        }
    }
    out
}

/// Ordinary least squares over the six features plus an intercept.
pub fn train_pair_regressor(samples: &[PairSample]) -> PairRegressor {
    let n = samples.len();
    let x = DMatrix::from_fn(n, PAIR_FEATURES + 1, |r, c| {
        if c == PAIR_FEATURES {
            1.0
        } else {
            samples[r].features.0[c]
        }
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.target));
    let xt = x.transpose();
    let beta = (&xt * &x)
        .cholesky()
        .expect("synthetic design matrix has full column rank")
        .solve(&(&xt * y));
    let mut weights = [0.0; PAIR_FEATURES];
    weights.copy_from_slice(&beta.as_slice()[..PAIR_FEATURES]);
    PairRegressor {
        weights,
        bias: beta[PAIR_FEATURES],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFace {
    pub face_index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

/// Faces sorted by aggregate score descending, ties by face index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRanking(pub Vec<RankedFace>);

impl ImportanceRanking {
    pub fn score_of(&self, face_index: usize) -> Option<f64> {
        self.0.iter().find(|r| r.face_index == face_index).map(|r| r.score)
    }
}

/// Scores each face by the mean of its outgoing pairwise scores `r(i, j)`.
///
/// Pair scores are summed in sorted order so the aggregate does not depend
/// on the order the boxes were supplied in.
pub fn score_and_rank(boxes: &[FaceBox], regressor: &PairRegressor, dims: ImageDims) -> ImportanceRanking {
    let n = boxes.len();
    let mut ranked: Vec<RankedFace> = boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let score = if n < 2 {
                0.0
            } else {
                let mut pair_scores: Vec<f64> = boxes
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| regressor.predict(&pairwise_features(a, b, dims)))
                    .collect();
                pair_scores.sort_by(f64::total_cmp);
                pair_scores.iter().sum::<f64>() / (n - 1) as f64
            };
            RankedFace {
                face_index: a.index,
                bbox: [a.x, a.y, a.w, a.h],
                score,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.face_index.cmp(&b.face_index)));
    ImportanceRanking(ranked)
}

/// Uniformly rescaled copy of a box set, for invariance checks.
pub fn rescale_boxes(boxes: &[FaceBox], s: f64) -> Vec<FaceBox> {
    boxes.iter().map(|b| b.scaled(s)).collect()
}
