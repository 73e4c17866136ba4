//! Panorama stitching as data-graph computation.
//!
//! Keypoint detection is vertex-parallel, pairwise matching and seam
//! statistics are edge-parallel, and global camera refinement is a vertex
//! program: each image repeatedly re-solves its own placement against its
//! neighbours' current placements and the pairwise transforms, with one
//! anchor image held fixed.

use std::collections::{BTreeMap, VecDeque};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Matrix3x2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DataGraph, EdgeKey, ExecutionReport, Executor, GraphError, Neighbor, VertexId, VertexProgram};
use crate::vision::Plane;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StitchError {
    #[error("image {width}x{height} is too small for keypoint detection")]
    DegenerateImage { width: u32, height: u32 },
    #[error("image graph is disconnected ({components} components)")]
    DisconnectedGraph { components: usize },
    #[error("anchor vertex {0} not in graph")]
    UnknownAnchor(VertexId),
    #[error("canvas of {pixels} pixels exceeds the limit of {limit}")]
    CanvasOverflow { pixels: u64, limit: u64 },
    #[error("unknown warp `{0}`")]
    UnknownWarp(String),
    #[error("no image for vertex {0}")]
    MissingImage(VertexId),
    #[error("non-finite camera parameters")]
    NonFinite,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModel {
    Translation,
    Affine,
}

impl MotionModel {
    /// `warp` job parameter: `plane`/`affine` select affine, absent or
    /// `translation` selects translation.
    pub fn from_warp(warp: Option<&str>) -> Result<Self, StitchError> {
        match warp.map(str::trim) {
            None | Some("") | Some("translation") => Ok(MotionModel::Translation),
            Some("plane") | Some("affine") => Ok(MotionModel::Affine),
            Some(other) => Err(StitchError::UnknownWarp(other.to_string())),
        }
    }
}

/// 2D affine map `p -> L p + t`, stored as the top two rows of a 3x3 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine2 {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn offset(&self) -> (f64, f64) {
        (self.m[0][2], self.m[1][2])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    fn to_h(self) -> Matrix3<f64> {
        let m = self.m;
        Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], 0.0, 0.0, 1.0)
    }

    fn from_h(h: &Matrix3<f64>) -> Self {
        Affine2 {
            m: [[h[(0, 0)], h[(0, 1)], h[(0, 2)]], [h[(1, 0)], h[(1, 1)], h[(1, 2)]]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        Affine2::from_h(&(self.to_h() * other.to_h()))
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        if self.determinant().abs() < 1e-12 {
            return None;
        }
        self.to_h().try_inverse().map(|h| Affine2::from_h(&h))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Frobenius distance between parameter sets.
    pub fn distance(&self, other: &Affine2) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchVertex {
    pub image_key: String,
    pub width: u32,
    pub height: u32,
    pub keypoints: Vec<Keypoint>,
    /// Placement of the image in panorama coordinates.
    pub camera: Affine2,
}

impl StitchVertex {
    pub fn new(image_key: impl Into<String>, width: u32, height: u32) -> Self {
        StitchVertex {
            image_key: image_key.into(),
            width,
            height,
            keypoints: Vec::new(),
            camera: Affine2::IDENTITY,
        }
    }
}

/// Matches between the endpoints of an edge. `transform` maps coordinates of
/// the edge's low vertex into the high vertex's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchEdge {
    pub matches: Vec<(usize, usize)>,
    pub transform: Affine2,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub model: MotionModel,
    pub max_keypoints: usize,
    pub harris_k: f64,
    pub ratio_test: f64,
    pub ransac_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rounds: usize,
    pub max_canvas_pixels: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            model: MotionModel::Translation,
            max_keypoints: 500,
            harris_k: 0.04,
            ratio_test: 0.8,
            ransac_iterations: 500,
            inlier_threshold: 2.0,
            min_inliers: 8,
            seed: 0x5717c4,
            tolerance: 1e-10,
            max_rounds: 200_000,
            max_canvas_pixels: 100_000_000,
        }
    }
}

const DESCRIPTOR_GRID: usize = 8;
const DESCRIPTOR_STEP: f64 = 2.0;
const BORDER: usize = 8;

/// Harris corners with 5x5 non-maximum suppression, sub-pixel refinement,
/// and normalized 8x8 patch descriptors sampled at a 2 px stride.
pub fn detect_keypoints(img: &RgbImage, config: &StitchConfig) -> Result<Vec<Keypoint>, StitchError> {
    let (w, h) = img.dimensions();
    if (w as usize) < 2 * BORDER + 2 || (h as usize) < 2 * BORDER + 2 {
        return Err(StitchError::DegenerateImage { width: w, height: h });
    }
    let plane = Plane::from_rgb(img);
    let (w, h) = (plane.width, plane.height);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = (plane.clamped(xi + 1, yi) - plane.clamped(xi - 1, yi)) / 2.0;
            let gy = (plane.clamped(xi, yi + 1) - plane.clamped(xi, yi - 1)) / 2.0;
            ixx[y * w + x] = gx * gx;
            iyy[y * w + x] = gy * gy;
            ixy[y * w + x] = gx * gy;
        }
    }
    let smooth = |data: Vec<f64>| {
        Plane {
            width: w,
            height: h,
            data,
        }
        .gaussian_blur(1.5)
        .data
    };
    let (sxx, syy, sxy) = (smooth(ixx), smooth(iyy), smooth(ixy));
    let response: Vec<f64> = (0..w * h)
        .map(|i| {
            let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
            let tr = sxx[i] + syy[i];
            det - config.harris_k * tr * tr
        })
        .collect();
    let max_r = response.iter().copied().fold(0.0, f64::max);
    if max_r <= 1e-6 {
        return Ok(Vec::new());
    }
    let threshold = 0.01 * max_r;
    let r_at = |x: usize, y: usize| response[y * w + x];
    let mut candidates = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let r = r_at(x, y);
            if r <= threshold {
                continue;
            }
            // Strictly greater than earlier neighbours, at least equal to later
            // ones, so exactly one pixel of a tied plateau survives.
            let mut is_max = true;
            'nms: for dy in -2isize..=2 {
                for dx in -2isize..=2 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let q = r_at((x as isize + dx) as usize, (y as isize + dy) as usize);
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if (earlier && q >= r) || (!earlier && q > r) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                let refine = |a: f64, b: f64, c: f64| {
                    let denom = a - 2.0 * b + c;
                    if denom.abs() < 1e-12 {
                        0.0
                    } else {
                        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
                    }
                };
                let ox = refine(r_at(x - 1, y), r, r_at(x + 1, y));
                let oy = refine(r_at(x, y - 1), r, r_at(x, y + 1));
                candidates.push((x as f64 + ox, y as f64 + oy, r));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.1.total_cmp(&b.1))
            .then(a.0.total_cmp(&b.0))
    });
    let blurred = plane.gaussian_blur(1.0);
    let half = (DESCRIPTOR_GRID as f64 - 1.0) * DESCRIPTOR_STEP / 2.0;
    let mut out = Vec::new();
    for (x, y, r) in candidates {
        if out.len() >= config.max_keypoints {
            break;
        }
        let mut desc = Vec::with_capacity(DESCRIPTOR_GRID * DESCRIPTOR_GRID);
        for v in 0..DESCRIPTOR_GRID {
            for u in 0..DESCRIPTOR_GRID {
                desc.push(blurred.bilinear(
                    x - half + u as f64 * DESCRIPTOR_STEP,
                    y - half + v as f64 * DESCRIPTOR_STEP,
                ));
            }
        }
        let mean = desc.iter().sum::<f64>() / desc.len() as f64;
        desc.iter_mut().for_each(|d| *d -= mean);
        let norm = desc.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        desc.iter_mut().for_each(|d| *d /= norm);
        out.push(Keypoint {
            x,
            y,
            response: r,
            descriptor: desc,
        });
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest-neighbour matches from `a` into `b` passing the distance ratio test.
pub fn ratio_matches(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    if b.len() < 2 {
        return Vec::new();
    }
    a.iter()
        .enumerate()
        .filter_map(|(i, ka)| {
            let mut best = (f64::INFINITY, usize::MAX);
            let mut second = f64::INFINITY;
            for (j, kb) in b.iter().enumerate() {
                let d = sq_dist(&ka.descriptor, &kb.descriptor);
                if d < best.0 {
                    second = best.0;
                    best = (d, j);
                } else if d < second {
                    second = d;
                }
            }
            (best.0.sqrt() < ratio * second.sqrt()).then_some((i, best.1))
        })
        .collect()
}

type Correspondence = ((f64, f64), (f64, f64));

fn fit_transform(model: MotionModel, pairs: &[Correspondence]) -> Option<Affine2> {
    match model {
        MotionModel::Translation => {
            if pairs.is_empty() {
                return None;
            }
            let n = pairs.len() as f64;
            let (sx, sy) = pairs
                .iter()
                .fold((0.0, 0.0), |(sx, sy), ((ax, ay), (bx, by))| (sx + bx - ax, sy + by - ay));
            Some(Affine2::translation(sx / n, sy / n))
        }
        MotionModel::Affine => {
            if pairs.len() < 3 {
                return None;
            }
            // Normal equations for each output row: [x y 1] · row = target.
            let mut ata = Matrix3::<f64>::zeros();
            let mut atb = Matrix3x2::<f64>::zeros();
            for ((ax, ay), (bx, by)) in pairs {
                let v = nalgebra::Vector3::new(*ax, *ay, 1.0);
                ata += v * v.transpose();
                atb += v * nalgebra::RowVector2::new(*bx, *by);
            }
            let sol = ata.cholesky()?.solve(&atb);
            let t = Affine2 {
                m: [[sol[(0, 0)], sol[(1, 0)], sol[(2, 0)]], [sol[(0, 1)], sol[(1, 1)], sol[(2, 1)]]],
            };
            (t.is_finite() && t.determinant().abs() > 1e-6).then_some(t)
        }
    }
}

fn reprojection_error(t: &Affine2, ((ax, ay), (bx, by)): &Correspondence) -> f64 {
    let (px, py) = t.apply(*ax, *ay);
    (px - bx).hypot(py - by)
}

/// Matches `a` against `b` and robustly fits the transform taking
/// `a`-coordinates into `b`'s frame. `None` when there is no consistent overlap.
pub fn match_pair(a: &StitchVertex, b: &StitchVertex, config: &StitchConfig) -> Option<StitchEdge> {
    let matches = ratio_matches(&a.keypoints, &b.keypoints, config.ratio_test);
    let sample_size = match config.model {
        MotionModel::Translation => 1,
        MotionModel::Affine => 3,
    };
    if matches.len() < sample_size.max(config.min_inliers) {
        return None;
    }
    let pairs: Vec<Correspondence> = matches
        .iter()
        .map(|&(i, j)| {
            let (ka, kb) = (&a.keypoints[i], &b.keypoints[j]);
            ((ka.x, ka.y), (kb.x, kb.y))
        })
        .collect();
    let inliers_of = |t: &Affine2| -> Vec<usize> {
        (0..pairs.len())
            .filter(|&k| reprojection_error(t, &pairs[k]) < config.inlier_threshold)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..config.ransac_iterations {
        let sample: Vec<Correspondence> = rand::seq::index::sample(&mut rng, pairs.len(), sample_size)
            .into_iter()
            .map(|k| pairs[k])
            .collect();
        let Some(t) = fit_transform(config.model, &sample) else {
            continue;
        };
        let inl = inliers_of(&t);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    let mut transform = fit_transform(config.model, &best.iter().map(|&k| pairs[k]).collect::<Vec<_>>())?;
    for _ in 0..3 {
        let inl = inliers_of(&transform);
        if inl == best {
            break;
        }
        let Some(t) = fit_transform(config.model, &inl.iter().map(|&k| pairs[k]).collect::<Vec<_>>()) else {
            break;
        };
        best = inl;
        transform = t;
    }
    let best = inliers_of(&transform);
    if best.len() < config.min_inliers {
        return None;
    }
    // Keep the draw from the RNG stream deterministic even if unused.
    let _ = rng.gen::<u8>();
    Some(StitchEdge {
        matches: best.iter().map(|&k| matches[k]).collect(),
        transform,
        inliers: best.len(),
    })
}

/// Per-vertex state of the refinement program.
#[derive(Debug, Clone, PartialEq)]
struct CameraState {
    camera: Affine2,
    color: usize,
    anchored: bool,
    last_change: f64,
}

struct RefineProgram {
    model: MotionModel,
    colors: usize,
    tolerance: f64,
}

/// Contribution of one incident edge to a vertex's local least-squares problem.
struct EdgeTerm {
    neighbor: Affine2,
    /// Transform from the edge's low vertex to its high vertex.
    transform: Affine2,
    this_is_low: bool,
}

impl RefineProgram {
    fn solve(&self, terms: &[EdgeTerm], current: &Affine2) -> Affine2 {
        if terms.is_empty() {
            return *current;
        }
        match self.model {
            MotionModel::Translation => {
                // Low camera ≈ high camera ∘ T, i.e. t_low = t_high + d.
                let n = terms.len() as f64;
                let (sx, sy) = terms.iter().fold((0.0, 0.0), |(sx, sy), term| {
                    let (nx, ny) = term.neighbor.offset();
                    let (dx, dy) = term.transform.offset();
                    if term.this_is_low {
                        (sx + nx + dx, sy + ny + dy)
                    } else {
                        (sx + nx - dx, sy + ny - dy)
                    }
                });
                Affine2::translation(sx / n, sy / n)
            }
            MotionModel::Affine => {
                // Minimize Σ ‖A_low − A_high T‖² over this vertex's camera M:
                // M (n_low I + Σ_high T Tᵀ) = Σ_low M_j T + Σ_high M_j Tᵀ.
                let mut gram = Matrix3::<f64>::zeros();
                let mut rhs = nalgebra::Matrix2x3::<f64>::zeros();
                for term in terms {
                    let t = term.transform.to_h();
                    let mj = term.neighbor.to_h().fixed_rows::<2>(0).into_owned();
                    if term.this_is_low {
                        gram += Matrix3::identity();
                        rhs += mj * t;
                    } else {
                        gram += t * t.transpose();
                        rhs += mj * t.transpose();
                    }
                }
                match gram.cholesky() {
                    Some(ch) => {
                        // M = rhs · gram⁻¹, solved as gram · Mᵀ = rhsᵀ.
                        let mt = ch.solve(&rhs.transpose());
                        Affine2 {
                            m: [[mt[(0, 0)], mt[(1, 0)], mt[(2, 0)]], [mt[(0, 1)], mt[(1, 1)], mt[(2, 1)]]],
                        }
                    }
                    None => *current,
                }
            }
        }
    }
}

impl VertexProgram<CameraState, Affine2> for RefineProgram {
    type Summary = Option<Affine2>;

    fn gather(
        &self,
        round: usize,
        id: VertexId,
        vertex: &CameraState,
        neighbors: &[Neighbor<'_, CameraState, Affine2>],
    ) -> Option<Affine2> {
        if vertex.anchored || vertex.color != round % self.colors {
            return None;
        }
        let terms: Vec<EdgeTerm> = neighbors
            .iter()
            .map(|n| EdgeTerm {
                neighbor: n.payload.camera,
                transform: *n.edge,
                this_is_low: n.edge_key.low == id,
            })
            .collect();
        Some(self.solve(&terms, &vertex.camera))
    }

    fn apply(&self, _: usize, _: VertexId, vertex: &CameraState, update: Option<Affine2>) -> (CameraState, f64) {
        match update {
            None => (vertex.clone(), vertex.last_change),
            Some(camera) => {
                let change = camera.distance(&vertex.camera);
                let change = if camera.is_finite() { change } else { f64::NAN };
                (
                    CameraState {
                        camera,
                        last_change: change,
                        ..vertex.clone()
                    },
                    change,
                )
            }
        }
    }

    fn tolerance(&self) -> f64 {
        self.tolerance
    }
}

/// `Σ_edges ‖A_low − A_high ∘ T‖²` over the current cameras.
pub fn alignment_objective<V, E>(
    graph: &DataGraph<V, E>,
    camera: impl Fn(&V) -> Affine2,
    transform: impl Fn(&E) -> Affine2,
) -> f64 {
    graph
        .edges()
        .iter()
        .map(|(k, e)| {
            let low = camera(&graph.vertices()[&k.low]);
            let high = camera(&graph.vertices()[&k.high]);
            low.distance(&high.compose(&transform(e))).powi(2)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub execution: ExecutionReport,
    /// Objective after initialization, then after each round.
    pub objective_trace: Vec<f64>,
    pub anchor: VertexId,
    pub colors: usize,
}

/// Globally consistent cameras from pairwise transforms.
///
/// Cameras are seeded by composing transforms along a breadth-first tree
/// from `anchor`, then refined by block Gauss-Seidel rounds: vertices of one
/// colour class (never adjacent) move per round, each to the exact minimizer
/// of its local terms. The anchor keeps its input camera.
pub fn refine_cameras(
    graph: DataGraph<StitchVertex, StitchEdge>,
    anchor: VertexId,
    model: MotionModel,
    tolerance: f64,
    max_rounds: usize,
    executor: &Executor,
) -> Result<(DataGraph<StitchVertex, StitchEdge>, RefineReport), StitchError> {
    let Some(anchor_vertex) = graph.vertex(anchor) else {
        return Err(StitchError::UnknownAnchor(anchor));
    };
    let components = graph.components().len();
    if components > 1 {
        return Err(StitchError::DisconnectedGraph { components });
    }
    let mut cameras = BTreeMap::from([(anchor, anchor_vertex.camera)]);
    let mut queue = VecDeque::from([anchor]);
    while let Some(v) = queue.pop_front() {
        let cam_v = cameras[&v];
        for n in graph.neighbors(v).collect::<Vec<_>>() {
            if cameras.contains_key(&n) {
                continue;
            }
            let t = graph.edge(v, n).expect("adjacent").transform;
            // A_low = A_high ∘ T.
            let cam_n = if v < n {
                cam_v.compose(&t.inverse().ok_or(StitchError::NonFinite)?)
            } else {
                cam_v.compose(&t)
            };
            let cam_n = match model {
                MotionModel::Translation => {
                    let (x, y) = cam_n.offset();
                    Affine2::translation(x, y)
                }
                MotionModel::Affine => cam_n,
            };
            cameras.insert(n, cam_n);
            queue.push_back(n);
        }
    }
    let coloring = graph.greedy_coloring();
    let colors = coloring.values().max().map_or(1, |c| c + 1);
    let mut state: DataGraph<CameraState, Affine2> = DataGraph::new();
    for id in graph.vertices().keys() {
        state.add_vertex(
            *id,
            CameraState {
                camera: cameras[id],
                color: coloring[id],
                anchored: *id == anchor,
                last_change: if *id == anchor { 0.0 } else { f64::MAX },
            },
        )?;
    }
    for (k, e) in graph.edges() {
        state.add_edge(k.low, k.high, e.transform)?;
    }
    let objective = |g: &DataGraph<CameraState, Affine2>| alignment_objective(g, |v| v.camera, |t| *t);
    let mut objective_trace = vec![objective(&state)];
    let program = RefineProgram {
        model,
        colors,
        tolerance,
    };
    let (state, execution) = if graph.vertex_count() == 1 {
        (
            state,
            ExecutionReport {
                rounds: 0,
                final_residual: 0.0,
                residual_trace: Vec::new(),
                converged: true,
            },
        )
    } else {
        executor.run_message_passing_observed(state, &program, max_rounds, |_, g| {
            objective_trace.push(objective(g));
        })?
    };
    let refined: BTreeMap<VertexId, Affine2> = state.vertices().iter().map(|(k, v)| (*k, v.camera)).collect();
    if refined.values().any(|c| !c.is_finite()) {
        return Err(StitchError::NonFinite);
    }
    let out = executor.run_vertex_parallel(graph, |id, v| {
        Ok::<_, String>(StitchVertex {
            camera: refined[&id],
            ..v.clone()
        })
    })?;
    Ok((
        out,
        RefineReport {
            execution,
            objective_trace,
            anchor,
            colors,
        },
    ))
}

/// Overlap statistics of an adjacent image pair on the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamStats {
    pub low: VertexId,
    pub high: VertexId,
    pub inliers: usize,
    pub overlap_pixels: u64,
    pub mean_abs_difference: f64,
}

#[derive(Debug, Clone)]
pub struct Panorama {
    pub width: u32,
    pub height: u32,
    /// Canvas coordinates of pixel (0, 0).
    pub origin: (i64, i64),
    pub image: RgbImage,
    pub placements: BTreeMap<VertexId, Affine2>,
    /// Per pixel, the vertex with the largest blend weight (`u32::MAX` if uncovered).
    pub seam_map: Vec<u32>,
    pub seams: Vec<SeamStats>,
}

fn footprint_bounds(v: &StitchVertex) -> [(f64, f64); 4] {
    let (w, h) = ((v.width - 1) as f64, (v.height - 1) as f64);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)].map(|(x, y)| v.camera.apply(x, y))
}

/// Sample of one image at a canvas point: colour and feather weight.
fn sample_at(img: &RgbImage, inv: &Affine2, cx: f64, cy: f64) -> Option<([f64; 3], f64)> {
    const EPS: f64 = 1e-9;
    let (x, y) = inv.apply(cx, cy);
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x < -EPS || y < -EPS || x > w - 1.0 + EPS || y > h - 1.0 + EPS {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let p = |xx: u32, yy: u32| img.get_pixel(xx, yy)[c] as f64;
        *out = (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy) + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy;
    }
    let weight = (x + 1.0).min(y + 1.0).min(w - x).min(h - y);
    Some((rgb, weight))
}

/// Composites refined images with distance-to-border feathering.
pub fn blend_compose(
    graph: DataGraph<StitchVertex, StitchEdge>,
    images: &BTreeMap<VertexId, RgbImage>,
    max_canvas_pixels: u64,
    executor: &Executor,
) -> Result<Panorama, StitchError> {
    if !graph.is_connected() {
        return Err(StitchError::DisconnectedGraph {
            components: graph.components().len(),
        });
    }
    let mut inverses = BTreeMap::new();
    for (id, v) in graph.vertices() {
        if !images.contains_key(id) {
            return Err(StitchError::MissingImage(*id));
        }
        inverses.insert(*id, v.camera.inverse().ok_or(StitchError::NonFinite)?);
    }
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in graph.vertices().values() {
        for (x, y) in footprint_bounds(v) {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    if !(min_x.is_finite() && max_x.is_finite() && min_y.is_finite() && max_y.is_finite()) {
        return Err(StitchError::NonFinite);
    }
    // Small slack so exact integer placements do not gain a spurious column.
    let ox = (min_x + 1e-9).floor() as i64;
    let oy = (min_y + 1e-9).floor() as i64;
    let width = ((max_x - 1e-9).ceil() as i64 - ox + 1).max(1) as u64;
    let height = ((max_y - 1e-9).ceil() as i64 - oy + 1).max(1) as u64;
    let pixels = width * height;
    if pixels > max_canvas_pixels || width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(StitchError::CanvasOverflow {
            pixels,
            limit: max_canvas_pixels,
        });
    }
    let (width, height) = (width as u32, height as u32);
    let layers: Vec<(VertexId, &RgbImage, Affine2)> = inverses.iter().map(|(id, inv)| (*id, &images[id], *inv)).collect();
    let rows: Vec<(Vec<u8>, Vec<u32>)> = executor.install(|| {
        (0..height)
            .into_par_iter()
            .map(|v| {
                let mut row = Vec::with_capacity(width as usize * 3);
                let mut seam = Vec::with_capacity(width as usize);
                for u in 0..width {
                    let (cx, cy) = ((u as i64 + ox) as f64, (v as i64 + oy) as f64);
                    let mut acc = [0.0; 3];
                    let mut total = 0.0;
                    let mut best = (0.0, u32::MAX);
                    for (id, img, inv) in &layers {
                        if let Some((rgb, w)) = sample_at(img, inv, cx, cy) {
                            for c in 0..3 {
                                acc[c] += w * rgb[c];
                            }
                            total += w;
                            if w > best.0 {
                                best = (w, *id);
                            }
                        }
                    }
                    for a in acc {
                        let val = if total > 0.0 { a / total } else { 0.0 };
                        row.push((val + 0.5).floor().clamp(0.0, 255.0) as u8);
                    }
                    seam.push(best.1);
                }
                (row, seam)
            })
            .collect()
    });
    let mut buf = Vec::with_capacity(pixels as usize * 3);
    let mut seam_map = Vec::with_capacity(pixels as usize);
    for (r, s) in rows {
        buf.extend(r);
        seam_map.extend(s);
    }
    let image = RgbImage::from_raw(width, height, buf).expect("buffer sized to canvas");
    let placements: BTreeMap<VertexId, Affine2> = graph.vertices().iter().map(|(k, v)| (*k, v.camera)).collect();
    let seam_graph = executor.run_edge_parallel(graph, |k: EdgeKey, e: &StitchEdge, a: &StitchVertex, b: &StitchVertex| {
        Ok::<_, String>(seam_stats(k, e, a, b, &images[&k.low], &images[&k.high]))
    })?;
    let seams = seam_graph.edges().values().cloned().collect();
    Ok(Panorama {
        width,
        height,
        origin: (ox, oy),
        image,
        placements,
        seam_map,
        seams,
    })
}

fn seam_stats(
    key: EdgeKey,
    edge: &StitchEdge,
    a: &StitchVertex,
    b: &StitchVertex,
    img_a: &RgbImage,
    img_b: &RgbImage,
) -> SeamStats {
    let inv_b = b.camera.inverse();
    let mut overlap = 0u64;
    let mut diff = 0.0;
    if let Some(inv_b) = inv_b {
        for y in 0..a.height {
            for x in 0..a.width {
                let (cx, cy) = a.camera.apply(x as f64, y as f64);
                if let Some((rgb_b, _)) = sample_at(img_b, &inv_b, cx, cy) {
                    let pa = img_a.get_pixel(x, y);
                    overlap += 1;
                    diff += (0..3).map(|c| (pa[c] as f64 - rgb_b[c]).abs()).sum::<f64>() / 3.0;
                }
            }
        }
    }
    SeamStats {
        low: key.low,
        high: key.high,
        inliers: edge.inliers,
        overlap_pixels: overlap,
        mean_abs_difference: if overlap > 0 { diff / overlap as f64 } else { 0.0 },
    }
}

/// Everything produced by a stitch run.
#[derive(Debug, Clone)]
pub struct StitchOutput {
    pub panorama: Panorama,
    pub refine: RefineReport,
    pub keypoint_counts: BTreeMap<VertexId, usize>,
}

/// The four-stage pipeline over `images` (vertex ids follow input order;
/// vertex 0 is the anchor). `progress` receives one line per stage.
pub fn stitch(
    images: Vec<(String, RgbImage)>,
    config: &StitchConfig,
    executor: &Executor,
    progress: &mut dyn FnMut(String),
) -> Result<StitchOutput, StitchError> {
    let mut graph: DataGraph<StitchVertex, ()> = DataGraph::new();
    let mut pixels = BTreeMap::new();
    for (i, (key, img)) in images.into_iter().enumerate() {
        let id = i as VertexId;
        graph.add_vertex(id, StitchVertex::new(key, img.width(), img.height()))?;
        pixels.insert(id, img);
    }
    if graph.vertex_count() == 0 {
        return Err(StitchError::DisconnectedGraph { components: 0 });
    }
    let graph = executor
        .run_vertex_parallel(graph, |id, v| {
            detect_keypoints(&pixels[&id], config).map(|keypoints| StitchVertex {
                keypoints,
                ..v.clone()
            })
        })
        .map_err(|e| match e {
            GraphError::VertexFailure { failures, .. } if !failures.is_empty() => {
                let id = failures[0].0;
                StitchError::DegenerateImage {
                    width: pixels[&id].width(),
                    height: pixels[&id].height(),
                }
            }
            other => StitchError::Graph(other),
        })?;
    let keypoint_counts: BTreeMap<VertexId, usize> = graph.vertices().iter().map(|(k, v)| (*k, v.keypoints.len())).collect();
    progress(format!(
        "keypoints: {}",
        keypoint_counts.iter().map(|(k, n)| format!("{k}:{n}")).collect::<Vec<_>>().join(" ")
    ));
    let mut candidates: DataGraph<StitchVertex, ()> = graph;
    let ids: Vec<VertexId> = candidates.vertices().keys().copied().collect();
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            candidates.add_edge(*a, *b, ())?;
        }
    }
    let matched = executor.run_edge_parallel(candidates, |_, _, a, b| Ok::<_, String>(match_pair(a, b, config)))?;
    let graph = matched.filter_map_edges(|_, e| e);
    progress(format!("matching: {} overlapping pairs", graph.edge_count()));
    let (graph, refine) = refine_cameras(graph, 0, config.model, config.tolerance, config.max_rounds, executor)?;
    progress(format!(
        "refinement: {} rounds, objective {:.6e} -> {:.6e}",
        refine.execution.rounds,
        refine.objective_trace.first().copied().unwrap_or(0.0),
        refine.objective_trace.last().copied().unwrap_or(0.0)
    ));
    let panorama = blend_compose(graph, &pixels, config.max_canvas_pixels, executor)?;
    progress(format!("blending: canvas {}x{}", panorama.width, panorama.height));
    Ok(StitchOutput {
        panorama,
        refine,
        keypoint_counts,
    })
}

/// Helper for callers that only need an RGB value at a canvas pixel.
pub fn pixel(p: &Panorama, u: u32, v: u32) -> Rgb<u8> {
    *p.image.get_pixel(u, v)
}
