use std::collections::BTreeMap;

use cvgrid_core::graph::{DataGraph, Executor, Neighbor, VertexId, VertexProgram};
use cvgrid_core::job::{Locator, Scheme};
use cvgrid_core::storage::Storage;
use cvgrid_core::vision::classify::{
    compute_shared_covariance, lda_extend_model, softmax, CategoryPrior, ClassifierModel,
};
use cvgrid_core::vision::stitch::{
    alignment_objective, blend_compose, refine_cameras, Affine2, MotionModel, StitchEdge, StitchVertex,
};
use cvgrid_core::vision::synthetic;
use cvgrid_core::vision::vip::{rescale_boxes, score_and_rank, FaceBox, ImageDims, PairRegressor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_connected_graph(rng: &mut ChaCha8Rng, n: u32, extra: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && !edges.contains(&(a.min(b), a.max(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    edges
}

/// A nonlinear diffusion whose result depends on every neighbour's exact value.
struct Diffuse {
    mix: f64,
}

impl VertexProgram<f64, f64> for Diffuse {
    type Summary = f64;

    fn gather(&self, _round: usize, _id: VertexId, _v: &f64, neighbors: &[Neighbor<'_, f64, f64>]) -> f64 {
        neighbors.iter().map(|n| n.edge * n.payload.sin()).sum()
    }

    fn apply(&self, _round: usize, _id: VertexId, v: &f64, s: f64) -> (f64, f64) {
        let next = (1.0 - self.mix) * v + self.mix * s.tanh();
        (next, (next - v).abs())
    }

    fn tolerance(&self) -> f64 {
        1e-9
    }
}

fn diffusion_graph(seed: u64) -> DataGraph<f64, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..40);
    let mut g = DataGraph::new();
    for v in 0..n {
        g.add_vertex(v, rng.gen_range(-3.0..3.0)).unwrap();
    }
    for (a, b) in random_connected_graph(&mut rng, n, n as usize) {
        g.add_edge(a, b, rng.gen_range(-1.0..1.0)).unwrap();
    }
    g
}

/// Records the round of its last write so gathers can detect leaks from the current round.
struct Marker;

impl VertexProgram<(Option<usize>, f64), ()> for Marker {
    type Summary = (bool, f64);

    fn gather(
        &self,
        round: usize,
        _id: VertexId,
        _v: &(Option<usize>, f64),
        neighbors: &[Neighbor<'_, (Option<usize>, f64), ()>],
    ) -> (bool, f64) {
        let leaked = neighbors.iter().any(|n| n.payload.0 == Some(round));
        (leaked, neighbors.iter().map(|n| n.payload.1).sum())
    }

    fn apply(&self, round: usize, _id: VertexId, v: &(Option<usize>, f64), s: (bool, f64)) -> ((Option<usize>, f64), f64) {
        assert!(!s.0, "a gather in round {round} saw a write from the same round");
        ((Some(round), 0.5 * v.1 + 0.1 * s.1), 1.0 / (round + 1) as f64)
    }

    fn tolerance(&self) -> f64 {
        0.05
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn message_passing_is_thread_count_independent(seed in any::<u64>(), mix in 0.1f64..0.9) {
        let program = Diffuse { mix };
        let mut reference: Option<(BTreeMap<VertexId, u64>, Vec<u64>)> = None;
        for threads in [1, 2, 4, 8] {
            let ex = Executor::new(threads).unwrap();
            let (g, report) = ex.run_message_passing(diffusion_graph(seed), &program, 60).unwrap();
            let bits: BTreeMap<VertexId, u64> = g.vertices().iter().map(|(k, v)| (*k, v.to_bits())).collect();
            let trace: Vec<u64> = report.residual_trace.iter().map(|r| r.to_bits()).collect();
            match &reference {
                None => reference = Some((bits, trace)),
                Some(r) => {
                    prop_assert_eq!(&r.0, &bits);
                    prop_assert_eq!(&r.1, &trace);
                }
            }
        }
    }

    #[test]
    fn residual_trace_is_the_per_round_max(seed in any::<u64>()) {
        let program = Diffuse { mix: 0.4 };
        let g = diffusion_graph(seed);
        let mut previous: BTreeMap<VertexId, f64> = g.vertices().clone();
        let mut maxima = Vec::new();
        let ex = Executor::new(3).unwrap();
        let (_, report) = ex
            .run_message_passing_observed(g, &program, 40, |_, g| {
                let m = g.vertices().iter().map(|(k, v)| (v - previous[k]).abs()).fold(0.0, f64::max);
                maxima.push(m);
                previous = g.vertices().clone();
            })
            .unwrap();
        prop_assert_eq!(report.residual_trace, maxima);
    }

    #[test]
    fn gathers_never_see_same_round_writes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..30);
        let mut g = DataGraph::new();
        for v in 0..n {
            g.add_vertex(v, (None, rng.gen_range(0.0..1.0))).unwrap();
        }
        for (a, b) in random_connected_graph(&mut rng, n, 2 * n as usize) {
            g.add_edge(a, b, ()).unwrap();
        }
        let (_, report) = Executor::new(4).unwrap().run_message_passing(g, &Marker, 50).unwrap();
        prop_assert!(report.rounds > 1);
    }
}

/// Random LDA instance: class means, shared covariance, and samples.
struct LdaInstance {
    means: Vec<DVector<f64>>,
    priors: Vec<f64>,
    samples: Vec<Vec<DVector<f64>>>,
    chol: DMatrix<f64>,
}

fn lda_instance(seed: u64) -> LdaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=8);
    let k = rng.gen_range(2..=5);
    let chol = DMatrix::from_fn(d, d, |r, c| match r.cmp(&c) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => rng.gen_range(0.5..1.5),
        std::cmp::Ordering::Greater => rng.gen_range(-0.5..0.5),
    });
    let means: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-3.0..3.0))).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut priors: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let head: f64 = priors[..k - 1].iter().sum();
    priors[k - 1] = 1.0 - head;
    let samples = means
        .iter()
        .map(|mu| {
            (0..rng.gen_range(d + 2..d + 12))
                .map(|_| mu + &chol * DVector::from_fn(d, |_, _| gaussian(&mut rng)))
                .collect()
        })
        .collect();
    LdaInstance {
        means,
        priors,
        samples,
        chol,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn build_model(inst: &LdaInstance, scale: f64) -> (ClassifierModel, DMatrix<f64>) {
    let d = inst.means[0].len();
    let rows: Vec<DVector<f64>> = inst
        .samples
        .iter()
        .flat_map(|class| {
            let n = class.len() as f64;
            let mean = class.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
            class.iter().map(move |x| (x - &mean) * scale).collect::<Vec<_>>()
        })
        .collect();
    let corpus = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
    let cache = compute_shared_covariance(&corpus, None).unwrap();
    let mut model = ClassifierModel::empty("test", d);
    for (ki, class) in inst.samples.iter().enumerate() {
        let training = DMatrix::from_fn(class.len(), d, |r, c| class[r][c] * scale);
        let head: f64 = inst.priors[..=ki].iter().sum();
        let mut priors: Vec<f64> = inst.priors[..=ki].iter().map(|p| p / head).collect();
        let tail: f64 = priors[..ki].iter().sum();
        priors[ki] = 1.0 - tail;
        model = lda_extend_model(&model, &format!("c{ki}"), &training, &cache, &CategoryPrior::new(priors).unwrap()).unwrap();
    }
    (model, cache.covariance().clone())
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feature_scaling_rescales_covariance_and_keeps_decisions(seed in any::<u64>(), c in 0.1f64..10.0) {
        let inst = lda_instance(seed);
        let (model, cov) = build_model(&inst, 1.0);
        let (scaled_model, scaled_cov) = build_model(&inst, c);
        let expected = &cov * (c * c);
        prop_assert!((&scaled_cov - &expected).amax() <= 1e-9 * expected.amax().max(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let d = inst.means[0].len();
        for _ in 0..20 {
            let k = rng.gen_range(0..inst.means.len());
            let x = &inst.means[k] + &inst.chol * DVector::from_fn(d, |_, _| gaussian(&mut rng));
            let s = model.scores(x.as_slice()).unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let t = scaled_model.scores(&xs).unwrap();
            let mut top = s.clone();
            top.sort_by(|a, b| b.total_cmp(a));
            // Only decisions with a clear margin are compared; the rest are numerically tied.
            if top[0] - top[1] > 1e-6 {
                prop_assert_eq!(argmax(&s), argmax(&t));
            }
        }
    }

    #[test]
    fn softmax_sums_to_one(scores in proptest::collection::vec(-50.0f64..50.0, 1..200)) {
        let p = softmax(&scores);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn boxes(seed: u64, n: usize) -> Vec<FaceBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|index| FaceBox {
            x: rng.gen_range(0.0..160.0),
            y: rng.gen_range(0.0..120.0),
            w: rng.gen_range(5.0..40.0),
            h: rng.gen_range(5.0..40.0),
            index,
        })
        .collect()
}

const DIMS: ImageDims = ImageDims {
    width: 200.0,
    height: 160.0,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn vip_ranking_properties(seed in any::<u64>(), n in 1usize..9, s in 0.25f64..4.0) {
        let faces = boxes(seed, n);
        let reg = PairRegressor::shipped();
        let ranking = score_and_rank(&faces, &reg, DIMS);
        prop_assert_eq!(&score_and_rank(&faces, &reg, DIMS), &ranking);
        if n == 1 {
            prop_assert_eq!(ranking.0[0].score, 0.0);
        }

        let mut shuffled = faces.clone();
        shuffled.reverse();
        shuffled.rotate_left(seed as usize % n);
        prop_assert_eq!(&score_and_rank(&shuffled, &reg, DIMS), &ranking);

        let rescaled = score_and_rank(&rescale_boxes(&faces, s), &reg, DIMS.scaled(s));
        for (a, b) in ranking.0.iter().zip(&rescaled.0) {
            prop_assert!((a.score - b.score).abs() <= 1e-9);
        }

        let mut anti = reg.clone();
        anti.weights[1] = 0.0;
        anti.weights[4] = 0.0;
        anti.bias = 0.0;
        let total: f64 = score_and_rank(&faces, &anti, DIMS).0.iter().map(|r| r.score).sum();
        prop_assert!(total.abs() <= 1e-9);
    }
}

fn measured_graph(seed: u64, anchor_shift: (f64, f64)) -> (DataGraph<StitchVertex, StitchEdge>, Vec<(f64, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=8);
    let truth: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..40.0))).collect();
    let mut g = DataGraph::new();
    for v in 0..n {
        let mut vertex = StitchVertex::new(format!("v{v}"), 24, 18);
        if v == 0 {
            vertex.camera = Affine2::translation(anchor_shift.0, anchor_shift.1);
        }
        g.add_vertex(v as VertexId, vertex).unwrap();
    }
    for (a, b) in random_connected_graph(&mut rng, n as u32, 3) {
        let (ta, tb) = (truth[a as usize], truth[b as usize]);
        let noise = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        let edge = StitchEdge {
            matches: Vec::new(),
            transform: Affine2::translation(ta.0 - tb.0 + noise.0, ta.1 - tb.1 + noise.1),
            inliers: 10,
        };
        g.add_edge(a, b, edge).unwrap();
    }
    (g, truth)
}

fn with_cameras(
    g: &DataGraph<StitchVertex, StitchEdge>,
    camera: impl Fn(VertexId) -> Affine2,
) -> DataGraph<StitchVertex, StitchEdge> {
    let (vertices, edges) = g.clone().into_parts();
    let mut out = DataGraph::new();
    for (id, mut v) in vertices {
        v.camera = camera(id);
        out.add_vertex(id, v).unwrap();
    }
    for (k, e) in edges {
        out.add_edge(k.low, k.high, e).unwrap();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn refinement_gauge_and_monotonicity(seed in any::<u64>(), shift in (-20i32..20, -20i32..20)) {
        let ex = Executor::new(2).unwrap();
        let shift = (shift.0 as f64, shift.1 as f64);
        let (base, report) = refine_cameras(measured_graph(seed, (0.0, 0.0)).0, 0, MotionModel::Translation, 1e-12, 200_000, &ex).unwrap();
        let (moved, _) = refine_cameras(measured_graph(seed, shift).0, 0, MotionModel::Translation, 1e-12, 200_000, &ex).unwrap();
        for (id, v) in base.vertices() {
            let expected = v.camera;
            let got = moved.vertex(*id).unwrap().camera;
            prop_assert!((got.m[0][2] - expected.m[0][2] - shift.0).abs() <= 1e-9);
            prop_assert!((got.m[1][2] - expected.m[1][2] - shift.1).abs() <= 1e-9);
        }
        for w in report.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let objective = alignment_objective(&base, |v| v.camera, |e| e.transform);
        prop_assert!((objective - report.objective_trace.last().unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn compositing_ignores_integer_gauge_shifts(seed in any::<u64>(), shift in (-30i64..30, -30i64..30)) {
        let ex = Executor::new(2).unwrap();
        let (g, truth) = measured_graph(seed, (0.0, 0.0));
        let images: BTreeMap<VertexId, _> = (0..truth.len())
            .map(|v| (v as VertexId, synthetic::noise(24, 18, seed.wrapping_add(v as u64))))
            .collect();
        let place = |dx: f64, dy: f64| {
            with_cameras(&g, |id| {
                let (tx, ty) = truth[id as usize];
                Affine2::translation(tx.round() + dx, ty.round() + dy)
            })
        };
        let a = blend_compose(place(0.0, 0.0), &images, 1 << 24, &ex).unwrap();
        let b = blend_compose(place(shift.0 as f64, shift.1 as f64), &images, 1 << 24, &ex).unwrap();
        prop_assert_eq!((a.width, a.height), (b.width, b.height));
        prop_assert_eq!((b.origin.0 - a.origin.0, b.origin.1 - a.origin.1), shift);
        prop_assert!(a.image == b.image);
        prop_assert_eq!(a.seam_map, b.seam_map);
    }
}

proptest! {
    #[test]
    fn locators_never_escape_their_root(parts in proptest::collection::vec(prop_oneof![
        Just("a".to_string()), Just("b".to_string()), Just("..".to_string()), Just(".".to_string()), Just("".to_string()),
    ], 0..8)) {
        let tmp = tempfile::tempdir().unwrap();
        let storage = Storage::open(tmp.path()).unwrap().with_local_root(tmp.path().join("local"));
        let rel = format!("/{}", parts.join("/"));
        for scheme in [Scheme::Dropbox, Scheme::Local] {
            let root = match scheme {
                Scheme::Dropbox => storage.dropbox_root().to_path_buf(),
                Scheme::Local => tmp.path().join("local"),
            };
            if let Ok(path) = storage.resolve(&Locator::new(scheme, rel.clone())) {
                prop_assert!(path.starts_with(&root), "{} escaped to {}", rel, path.display());
                prop_assert!(!path.components().any(|c| c == std::path::Component::ParentDir));
            }
        }
    }
}
