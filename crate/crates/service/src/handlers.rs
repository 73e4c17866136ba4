//! Built-in functionality handlers.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use cvgrid_core::container::encode_matrix;
use cvgrid_core::storage::{CacheStatus, Namespace, ObjectKey};
use cvgrid_core::vision::classify::{
    backend_by_name, desk_model, extract_features_cached, top_k_from_features, ClassifierModel, FeatureBackend,
    DEFAULT_CROP_RATIO,
};
use cvgrid_core::vision::stitch::{stitch, MotionModel, StitchConfig};
use cvgrid_core::vision::vip::{detect_faces, score_and_rank, DetectMode, ImageDims, PairRegressor};
use cvgrid_core::vision::{decode_rgb, encode_png};
use parking_lot::Mutex;
use serde_json::json;

use crate::worker::{Handler, HandlerOutput, TaskContext};

const DEFAULT_DIM: usize = 64;
const DEFAULT_TOP: usize = 5;

fn parse_param<T: std::str::FromStr>(ctx: &TaskContext<'_>, key: &str, default: T) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    match ctx.param(key).map(str::trim) {
        None | Some("") => Ok(default),
        Some(raw) => raw.parse().map_err(|e| format!("param `{key}` = `{raw}`: {e}")),
    }
}

fn backend(ctx: &TaskContext<'_>) -> Result<Box<dyn FeatureBackend>, String> {
    let name = ctx.param("backend").or(ctx.param("name")).unwrap_or("hist");
    let dim = parse_param(ctx, "dim", DEFAULT_DIM)?;
    backend_by_name(name, dim).map_err(|e| e.to_string())
}

fn display_name(ctx: &TaskContext<'_>, i: usize) -> String {
    ctx.inputs[i].image.locator().to_string()
}

fn default_model(backend: &dyn FeatureBackend) -> Result<Arc<ClassifierModel>, String> {
    static MODELS: OnceLock<Mutex<HashMap<(String, usize), Arc<ClassifierModel>>>> = OnceLock::new();
    let models = MODELS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (backend.name().to_string(), backend.dimension());
    if let Some(m) = models.lock().get(&key) {
        return Ok(m.clone());
    }
    let model = Arc::new(desk_model(backend).map_err(|e| e.to_string())?);
    models.lock().insert(key, model.clone());
    Ok(model)
}

/// Top-k labels per image.
pub struct ClassifyHandler;

impl Handler for ClassifyHandler {
    fn run(&self, ctx: &TaskContext<'_>) -> Result<HandlerOutput, String> {
        let backend = backend(ctx)?;
        let ratio = parse_param(ctx, "crop", DEFAULT_CROP_RATIO)?;
        let k = parse_param(ctx, "top", DEFAULT_TOP)?;
        let model = match ctx.param("model") {
            Some(key) => {
                let object = ObjectKey::new(Namespace::Models, key).map_err(|e| e.to_string())?;
                let bytes = ctx.storage.fetch_object(&object).map_err(|e| e.to_string())?;
                Arc::new(ClassifierModel::from_bytes(&bytes).map_err(|e| e.to_string())?)
            }
            None => default_model(backend.as_ref())?,
        };
        let mut output = HandlerOutput::default();
        let mut per_image = Vec::new();
        for (i, input) in ctx.inputs.iter().enumerate() {
            let img = decode_rgb(&input.bytes).map_err(|e| e.to_string())?;
            let hash = input.image.content_hash.unwrap_or_else(|| cvgrid_core::job::ContentHash::of(&input.bytes));
            let (features, _) =
                extract_features_cached(ctx.storage, hash, &img, backend.as_ref(), ratio).map_err(|e| e.to_string())?;
            let preds = top_k_from_features(&features, &model, k).map_err(|e| e.to_string())?;
            let line = preds
                .iter()
                .map(|p| format!("{} ({:.4})", p.label, p.confidence))
                .collect::<Vec<_>>()
                .join(", ");
            ctx.sink.line(format!("{}: {line}", display_name(ctx, i)));
            per_image.push(json!({ "image": display_name(ctx, i), "predictions": preds }));
        }
        let body = serde_json::to_vec_pretty(&per_image).expect("serializable");
        output.artifacts.push((format!("top{k}.json"), body));
        output.summary = json!({ "images": per_image });
        Ok(output)
    }
}

/// Ten-crop feature matrices, one container artifact per image.
pub struct FeaturesHandler;

impl Handler for FeaturesHandler {
    fn run(&self, ctx: &TaskContext<'_>) -> Result<HandlerOutput, String> {
        let backend = backend(ctx)?;
        let ratio = parse_param(ctx, "crop", DEFAULT_CROP_RATIO)?;
        let mut output = HandlerOutput::default();
        let mut statuses = Vec::new();
        for (i, input) in ctx.inputs.iter().enumerate() {
            let img = decode_rgb(&input.bytes).map_err(|e| e.to_string())?;
            let hash = input.image.content_hash.unwrap_or_else(|| cvgrid_core::job::ContentHash::of(&input.bytes));
            let (m, status) =
                extract_features_cached(ctx.storage, hash, &img, backend.as_ref(), ratio).map_err(|e| e.to_string())?;
            let status = match status {
                CacheStatus::Hit => "hit",
                CacheStatus::Miss => "miss",
                CacheStatus::Bypassed => "bypassed",
            };
            ctx.sink.line(format!(
                "{}: features {}x{} (cache {status})",
                display_name(ctx, i),
                m.nrows(),
                m.ncols()
            ));
            let name = if ctx.inputs.len() == 1 {
                "features.ccvm".to_string()
            } else {
                format!("features{i}.ccvm")
            };
            output.artifacts.push((name, encode_matrix(&m)));
            statuses.push(json!({ "image": display_name(ctx, i), "rows": m.nrows(), "cols": m.ncols(), "cache": status }));
        }
        output.summary = json!({ "backend": backend.name(), "images": statuses });
        Ok(output)
    }
}

/// Face importance ranking.
pub struct VipHandler;

impl Handler for VipHandler {
    fn run(&self, ctx: &TaskContext<'_>) -> Result<HandlerOutput, String> {
        let mode = DetectMode::from_param(ctx.param("faces").unwrap_or("builtin")).map_err(|e| e.to_string())?;
        let regressor = PairRegressor::shipped();
        let mut output = HandlerOutput::default();
        let mut summaries = Vec::new();
        for (i, input) in ctx.inputs.iter().enumerate() {
            let img = decode_rgb(&input.bytes).map_err(|e| e.to_string())?;
            let faces = detect_faces(&img, &mode).map_err(|e| e.to_string())?;
            let dims = ImageDims::new(img.width() as f64, img.height() as f64);
            let ranking = score_and_rank(&faces, &regressor, dims);
            ctx.sink.line(format!("{}: {} faces", display_name(ctx, i), faces.len()));
            for (rank, r) in ranking.0.iter().enumerate() {
                ctx.sink.line(format!(
                    "  #{} face {} at ({:.0}, {:.0}, {:.0}x{:.0}) score {:.4}",
                    rank + 1,
                    r.face_index,
                    r.bbox[0],
                    r.bbox[1],
                    r.bbox[2],
                    r.bbox[3],
                    r.score
                ));
            }
            let name = if ctx.inputs.len() == 1 {
                "ranking.json".to_string()
            } else {
                format!("ranking{i}.json")
            };
            output
                .artifacts
                .push((name, serde_json::to_vec_pretty(&ranking.0).expect("serializable")));
            summaries.push(json!({ "image": display_name(ctx, i), "ranking": ranking.0 }));
        }
        output.summary = json!({ "images": summaries });
        Ok(output)
    }
}

/// Panorama stitching over all images of the job.
pub struct StitchHandler;

impl Handler for StitchHandler {
    fn run(&self, ctx: &TaskContext<'_>) -> Result<HandlerOutput, String> {
        let mut config = StitchConfig {
            model: MotionModel::from_warp(ctx.param("warp")).map_err(|e| e.to_string())?,
            ..StitchConfig::default()
        };
        config.seed = parse_param(ctx, "seed", config.seed)?;
        let mut images = Vec::with_capacity(ctx.inputs.len());
        for (i, input) in ctx.inputs.iter().enumerate() {
            let img = decode_rgb(&input.bytes).map_err(|e| e.to_string())?;
            ctx.sink
                .line(format!("{}: loaded {}x{}", display_name(ctx, i), img.width(), img.height()));
            images.push((display_name(ctx, i), img));
        }
        let out = stitch(images, &config, ctx.executor, &mut |line| ctx.sink.line(line)).map_err(|e| e.to_string())?;
        let pano = &out.panorama;
        let report = json!({
            "model": config.model,
            "execution": out.refine.execution,
            "objective_trace": out.refine.objective_trace,
            "anchor": out.refine.anchor,
            "colors": out.refine.colors,
            "keypoints": out.keypoint_counts,
            "placements": pano.placements,
            "seams": pano.seams,
            "canvas": { "width": pano.width, "height": pano.height, "origin": [pano.origin.0, pano.origin.1] },
        });
        Ok(HandlerOutput {
            artifacts: vec![
                ("panorama.png".to_string(), encode_png(&pano.image)),
                ("report.json".to_string(), serde_json::to_vec_pretty(&report).expect("serializable")),
            ],
            summary: json!({
                "width": pano.width,
                "height": pano.height,
                "rounds": out.refine.execution.rounds,
                "images": pano.placements.len(),
            }),
        })
    }
}
