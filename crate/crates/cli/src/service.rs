//! HTTP inference service.
//!
//! Handlers read an immutable [`Snapshot`] behind an `Arc`. Reloading
//! swaps the `Arc`, so a request sees either the old or the new snapshot
//! in full.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use safeclick::data::{object_radius, perturb_seeded, Mask, PerturbSpec, Prompt, PromptKind, Sample};
use safeclick::model::{DecoderVariant, Model};
use safeclick::rle::{encode_rle, MaskRle};
use safeclick::tensor::Tensor;
use safeclick::train::dice;
use safeclick::Error;

/// Models keyed by variant name, plus the browsable samples.
#[derive(Debug)]
pub struct Snapshot {
    pub models: BTreeMap<String, Model>,
    pub samples: Vec<Sample>,
}

impl Snapshot {
    pub fn new(models: Vec<Model>, samples: Vec<Sample>) -> safeclick::Result<Self> {
        let mut map = BTreeMap::new();
        for m in models {
            let key = m.variant.as_str().to_string();
            if let Some(first) = map.values().next().map(|f: &Model| f.config.image_size) {
                if first != m.config.image_size {
                    return Err(Error::ConfigMismatch("models take different image sizes".into()));
                }
            }
            if map.insert(key.clone(), m).is_some() {
                return Err(Error::ConfigMismatch(format!("two models for variant `{key}`")));
            }
        }
        if let (Some(m), Some(s)) = (map.values().next(), samples.iter().find(|s| s.size != 0)) {
            if m.config.image_size != s.size {
                return Err(Error::ConfigMismatch(format!(
                    "samples are {}px but models take {}px",
                    s.size, m.config.image_size
                )));
            }
        }
        Ok(Snapshot { models: map, samples })
    }

    fn image_size(&self) -> Option<usize> {
        self.models.values().next().map(|m| m.config.image_size)
    }
}

#[derive(Clone)]
pub struct AppState {
    current: Arc<RwLock<Arc<Snapshot>>>,
    errors: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Self {
        AppState { current: Arc::new(RwLock::new(Arc::new(snapshot))), errors: Arc::new(AtomicU64::new(0)) }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Replaces the served models and samples in one step.
    pub fn replace(&self, snapshot: Snapshot) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snapshot);
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/samples", get(list_samples))
        .route("/api/sample/:id", get(get_sample))
        .route("/api/segment", post(segment))
        .route("/api/perturb", post(perturb))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, message: msg.into() }
    }

    fn not_found(msg: impl Into<String>) -> Self {
        ApiError { status: StatusCode::NOT_FOUND, message: msg.into() }
    }

    fn from_core(e: Error, state: &AppState) -> Self {
        match e {
            Error::OutOfBounds { .. } => ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, message: e.to_string() },
            Error::InvalidArgument(_) | Error::Shape { .. } | Error::EmptyMask(_) | Error::ConfigMismatch(_) => {
                ApiError::bad_request(e.to_string())
            }
            other => {
                let id = state.errors.fetch_add(1, Ordering::Relaxed);
                eprintln!("internal error {id:08x}: {other}");
                ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message: format!("internal error {id:08x}") }
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &ErrorBody { error: self.message })
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r,
        Err(e) => Err(ApiError::from_core(Error::Corrupt(format!("worker failed: {e}")), state)),
    }
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub variants: Vec<String>,
    pub image_size: Option<usize>,
    pub samples: usize,
}

async fn health(State(state): State<AppState>) -> Response {
    let snap = state.snapshot();
    let body = Health {
        status: "ok".into(),
        variants: snap.models.keys().cloned().collect(),
        image_size: snap.image_size(),
        samples: snap.samples.len(),
    };
    json_response(StatusCode::OK, &body)
}

/// Grayscale 8-bit PNG of a `[0, 1]` image, downsampled by `step`.
pub fn png_base64(image: &[f32], size: usize, step: usize) -> String {
    let side = size.div_ceil(step);
    let mut pixels = Vec::with_capacity(side * side);
    for y in (0..size).step_by(step) {
        for x in (0..size).step_by(step) {
            pixels.push((image[y * size + x].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut out), side as u32, side as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(&pixels).expect("in-memory PNG data");
    }
    B64.encode(out)
}

#[derive(Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: usize,
    pub kind: String,
    /// Base64 PNG at half resolution.
    pub thumbnail: String,
}

#[derive(Serialize, Deserialize)]
pub struct SampleList {
    pub samples: Vec<SampleSummary>,
}

async fn list_samples(State(state): State<AppState>) -> Response {
    let snap = state.snapshot();
    let samples = snap
        .samples
        .iter()
        .enumerate()
        .map(|(id, s)| SampleSummary { id, kind: format!("{:?}", s.kind).to_lowercase(), thumbnail: png_base64(&s.image, s.size, 2) })
        .collect();
    json_response(StatusCode::OK, &SampleList { samples })
}

#[derive(Serialize, Deserialize)]
pub struct SampleDetail {
    pub id: usize,
    pub size: usize,
    /// Base64 PNG at full resolution.
    pub image_png: String,
    pub gt_mask: MaskRle,
}

async fn get_sample(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id: usize = id.parse().map_err(|_| ApiError::bad_request(format!("sample id `{id}` is not an integer")))?;
    let snap = state.snapshot();
    let s = snap.samples.get(id).ok_or_else(|| ApiError::not_found(format!("no sample {id}")))?;
    let body = SampleDetail { id, size: s.size, image_png: png_base64(&s.image, s.size, 1), gt_mask: encode_rle(&s.mask) };
    Ok(json_response(StatusCode::OK, &body))
}

/// Row-major grayscale pixels in `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub size: usize,
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    #[serde(default)]
    pub sample_id: Option<usize>,
    #[serde(default)]
    pub image: Option<InlineImage>,
    pub prompts: Vec<Prompt>,
    pub variant: DecoderVariant,
    #[serde(default)]
    pub perturb: Option<PerturbSpec>,
    /// Object radius for point perturbation on inline images.
    #[serde(default)]
    pub radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub variant: DecoderVariant,
    pub mask_rle: MaskRle,
    pub logits_min: f32,
    pub logits_max: f32,
    pub dice_vs_gt: Option<f64>,
    pub applied_prompts: Vec<Prompt>,
}

fn radius_for(gt: Option<&Mask>, explicit: Option<f64>, prompts: &[Prompt], spec: &PerturbSpec) -> Result<Option<f64>, ApiError> {
    if spec.kind != PromptKind::Point || !prompts.iter().any(|p| p.kind() == PromptKind::Point) {
        return Ok(None);
    }
    match (explicit, gt) {
        (Some(r), _) if r.is_finite() && r >= 0.0 => Ok(Some(r)),
        (Some(r), _) => Err(ApiError::bad_request(format!("radius must be finite and nonnegative, got {r}"))),
        (None, Some(m)) => Ok(Some(object_radius(m).map_err(|e| ApiError::bad_request(e.to_string()))?)),
        (None, None) => Err(ApiError::bad_request("point perturbation on an inline image needs a radius")),
    }
}

pub fn run_segment(snap: &Snapshot, req: &SegmentRequest, state: &AppState) -> Result<SegmentResponse, ApiError> {
    let core = |e| ApiError::from_core(e, state);
    let model = snap
        .models
        .get(req.variant.as_str())
        .ok_or_else(|| ApiError::bad_request(format!("variant `{}` is not loaded", req.variant)))?;
    let size = model.config.image_size;
    let (image, gt) = match (&req.sample_id, &req.image) {
        (Some(id), None) => {
            let s = snap.samples.get(*id).ok_or_else(|| ApiError::not_found(format!("no sample {id}")))?;
            (s.image_tensor(), Some(&s.mask))
        }
        (None, Some(img)) => {
            if img.size != size || img.pixels.len() != size * size {
                return Err(ApiError::bad_request(format!("inline image must be {size}x{size}")));
            }
            if img.pixels.iter().any(|v| !v.is_finite()) {
                return Err(ApiError::bad_request("inline image has non-finite pixels"));
            }
            (Tensor::new([size, size, 1], img.pixels.clone()).map_err(core)?, None)
        }
        _ => return Err(ApiError::bad_request("give exactly one of sample_id and image")),
    };
    if req.prompts.is_empty() {
        return Err(ApiError::bad_request("at least one prompt is required"));
    }
    for p in &req.prompts {
        p.check_bounds(size).map_err(core)?;
    }
    let applied = match &req.perturb {
        Some(spec) => {
            let radius = radius_for(gt, req.radius, &req.prompts, spec)?;
            perturb_seeded(&req.prompts, spec, radius, size).map_err(core)?
        }
        None => req.prompts.clone(),
    };
    let logits = model.predict(&image, &applied).map_err(core)?;
    let (lo, hi) = logits.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mask = Mask::from_logits(&logits).map_err(core)?;
    let dice_vs_gt = gt.map(|g| dice(&mask, g)).transpose().map_err(core)?;
    Ok(SegmentResponse {
        variant: req.variant,
        mask_rle: encode_rle(&mask),
        logits_min: lo,
        logits_max: hi,
        dice_vs_gt,
        applied_prompts: applied,
    })
}

async fn segment(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: SegmentRequest = parse(&body)?;
    let snap = state.snapshot();
    let st = state.clone();
    let resp = blocking(&state, move || run_segment(&snap, &req, &st)).await?;
    Ok(json_response(StatusCode::OK, &resp))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbRequest {
    pub prompt: Prompt,
    pub spec: PerturbSpec,
    /// Radius source for points: a sample's mask, or an explicit value.
    #[serde(default)]
    pub sample_id: Option<usize>,
    #[serde(default)]
    pub radius: Option<f64>,
    /// Image side length; defaults to the served model's.
    #[serde(default)]
    pub size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbResponse {
    pub prompt: Prompt,
    pub perturbed: Prompt,
    pub radius: Option<f64>,
}

pub fn run_perturb(snap: &Snapshot, req: &PerturbRequest, state: &AppState) -> Result<PerturbResponse, ApiError> {
    let core = |e| ApiError::from_core(e, state);
    let gt = match req.sample_id {
        Some(id) => Some(&snap.samples.get(id).ok_or_else(|| ApiError::not_found(format!("no sample {id}")))?.mask),
        None => None,
    };
    let size = req
        .size
        .or(gt.map(Mask::size))
        .or(snap.image_size())
        .ok_or_else(|| ApiError::bad_request("image size unknown; pass `size`"))?;
    if size < 2 {
        return Err(ApiError::bad_request("size must be at least 2"));
    }
    req.prompt.check_bounds(size).map_err(core)?;
    let radius = radius_for(gt, req.radius, &[req.prompt], &req.spec)?;
    let out = perturb_seeded(&[req.prompt], &req.spec, radius, size).map_err(core)?;
    Ok(PerturbResponse { prompt: req.prompt, perturbed: out[0], radius })
}

async fn perturb(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: PerturbRequest = parse(&body)?;
    let snap = state.snapshot();
    let resp = run_perturb(&snap, &req, &state)?;
    Ok(json_response(StatusCode::OK, &resp))
}

/// Fresh Baseline and SafeClick models sharing one trunk.
pub fn fresh_pair(config: safeclick::model::ModelConfig, seed: u64) -> safeclick::Result<Vec<Model>> {
    Ok(vec![
        Model::init(config.clone(), DecoderVariant::Baseline, seed)?,
        Model::init(config, DecoderVariant::SafeClick, seed)?,
    ])
}
