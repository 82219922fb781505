//! HTTP API for the labelling front end.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use terralabel::projection::UmapParams;
use terralabel::superpixels::SegmentMap;

use crate::artifacts::{Artifacts, EmbeddingInfo};
use crate::commands;
use crate::labels::{label_ids, mask_png, parse_record, rasterize, to_csv, ChipLookup, FieldError, LabelLog, LabelRecord};
use crate::render::{segment_masks, thumbnail};

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub bands: [usize; 3],
    pub umap: UmapParams,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub id: u64,
    pub status: JobStatus,
    pub progress: f64,
    pub chip_ids: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct AppState {
    art: Artifacts,
    opts: ServeOptions,
    chips_projection: Value,
    embedding: EmbeddingInfo,
    thumbnails: Mutex<HashMap<String, Arc<Vec<u8>>>>,
    segmentations: Mutex<HashMap<String, Arc<SegmentMap>>>,
    segment_projections: Mutex<HashMap<Vec<String>, Value>>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
    /// Single appender: label writes are serialized through this lock.
    labels: tokio::sync::Mutex<LabelLog>,
}

/// Artifacts the service cannot start without.
pub fn missing_artifacts(root: &Path) -> Vec<String> {
    ["manifest.json", "chips.proj", "sim.simm", "embeddings/model.json"]
        .iter()
        .filter(|f| !root.join(f).exists())
        .map(|f| f.to_string())
        .collect()
}

impl AppState {
    pub fn load(root: &Path, opts: ServeOptions) -> anyhow::Result<Arc<Self>> {
        let missing = missing_artifacts(root);
        if !missing.is_empty() {
            bail!("store {} is missing: {}", root.display(), missing.join(", "));
        }
        let art = Artifacts::open(root)?;
        let proj_text = std::fs::read_to_string(art.chips_proj())?;
        // Validates ids and coordinates before anything is served.
        terralabel::projection::Projection2D::from_json(&proj_text).context("chips.proj")?;
        let chips_projection: Value = serde_json::from_str(&proj_text)?;
        let embedding = art.read_embedding_info()?;
        let labels = tokio::sync::Mutex::new(LabelLog::new(art.labels()));
        Ok(Arc::new(Self {
            art,
            opts,
            chips_projection,
            embedding,
            thumbnails: Mutex::default(),
            segmentations: Mutex::default(),
            segment_projections: Mutex::default(),
            jobs: Mutex::default(),
            next_job: AtomicU64::new(1),
            labels,
        }))
    }

    fn knows_chip(&self, id: &str) -> bool {
        self.art.store.split_of(id).is_some()
    }

    fn segmentation(&self, id: &str) -> anyhow::Result<Arc<SegmentMap>> {
        if let Some(s) = self.segmentations.lock().unwrap().get(id) {
            return Ok(s.clone());
        }
        let seg = Arc::new(self.art.read_segments(id)?);
        self.segmentations.lock().unwrap().insert(id.to_string(), seg.clone());
        Ok(seg)
    }
}

impl ChipLookup for AppState {
    fn segment_count(&self, chip_id: &str) -> Option<usize> {
        self.knows_chip(chip_id)
            .then(|| self.segmentation(chip_id).map_or(0, |s| s.len()))
    }
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        log::error!("{e:#}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<AppState>>;

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

async fn chips_projection(State(s): Shared) -> Json<Value> {
    Json(s.chips_projection.clone())
}

#[derive(Deserialize)]
struct SegmentRequest {
    chip_ids: Vec<String>,
}

async fn request_segments(State(s): Shared, Json(req): Json<SegmentRequest>) -> ApiResult<Json<Value>> {
    if req.chip_ids.is_empty() {
        return Err(ApiError::bad_request("chip_ids is empty"));
    }
    let unknown: Vec<&String> = req.chip_ids.iter().filter(|id| !s.knows_chip(id)).collect();
    if !unknown.is_empty() {
        return Err(ApiError::not_found(format!("unknown chips: {unknown:?}")));
    }
    let mut key = req.chip_ids.clone();
    key.sort();
    key.dedup();
    let id = s.next_job.fetch_add(1, Ordering::Relaxed);
    let cached = s.segment_projections.lock().unwrap().get(&key).cloned();
    let job = Job {
        id,
        status: if cached.is_some() { JobStatus::Done } else { JobStatus::Running },
        progress: if cached.is_some() { 1.0 } else { 0.0 },
        chip_ids: key.clone(),
        projection: cached.clone(),
        error: None,
    };
    s.jobs.lock().unwrap().insert(id, job);
    if cached.is_none() {
        let state = s.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = commands::project_segments(&state.art, &key, state.opts.umap)
                .and_then(|p| Ok(serde_json::from_str::<Value>(&p.to_json()?)?));
            let mut jobs = state.jobs.lock().unwrap();
            let job = jobs.get_mut(&id).expect("job registered before spawn");
            match outcome {
                Ok(v) => {
                    state.segment_projections.lock().unwrap().insert(key, v.clone());
                    job.projection = Some(v);
                    job.status = JobStatus::Done;
                    job.progress = 1.0;
                }
                Err(e) => {
                    log::error!("segment projection job {id}: {e:#}");
                    job.error = Some(format!("{e:#}"));
                    job.status = JobStatus::Failed;
                }
            }
        });
    }
    Ok(Json(json!({ "job_id": id })))
}

async fn job(State(s): Shared, UrlPath(id): UrlPath<u64>) -> ApiResult<Json<Job>> {
    s.jobs
        .lock()
        .unwrap()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no job {id}")))
}

async fn chip_thumbnail(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    if !s.knows_chip(&id) {
        return Err(ApiError::not_found(format!("unknown chip {id}")));
    }
    let cached = s.thumbnails.lock().unwrap().get(&id).cloned();
    let png = match cached {
        Some(png) => png,
        None => {
            let state = s.clone();
            let chip_id = id.clone();
            let png = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
                thumbnail(&state.art.store.read_chip(&chip_id)?, state.opts.bands)
            })
            .await
            .map_err(|e| anyhow::anyhow!(e))??;
            // First writer wins so repeated requests stay byte-identical.
            s.thumbnails.lock().unwrap().entry(id).or_insert_with(|| Arc::new(png)).clone()
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png.as_ref().clone()).into_response())
}

async fn chip_segments(State(s): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    if !s.knows_chip(&id) {
        return Err(ApiError::not_found(format!("unknown chip {id}")));
    }
    let seg = s.segmentation(&id)?;
    Ok(Json(serde_json::to_value(segment_masks(&id, &seg)).map_err(anyhow::Error::from)?))
}

#[derive(Serialize)]
struct RecordErrors {
    index: usize,
    errors: Vec<FieldError>,
}

async fn post_labels(State(s): Shared, Json(body): Json<Value>) -> ApiResult<Json<Value>> {
    let items: Vec<Value> = match body {
        Value::Array(items) => items,
        other => vec![other],
    };
    if items.is_empty() {
        return Err(ApiError::bad_request("no label records"));
    }
    let now = now_ms();
    let mut records = Vec::with_capacity(items.len());
    let mut rejected = Vec::new();
    for (index, item) in items.iter().enumerate() {
        match parse_record(item, now, s.as_ref()) {
            Ok(r) => records.push(r),
            Err(errors) => rejected.push(RecordErrors { index, errors }),
        }
    }
    if !rejected.is_empty() {
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "invalid label records", "records": rejected }),
        });
    }
    let log = s.labels.lock().await;
    log.append(&records)?;
    Ok(Json(json!({ "accepted": records.len(), "records": records })))
}

#[derive(Deserialize)]
struct ExportQuery {
    format: String,
    chip: Option<String>,
}

fn chip_masks(s: &AppState, records: &[LabelRecord], only: Option<&str>) -> anyhow::Result<Vec<(String, Vec<u8>)>> {
    let ids = label_ids(records);
    let mut chips: Vec<&str> = records
        .iter()
        .filter(|r| r.segment_id.is_some())
        .map(|r| r.chip_id.as_str())
        .filter(|c| only.is_none_or(|o| o == *c))
        .collect();
    chips.sort_unstable();
    chips.dedup();
    chips
        .into_iter()
        .map(|c| {
            let seg = s.segmentation(c)?;
            let mask = rasterize(c, &seg, records, &ids);
            Ok((c.to_string(), mask_png(&mask, seg.height, seg.width)?))
        })
        .collect()
}

async fn export_labels(State(s): Shared, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let records = s.labels.lock().await.read_all()?;
    match q.format.as_str() {
        "csv" => Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], to_csv(&records)?).into_response()),
        "masks" => match q.chip.as_deref() {
            Some(chip) => {
                if !s.knows_chip(chip) {
                    return Err(ApiError::not_found(format!("unknown chip {chip}")));
                }
                let seg = s.segmentation(chip)?;
                let mask = rasterize(chip, &seg, &records, &label_ids(&records));
                let png = mask_png(&mask, seg.height, seg.width)?;
                Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
            }
            None => {
                let masks: Vec<Value> = chip_masks(&s, &records, None)?
                    .into_iter()
                    .map(|(chip, png)| json!({ "chip_id": chip, "png_base64": STANDARD.encode(png) }))
                    .collect();
                Ok(Json(json!({ "labels": label_ids(&records), "masks": masks })).into_response())
            }
        },
        other => Err(ApiError::bad_request(format!("unknown export format {other:?}; use csv or masks"))),
    }
}

async fn meta(State(s): Shared) -> ApiResult<Json<Value>> {
    let m = s.art.store.manifest();
    let labels = s.labels.lock().await.len()?;
    Ok(Json(json!({
        "chips": m.splits.len(),
        "chip_size": m.chip_size,
        "bands": m.bands,
        "tiles": m.tiles.iter().map(|t| &t.id).collect::<Vec<_>>(),
        "thumbnail_bands": s.opts.bands,
        "embedding": s.embedding,
        "labels": labels,
        "umap": s.opts.umap,
    })))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/projection/chips", get(chips_projection))
        .route("/api/projection/segments", post(request_segments))
        .route("/api/jobs/{id}", get(job))
        .route("/api/chips/{id}/thumbnail.png", get(chip_thumbnail))
        .route("/api/chips/{id}/segments", get(chip_segments))
        .route("/api/labels", post(post_labels))
        .route("/api/labels/export", get(export_labels))
        .route("/api/meta", get(meta))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
