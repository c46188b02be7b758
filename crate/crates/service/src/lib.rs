//! JSON-over-HTTP backend for the attention map editor.
//!
//! Serves samples with their current attention maps and top-3 predictions,
//! re-infers with edited maps, keeps edit sessions in a directory store and
//! runs fine-tuning jobs over committed edits. Maps travel as base64 `AMAP`
//! payloads at display resolution (a fixed multiple of the map resolution).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use abn_core::checkpoint;
use abn_core::data::{load_dataset, Dataset};
use abn_core::editing::{apply_strokes, overlay, BrushMode, BrushStroke};
use abn_core::map::resize_map;
use abn_core::model::predict_topk;
use abn_core::{AbnModel, AttentionMap, Tensor};
use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

mod error;
pub mod jobs;
pub mod store;

pub use error::{ApiError, ApiResult};
use jobs::{FinetuneJob, FinetuneRequest};
use store::{EditSession, SessionMeta, SessionStatus, Store, TopK};

pub const TOP_K: usize = 3;
pub const DEFAULT_DISPLAY_SCALE: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Environment variable that overrides the store directory.
pub const STORE_ENV: &str = "ABN_STORE";

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

struct Snapshot {
    model: Arc<AbnModel>,
    source: String,
}

/// Shared service state: one immutable model snapshot at a time, the
/// dataset being edited, and the single-writer session store.
pub struct AppState {
    snapshot: RwLock<Snapshot>,
    pub dataset: Dataset,
    pub store: Mutex<Store>,
    pub display_scale: usize,
}

impl AppState {
    pub fn new(model: AbnModel, source: impl Into<String>, dataset: Dataset, store: Store, display_scale: usize) -> Self {
        AppState {
            snapshot: RwLock::new(Snapshot {
                model: Arc::new(model),
                source: source.into(),
            }),
            dataset,
            store: Mutex::new(store),
            display_scale,
        }
    }

    /// The current serving model; stays valid across later swaps.
    pub fn model(&self) -> Arc<AbnModel> {
        self.snapshot.read().expect("snapshot lock").model.clone()
    }

    pub fn swap_model(&self, model: AbnModel, source: String) {
        *self.snapshot.write().expect("snapshot lock") = Snapshot {
            model: Arc::new(model),
            source,
        };
    }

    pub fn display_size(&self) -> (usize, usize) {
        let (h, w) = self.model().config().map_size;
        (h * self.display_scale, w * self.display_scale)
    }
}

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/samples", get(list_samples))
        .route("/samples/{id}", get(sample_view))
        .route("/samples/{id}/edits", post(submit_edit))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/commit", post(commit_session))
        .route("/jobs", get(list_jobs))
        .route("/jobs/finetune", post(start_finetune))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed")
        })
        .with_state(state)
}

fn encode_map(map: &AttentionMap) -> String {
    B64.encode(map.to_bytes())
}

fn topk(logits: &Tensor) -> Vec<TopK> {
    predict_topk(logits.data(), TOP_K)
        .into_iter()
        .map(|p| TopK {
            class: p.class,
            probability: p.probability as f64,
        })
        .collect()
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

async fn health(State(state): Shared) -> Json<Value> {
    let model = state.model();
    let source = state.snapshot.read().expect("snapshot lock").source.clone();
    let c = model.config();
    Json(json!({
        "status": "ok",
        "model": {
            "input_size": [c.input_size.0, c.input_size.1],
            "input_channels": c.input_channels,
            "num_classes": c.num_classes,
            "map_size": [c.map_size.0, c.map_size.1],
            "display_size": state.display_size(),
            "mechanism": c.mechanism.as_str(),
            "parameters": model.param_count(),
        },
        "model_sha256": checkpoint::checksum(&model),
        "model_source": source,
        "samples": state.dataset.len(),
    }))
}

async fn list_samples(State(state): Shared) -> Json<Value> {
    let samples: Vec<Value> = state
        .dataset
        .samples
        .iter()
        .map(|s| json!({ "sample_id": s.id, "label": s.label }))
        .collect();
    Json(json!({ "samples": samples }))
}

/// The model's view of one sample: produced map (map resolution) and top-k.
struct Inference {
    image: Tensor,
    map: AttentionMap,
    topk: Vec<TopK>,
}

fn infer(model: &AbnModel, state: &AppState, sample_id: &str) -> ApiResult<(usize, Inference)> {
    let index = state
        .dataset
        .index_of(sample_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown sample `{sample_id}`")))?;
    let image = state.dataset.images(&[index])?;
    let out = model.forward(&image)?;
    Ok((
        index,
        Inference {
            map: out.maps().remove(0),
            topk: topk(&out.per_logits),
            image,
        },
    ))
}

#[derive(Deserialize)]
struct ViewQuery {
    alpha: Option<f64>,
}

#[derive(Serialize)]
struct SampleView {
    sample_id: String,
    label: usize,
    /// Binary PGM/PPM.
    image_b64: String,
    map_size: (usize, usize),
    display_size: (usize, usize),
    /// AMAP at display resolution.
    original_map_b64: String,
    alpha: f64,
    /// Binary PPM of the heat overlay.
    overlay_b64: String,
    topk: Vec<TopK>,
}

async fn sample_view(State(state): Shared, UrlPath(id): UrlPath<String>, Query(q): Query<ViewQuery>) -> ApiResult<Json<SampleView>> {
    let alpha = q.alpha.unwrap_or(DEFAULT_ALPHA);
    let model = state.model();
    let (index, inf) = infer(&model, &state, &id)?;
    let sample = &state.dataset.samples[index];
    let (dh, dw) = state.display_size();
    let display = resize_map(&inf.map, dh, dw)?;
    let heat = overlay(&sample.image, &display, alpha)?;
    Ok(Json(SampleView {
        sample_id: sample.id.clone(),
        label: sample.label,
        image_b64: B64.encode(sample.image.to_pnm()),
        map_size: inf.map.dims(),
        display_size: (dh, dw),
        original_map_b64: encode_map(&display),
        alpha,
        overlay_b64: B64.encode(heat.to_pnm()),
        topk: inf.topk,
    }))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeMode {
    Add,
    Remove,
}

/// A brush stroke as sent by the editor, in display pixel coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeJson {
    pub mode: StrokeMode,
    pub points: Vec<[f32; 2]>,
    pub radius: f32,
    #[serde(default = "full_strength")]
    pub strength: f32,
}

fn full_strength() -> f32 {
    1.0
}

impl From<&StrokeJson> for BrushStroke {
    fn from(s: &StrokeJson) -> Self {
        BrushStroke {
            mode: match s.mode {
                StrokeMode::Add => BrushMode::Add,
                StrokeMode::Remove => BrushMode::Remove,
            },
            points: s.points.iter().map(|p| (p[0], p[1])).collect(),
            radius: s.radius,
            strength: s.strength,
        }
    }
}

/// Body of `POST /samples/{id}/edits`: exactly one of `map_b64` (AMAP at
/// display resolution) or `strokes`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub map_b64: Option<String>,
    pub strokes: Option<Vec<StrokeJson>>,
    /// Revise an existing draft instead of opening a new session.
    pub session_id: Option<String>,
}

#[derive(Serialize)]
struct SessionView<'a> {
    #[serde(flatten)]
    meta: &'a SessionMeta,
    /// AMAP at map resolution.
    original_map_b64: String,
    edited_map_b64: String,
}

fn session_view(s: &EditSession) -> Value {
    serde_json::to_value(SessionView {
        meta: &s.meta,
        original_map_b64: encode_map(&s.original_map),
        edited_map_b64: encode_map(&s.edited_map),
    })
    .expect("session serializes")
}

fn decode_display_map(b64: &str, display: (usize, usize)) -> ApiResult<AttentionMap> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| ApiError::invalid("invalid_map", format!("map_b64 is not base64: {e}")))?;
    let map = AttentionMap::from_bytes(&bytes).map_err(|e| ApiError::invalid("invalid_map", e.to_string()))?;
    if map.dims() != display {
        return Err(ApiError::invalid(
            "invalid_map",
            format!("map is {:?}, display resolution is {display:?}", map.dims()),
        ));
    }
    Ok(map)
}

async fn submit_edit(State(state): Shared, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: EditRequest = parse_body(&body)?;
    let model = state.model();
    let (_, inf) = infer(&model, &state, &id)?;
    let display_size = state.display_size();
    let display = resize_map(&inf.map, display_size.0, display_size.1)?;
    let edited_display = match (&req.map_b64, &req.strokes) {
        (Some(b64), None) => decode_display_map(b64, display_size)?,
        (None, Some(strokes)) => {
            let strokes: Vec<BrushStroke> = strokes.iter().map(BrushStroke::from).collect();
            apply_strokes(&display, &strokes, display_size).map_err(|e| ApiError::invalid("invalid_stroke", e.to_string()))?
        }
        _ => {
            return Err(ApiError::invalid(
                "invalid_edit",
                "send exactly one of `map_b64` and `strokes`",
            ))
        }
    };
    // an unchanged display map stands for the model's own map, so that
    // substitution reproduces the original predictions exactly
    let edited = if edited_display == display {
        inf.map.clone()
    } else {
        let (mh, mw) = inf.map.dims();
        resize_map(&edited_display, mh, mw)?
    };
    let after_topk = topk(&model.infer_with_map(&inf.image, std::slice::from_ref(&edited))?);

    let now = now_millis();
    let mut store = state.store.lock().expect("store lock");
    let (meta, status) = match &req.session_id {
        Some(sid) => {
            let existing = store
                .session(sid)
                .ok_or_else(|| ApiError::not_found(format!("unknown session `{sid}`")))?;
            if existing.meta.status == SessionStatus::Committed {
                return Err(ApiError::conflict(format!("session `{sid}` is committed")));
            }
            if existing.meta.sample_id != id {
                return Err(ApiError::invalid(
                    "invalid_edit",
                    format!("session `{sid}` belongs to sample `{}`", existing.meta.sample_id),
                ));
            }
            let mut meta = existing.meta.clone();
            meta.updated_at = now;
            meta.before_topk = inf.topk;
            meta.after_topk = after_topk;
            (meta, StatusCode::OK)
        }
        None => (
            SessionMeta {
                session_id: store.next_session_id(),
                sample_id: id,
                status: SessionStatus::Draft,
                created_at: now,
                updated_at: now,
                before_topk: inf.topk,
                after_topk,
            },
            StatusCode::CREATED,
        ),
    };
    let session = EditSession {
        meta,
        original_map: inf.map,
        edited_map: edited,
    };
    let view = session_view(&session);
    store.put_session(session).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok((status, Json(view)))
}

#[derive(Deserialize)]
struct SessionQuery {
    status: Option<String>,
}

async fn list_sessions(State(state): Shared, Query(q): Query<SessionQuery>) -> ApiResult<Json<Value>> {
    let status = q
        .status
        .as_deref()
        .map(str::parse::<SessionStatus>)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let store = state.store.lock().expect("store lock");
    let sessions: Vec<Value> = store.sessions(status).map(session_view).collect();
    Ok(Json(json!({ "sessions": sessions })))
}

async fn get_session(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let store = state.store.lock().expect("store lock");
    let s = store
        .session(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))?;
    Ok(Json(session_view(s)))
}

async fn commit_session(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let mut store = state.store.lock().expect("store lock");
    let mut session = store
        .session(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))?
        .clone();
    if session.meta.status == SessionStatus::Committed {
        return Err(ApiError::conflict(format!("session `{id}` is already committed")));
    }
    session.meta.status = SessionStatus::Committed;
    session.meta.updated_at = now_millis();
    let view = session_view(&session);
    store.put_session(session).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(view))
}

async fn start_finetune(State(state): Shared, body: Bytes) -> ApiResult<impl IntoResponse> {
    let config: FinetuneRequest = if body.iter().all(u8::is_ascii_whitespace) {
        FinetuneRequest::default()
    } else {
        parse_body(&body)?
    };
    let job = {
        let mut store = state.store.lock().expect("store lock");
        if let Some(active) = store.jobs().find(|j| j.state.is_active()) {
            return Err(ApiError::conflict(format!("job `{}` is still {:?}", active.job_id, active.state).to_lowercase()));
        }
        let sessions = jobs::committed_sessions(&store);
        if sessions.is_empty() {
            return Err(ApiError::invalid("no_committed_sessions", "commit at least one edit session first"));
        }
        let job = FinetuneJob::new(store.next_job_id(), config, sessions, now_millis());
        store.put_job(job.clone()).map_err(|e| ApiError::internal(e.to_string()))?;
        job
    };
    let worker_state = state.clone();
    let job_id = job.job_id.clone();
    tokio::task::spawn_blocking(move || jobs::run(worker_state, job_id));
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(state): Shared, UrlPath(id): UrlPath<String>) -> ApiResult<Json<FinetuneJob>> {
    let store = state.store.lock().expect("store lock");
    store
        .job(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))
}

async fn list_jobs(State(state): Shared) -> Json<Value> {
    let store = state.store.lock().expect("store lock");
    let jobs: Vec<&FinetuneJob> = store.jobs().collect();
    Json(json!({ "jobs": jobs }))
}

/// The store directory: `ABN_STORE` when set, otherwise `default`.
pub fn resolve_store(default: &Path) -> PathBuf {
    std::env::var_os(STORE_ENV).map_or_else(|| default.to_path_buf(), PathBuf::from)
}

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub checkpoint: PathBuf,
    /// Dataset manifest (`.tsv`).
    pub dataset: PathBuf,
    pub store: PathBuf,
    pub host: String,
    pub port: u16,
    pub display_scale: usize,
}

/// Loads everything `serve` needs, failing with a diagnostic on bad inputs.
pub fn load_state(opts: &ServeOptions) -> Result<AppState, String> {
    let model = checkpoint::load(&opts.checkpoint)
        .map_err(|e| format!("cannot load checkpoint {}: {e}", opts.checkpoint.display()))?;
    let dataset =
        load_dataset(&opts.dataset).map_err(|e| format!("cannot load dataset {}: {e}", opts.dataset.display()))?;
    if dataset.samples.iter().any(|s| {
        (s.image.height(), s.image.width()) != model.config().input_size
            || s.image.channels() != model.config().input_channels
            || s.label >= model.config().num_classes
    }) {
        return Err("dataset images or labels do not match the model configuration".into());
    }
    if opts.display_scale == 0 {
        return Err("display scale must be positive".into());
    }
    let store = Store::open(&opts.store).map_err(|e| format!("cannot open store {}: {e}", opts.store.display()))?;
    Ok(AppState::new(
        model,
        opts.checkpoint.display().to_string(),
        dataset,
        store,
        opts.display_scale,
    ))
}

pub async fn serve(opts: ServeOptions) -> Result<(), String> {
    let state = Arc::new(load_state(&opts)?);
    let addr: SocketAddr = format!("{}:{}", opts.host, opts.port)
        .parse()
        .map_err(|e| format!("bad listen address: {e}"))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| format!("cannot bind {addr}: {e}"))?;
    let local = listener.local_addr().map_err(|e| e.to_string())?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, router(state)).await.map_err(|e| e.to_string())
}
