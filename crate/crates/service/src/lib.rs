//! HTTP and WebSocket API over a slide store: live guidance sessions,
//! background transfer jobs, the verification queue and stage calibration.
//!
//! All errors use the body `{code, message, detail}`. Mutations are written
//! to the store before the response is sent.

pub mod error;
pub mod session;
mod spec;
mod stream;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, Semaphore};

use slidereg_core::datastore::{AnnotationEdit, AuditEntry, RegionEntry, Store};
use slidereg_core::geom::BBox;
use slidereg_core::imagecore::decode_png;
use slidereg_core::scopemodel::{
    fit_calibration, CalibrationEndpoint, CalibrationKind, CalibrationMap, ScopeError, StageCoord,
};
use slidereg_core::transfer::{ChainFailure, ChainParams, TransferRecord};
use slidereg_core::workflow::{self, VerificationItem};
use slidereg_core::{Annotation, CellClass, Magnification, ProfileSet, Slot};

pub use error::{ApiError, ApiResult, ErrorBody};
pub use session::{CreateSession, FrameResponse, Mode, Session};

pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub store: PathBuf,
    /// Profiles directory; the store's own profiles, then the defaults, when
    /// absent.
    pub profiles: Option<PathBuf>,
    pub workers: usize,
    pub chain: ChainParams,
}

impl ServiceConfig {
    pub fn new(listen: SocketAddr, store: PathBuf) -> Self {
        Self { listen, store, profiles: None, workers: workflow::default_workers(), chain: ChainParams::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub job_id: String,
    pub region_id: String,
    pub content_hash: String,
    pub status: JobStatus,
    pub records: Vec<TransferRecord>,
    pub halted: Option<ChainFailure>,
    pub error: Option<String>,
}

type Shared<T> = Arc<Mutex<T>>;

pub struct Inner {
    dir: PathBuf,
    store: Mutex<Store>,
    profiles: ProfileSet,
    chain: ChainParams,
    calibrations: Mutex<Vec<CalibrationMap>>,
    sessions: Mutex<HashMap<String, Shared<Session>>>,
    jobs: Mutex<HashMap<String, Job>>,
    workers: Arc<Semaphore>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::internal(e.to_string())
}

fn now() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, ApiError> {
        let store = Store::open(&config.store)?;
        let profiles = match &config.profiles {
            Some(p) => ProfileSet::load_dir(p).map_err(internal)?,
            None => workflow::store_profiles(&config.store)?,
        };
        let cpath = config.store.join(CALIBRATION_FILE);
        let calibrations = if cpath.exists() {
            let text = std::fs::read_to_string(&cpath).map_err(internal)?;
            serde_json::from_str(&text).map_err(internal)?
        } else {
            Vec::new()
        };
        Ok(Self(Arc::new(Inner {
            dir: config.store.clone(),
            store: Mutex::new(store),
            profiles,
            chain: config.chain.clone(),
            calibrations: Mutex::new(calibrations),
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            next_id: AtomicU64::new(1),
        })))
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.0.next_id.fetch_add(1, Ordering::Relaxed))
    }

    pub fn store_dir(&self) -> &Path {
        &self.0.dir
    }

    pub(crate) async fn session(&self, id: &str) -> ApiResult<Shared<Session>> {
        self.0
            .sessions
            .lock()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/spec", get(spec::api_spec))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/frames", post(post_frame))
        .route("/sessions/{id}/stream", get(stream::stream))
        .route("/transfer/run", post(run_transfer))
        .route("/transfer/jobs/{id}", get(get_job))
        .route("/verify/queue", get(verify_queue))
        .route("/verify/{reference}", post(verify))
        .route("/regions", get(list_regions))
        .route("/regions/{id}", get(get_region))
        .route("/regions/{id}/images/{slot}", get(region_image))
        .route("/calibration", get(list_calibration).post(post_calibration))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), std::io::Error> {
    let state = AppState::open(&config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn json_body<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

// Sessions

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = json_body(&body)?;
    let profile = st.0.profiles.get(&req.profile).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let mag = req.magnification.unwrap_or(Magnification::X100);
    let ppm = profile.at(mag).map_err(|e| ApiError::bad_request(e.to_string()))?.px_per_mm;
    let id = st.fresh_id("s");
    let session = Session::new(id.clone(), req, ppm, mag, &st.0.calibrations.lock().await);
    let view = session.view();
    st.0.sessions.lock().await.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let s = st.session(&id).await?;
    let view = s.lock().await.view();
    Ok(Json(view))
}

#[derive(Deserialize)]
struct FrameQuery {
    index: u64,
}

/// Decodes and ingests one frame with the session held, so frames of one
/// session are processed strictly in order.
pub(crate) async fn ingest_frame(session: &Shared<Session>, index: u64, png: Bytes) -> ApiResult<FrameResponse> {
    let mut guard = session.clone().lock_owned().await;
    guard.check_index(index)?;
    tokio::task::spawn_blocking(move || {
        let frame = decode_png(&png).map_err(|e| ApiError::bad_request(format!("frame is not a PNG: {e}")))?;
        guard.ingest(index, frame)
    })
    .await
    .map_err(internal)?
}

async fn post_frame(
    State(st): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<FrameQuery>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let s = st.session(&id).await?;
    Ok(Json(ingest_frame(&s, q.index, body).await?))
}

// Transfer jobs

#[derive(Deserialize)]
struct RunTransfer {
    region_id: String,
}

#[derive(Serialize)]
struct JobCreated {
    job_id: String,
    status: JobStatus,
}

async fn run_transfer(State(st): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: RunTransfer = json_body(&body)?;
    let entry = st.0.store.lock().await.manifest.region(&req.region_id)?.clone();
    let (dir, profiles, params) = (st.0.dir.clone(), st.0.profiles.clone(), st.0.chain.clone());
    let hash = {
        let entry = entry.clone();
        tokio::task::spawn_blocking(move || workflow::content_hash(&dir, &entry, &profiles, &params))
            .await
            .map_err(internal)??
    };
    let mut jobs = st.0.jobs.lock().await;
    if let Some(j) = jobs
        .values()
        .find(|j| j.region_id == req.region_id && j.content_hash == hash && j.status != JobStatus::Failed)
    {
        return Ok((StatusCode::OK, Json(JobCreated { job_id: j.job_id.clone(), status: j.status })));
    }
    let job_id = st.fresh_id("job");
    jobs.insert(
        job_id.clone(),
        Job {
            job_id: job_id.clone(),
            region_id: req.region_id.clone(),
            content_hash: hash,
            status: JobStatus::Queued,
            records: Vec::new(),
            halted: None,
            error: None,
        },
    );
    drop(jobs);
    tokio::spawn(execute_job(st.clone(), job_id.clone(), entry));
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id, status: JobStatus::Queued })))
}

async fn set_job(st: &AppState, id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(j) = st.0.jobs.lock().await.get_mut(id) {
        f(j);
    }
}

async fn execute_job(st: AppState, job_id: String, entry: RegionEntry) {
    let _permit = st.0.workers.clone().acquire_owned().await.expect("semaphore is never closed");
    set_job(&st, &job_id, |j| j.status = JobStatus::Running).await;
    let (dir, profiles, params) = (st.0.dir.clone(), st.0.profiles.clone(), st.0.chain.clone());
    let result = tokio::task::spawn_blocking(move || {
        let images = workflow::load_region_images(&dir, &entry)?;
        workflow::transfer_entry(&entry, &images, &profiles, &params)
    })
    .await;
    let outcome = match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => return set_job(&st, &job_id, |j| fail(j, e.to_string())).await,
        Err(e) => return set_job(&st, &job_id, |j| fail(j, e.to_string())).await,
    };
    let saved = {
        let mut store = st.0.store.lock().await;
        match store.manifest.region_mut(&outcome.region_id) {
            Ok(r) => {
                workflow::apply_outcome(r, &outcome);
                store.save(&st.0.dir).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        }
    };
    set_job(&st, &job_id, |j| match saved {
        Ok(()) => {
            j.status = JobStatus::Done;
            j.records = outcome.records;
            j.halted = outcome.halted;
        }
        Err(e) => fail(j, e),
    })
    .await;
}

fn fail(j: &mut Job, e: String) {
    log::warn!("transfer job {} failed: {e}", j.job_id);
    j.status = JobStatus::Failed;
    j.error = Some(e);
}

async fn get_job(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    let jobs = st.0.jobs.lock().await;
    let j = jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))?;
    Ok(Json(j.clone()))
}

// Verification

#[derive(Serialize)]
struct QueueItem {
    reference: String,
    #[serde(flatten)]
    item: VerificationItem,
}

async fn verify_queue(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    let store = st.0.store.lock().await;
    let items: Vec<QueueItem> = workflow::verification_items(&store)
        .into_iter()
        .map(|item| QueueItem { reference: item.reference(), item })
        .collect();
    Ok(Json(items))
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VerifyAction {
    Accept,
    Correct,
    Add,
    Delete,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyPayload {
    #[serde(default, rename = "box")]
    bbox: Option<BBox>,
    #[serde(default)]
    dx: Option<f64>,
    #[serde(default)]
    dy: Option<f64>,
    #[serde(default)]
    label: Option<CellClass>,
}

#[derive(Debug, Deserialize)]
struct VerifyRequest {
    action: VerifyAction,
    #[serde(default)]
    payload: Option<VerifyPayload>,
    #[serde(default)]
    who: Option<String>,
}

#[derive(Serialize)]
struct VerifyResponse {
    annotation: Option<Annotation>,
    audit: Vec<AuditEntry>,
}

/// Splits `region:slot:annotation`; the annotation part may be empty for
/// `add`.
fn parse_reference(r: &str) -> ApiResult<(String, Slot, String)> {
    let mut parts = r.rsplitn(3, ':');
    let (Some(ann), Some(slot), Some(region)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(ApiError::bad_request(format!("reference `{r}` is not region:slot:annotation")));
    };
    let slot: Slot = slot.parse().map_err(ApiError::bad_request)?;
    Ok((region.to_string(), slot, ann.to_string()))
}

fn edits_for(action: VerifyAction, id: &str, p: VerifyPayload) -> ApiResult<Vec<AnnotationEdit>> {
    let id = id.to_string();
    let mut edits = Vec::new();
    match action {
        VerifyAction::Accept => edits.push(AnnotationEdit::Accept { id }),
        VerifyAction::Delete => edits.push(AnnotationEdit::Delete { id }),
        VerifyAction::Add => {
            let (Some(bbox), Some(label)) = (p.bbox, p.label) else {
                return Err(ApiError::bad_request("add needs payload.box and payload.label"));
            };
            edits.push(AnnotationEdit::Add { id: (!id.is_empty()).then_some(id), bbox, label });
        }
        VerifyAction::Correct => {
            match (p.bbox, p.dx, p.dy) {
                (Some(bbox), None, None) => edits.push(AnnotationEdit::Resize { id: id.clone(), bbox }),
                (None, Some(dx), Some(dy)) => edits.push(AnnotationEdit::Move { id: id.clone(), dx, dy }),
                (None, None, None) => {}
                _ => return Err(ApiError::bad_request("correct takes either payload.box or payload.dx and dy")),
            }
            if let Some(label) = p.label {
                edits.push(AnnotationEdit::Relabel { id, label });
            }
            if edits.is_empty() {
                return Err(ApiError::bad_request("correct needs a box, an offset or a label"));
            }
        }
    }
    Ok(edits)
}

async fn verify(
    State(st): State<AppState>,
    UrlPath(reference): UrlPath<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: VerifyRequest = json_body(&body)?;
    let (region, slot, id) = parse_reference(&reference)?;
    if id.is_empty() && !matches!(req.action, VerifyAction::Add) {
        return Err(ApiError::bad_request("reference names no annotation"));
    }
    let edits = edits_for(req.action, &id, req.payload.unwrap_or_default())?;
    let who = req.who.unwrap_or_else(|| "operator".into());
    let when = now();
    let mut store = st.0.store.lock().await;
    // Multi-step corrections apply atomically.
    let mut scratch = store.clone();
    let mut audit = Vec::new();
    for e in &edits {
        audit.push(scratch.correct(&region, slot, e, &who, &when)?);
    }
    scratch.save(&st.0.dir)?;
    *store = scratch;
    let annotation = audit.last().and_then(|a| a.after.clone().or(a.before.clone()));
    Ok(Json(VerifyResponse { annotation, audit }))
}

// Regions

async fn list_regions(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.0.store.lock().await.manifest.regions.clone()))
}

async fn get_region(State(st): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.0.store.lock().await.manifest.region(&id)?.clone()))
}

async fn region_image(
    State(st): State<AppState>,
    UrlPath((id, slot)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let slot: Slot = slot.parse().map_err(ApiError::not_found)?;
    let path = {
        let store = st.0.store.lock().await;
        Store::image_path(&st.0.dir, store.manifest.region(&id)?.slot(slot)?)
    };
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::not_found(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

// Calibration

#[derive(Deserialize)]
struct CalibrationRequest {
    kind: CalibrationKind,
    from: CalibrationEndpoint,
    to: CalibrationEndpoint,
    /// `[[from_x, from_y], [to_x, to_y]]` stage readings of one feature.
    pairs: Vec<[[f64; 2]; 2]>,
}

async fn list_calibration(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.0.calibrations.lock().await.clone()))
}

async fn post_calibration(State(st): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CalibrationRequest = json_body(&body)?;
    for ep in [&req.from, &req.to] {
        let p = st.0.profiles.get(&ep.microscope).map_err(|e| ApiError::bad_request(e.to_string()))?;
        p.at(ep.magnification).map_err(|e| ApiError::bad_request(e.to_string()))?;
    }
    let pairs: Vec<(StageCoord, StageCoord)> = req
        .pairs
        .iter()
        .map(|[a, b]| (StageCoord::new(a[0], a[1]), StageCoord::new(b[0], b[1])))
        .collect();
    let map = fit_calibration(&pairs, req.kind, req.from, req.to).map_err(|e| {
        let code = match e {
            ScopeError::ResidualTooLarge { .. } => "calibration_rejected",
            ScopeError::TooFewPairs { .. } => "too_few_pairs",
            _ => "bad_request",
        };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    })?;
    let mut cals = st.0.calibrations.lock().await;
    cals.retain(|c| !(c.from == map.from && c.to == map.to));
    cals.push(map.clone());
    let mut text = serde_json::to_string_pretty(&*cals).map_err(internal)?;
    text.push('\n');
    tokio::fs::write(st.0.dir.join(CALIBRATION_FILE), text).await.map_err(internal)?;
    Ok(Json(map))
}
