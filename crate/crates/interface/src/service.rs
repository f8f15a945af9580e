//! HTTP job service.
//!
//! Endpoints: `POST /images`, `GET /images/{id}`, `POST /masks`,
//! `GET /masks/{id}`, `POST /edits`, `GET /edits/{id}`,
//! `GET /edits/{id}/result`, `GET /edits/{id}/events`, `GET /healthz`.

use std::collections::{HashMap, VecDeque};
use std::convert::Infallible;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cpam_core::backend::DiffusionBackend;
use cpam_core::mask::SpatialMask;
use cpam_core::mask_input::{MaskInputError, MaskResolver, MaskSpec, SegmentationClient};
use cpam_core::pipeline::{edit_prepared, write_run_outputs, EditObserver, Phase};
use cpam_core::tensor::ImageTensor;
use futures_util::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

use crate::config::Config;
use crate::jobs::{EditJob, JobEvent, JobQueue, JobRequest, JobState};
use crate::segment::HttpSegmenter;
use crate::store::{BlobKind, BlobStore, JobStore};
use crate::{now_unix_ms, InterfaceError};

pub const MAX_UPLOAD_BYTES: usize = 64 << 20;
const EVENT_BUFFER: usize = 4096;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<InterfaceError> for ApiError {
    fn from(e: InterfaceError) -> Self {
        ApiError::internal(e)
    }
}

impl From<MaskInputError> for ApiError {
    fn from(e: MaskInputError) -> Self {
        let status = match &e {
            MaskInputError::Transport { .. } => StatusCode::BAD_GATEWAY,
            MaskInputError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

struct Shared {
    jobs: HashMap<String, EditJob>,
    queue: JobQueue,
    shutdown: bool,
}

struct Inner {
    config: Config,
    backend: Arc<dyn DiffusionBackend>,
    blobs: BlobStore,
    job_store: JobStore,
    results_dir: PathBuf,
    shared: Mutex<Shared>,
    wake: Condvar,
    events: broadcast::Sender<JobEvent>,
    resolver: MaskResolver,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn job(&self, id: &str) -> Option<EditJob> {
        self.lock().jobs.get(id).cloned()
    }

    /// Applies a monotonic state change, persists it and publishes the
    /// event. Out-of-order changes are dropped.
    fn transition(&self, id: &str, state: JobState, update: impl FnOnce(&mut EditJob)) {
        let event = {
            let mut shared = self.lock();
            let Some(job) = shared.jobs.get_mut(id) else { return };
            if !job.state.allows(&state) {
                log::warn!("job {id}: ignoring transition {:?} -> {state:?}", job.state);
                return;
            }
            update(job);
            let now = now_unix_ms();
            let event = JobEvent {
                seq: job.events.len() as u64 + 1,
                job_id: id.to_string(),
                state: state.clone(),
                at_unix_ms: now,
            };
            job.state = state;
            job.updated_unix_ms = now;
            job.events.push(event.clone());
            if let Err(e) = self.job_store.save(job) {
                log::error!("job {id}: could not persist state: {e}");
            }
            event
        };
        let _ = self.events.send(event);
    }
}

/// Cheap handle; clones share the same service.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

impl Service {
    /// Opens the store at `config.store_path`. Queued jobs are re-queued;
    /// jobs that were running when the previous process stopped are marked
    /// failed.
    pub fn open(
        config: Config,
        backend: Arc<dyn DiffusionBackend>,
        segmenter: Option<Arc<dyn SegmentationClient>>,
    ) -> Result<Self, InterfaceError> {
        let root = config.store_path.clone();
        let blobs = BlobStore::open(&root)?;
        let job_store = JobStore::open(&root)?;
        let segmenter = segmenter.or_else(|| {
            config
                .segmentation_endpoint
                .as_deref()
                .map(|e| Arc::new(HttpSegmenter::new(e)) as Arc<dyn SegmentationClient>)
        });
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let inner = Arc::new(Inner {
            backend,
            blobs,
            job_store,
            results_dir: root.join("results"),
            shared: Mutex::new(Shared {
                jobs: HashMap::new(),
                queue: JobQueue::new(config.queue_size),
                shutdown: false,
            }),
            wake: Condvar::new(),
            events,
            resolver: MaskResolver::new(segmenter),
            workers: Mutex::new(Vec::new()),
            config,
        });
        let recovered = inner.job_store.load_all()?;
        let mut interrupted = Vec::new();
        {
            let mut shared = inner.lock();
            for job in recovered {
                match job.state {
                    JobState::Queued => shared.queue.push_recovered(job.job_id.clone(), job.request.priority),
                    ref s if s.is_running() => interrupted.push(job.job_id.clone()),
                    _ => {}
                }
                shared.jobs.insert(job.job_id.clone(), job);
            }
        }
        for id in interrupted {
            inner.transition(
                &id,
                JobState::Failed {
                    reason: "interrupted by service restart".into(),
                },
                |_| {},
            );
        }
        Ok(Self { inner })
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    /// Starts `max_concurrent_jobs` pipeline threads.
    pub fn start_workers(&self) {
        let mut workers = self.inner.workers.lock().unwrap_or_else(|p| p.into_inner());
        for n in 0..self.inner.config.max_concurrent_jobs {
            let inner = self.inner.clone();
            let handle = std::thread::Builder::new()
                .name(format!("cpam-worker-{n}"))
                .spawn(move || worker_loop(&inner))
                .expect("spawning worker");
            workers.push(handle);
        }
    }

    /// Stops workers after their current job.
    pub fn shutdown(&self) {
        self.inner.lock().shutdown = true;
        self.inner.wake.notify_all();
        let handles: Vec<_> = std::mem::take(&mut *self.inner.workers.lock().unwrap_or_else(|p| p.into_inner()));
        for h in handles {
            let _ = h.join();
        }
    }

    pub fn job(&self, id: &str) -> Option<EditJob> {
        self.inner.job(id)
    }

    pub fn queued(&self) -> usize {
        self.inner.lock().queue.len()
    }

    pub fn submit(&self, request: JobRequest) -> Result<EditJob, ApiError> {
        submit(&self.inner, request)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(healthz))
            .route("/images", post(post_image))
            .route("/images/{id}", get(get_image))
            .route("/masks", post(post_mask))
            .route("/masks/{id}", get(get_mask))
            .route("/edits", post(post_edit))
            .route("/edits/{id}", get(get_edit))
            .route("/edits/{id}/result", get(get_result))
            .route("/edits/{id}/events", get(get_events))
            .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
            .with_state(self.inner.clone())
    }
}

fn worker_loop(inner: &Arc<Inner>) {
    loop {
        let id = {
            let mut shared = inner.lock();
            loop {
                if shared.shutdown {
                    return;
                }
                if let Some(id) = shared.queue.pop() {
                    break id;
                }
                shared = inner.wake.wait(shared).unwrap_or_else(|p| p.into_inner());
            }
        };
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| run_job(inner, &id)))
            .unwrap_or_else(|_| Err("pipeline panicked".to_string()));
        if let Err(reason) = outcome {
            log::error!("job {id} failed: {reason}");
            inner.transition(&id, JobState::Failed { reason }, |_| {});
        }
    }
}

struct JobObserver<'a> {
    inner: &'a Inner,
    id: &'a str,
}

impl EditObserver for JobObserver<'_> {
    fn on_phase(&mut self, phase: Phase) {
        match phase {
            Phase::Inverting => self.inner.transition(self.id, JobState::Inverting, |_| {}),
            Phase::Decoding => self.inner.transition(self.id, JobState::Decoding, |_| {}),
            Phase::Denoising => {}
        }
    }

    fn on_step(&mut self, k: usize, n: usize) {
        self.inner.transition(self.id, JobState::Denoising { step: k, of: n }, |_| {});
    }
}

fn run_job(inner: &Inner, id: &str) -> Result<(), String> {
    let job = inner.job(id).ok_or("job vanished")?;
    let req = &job.request;
    let (_, image_bytes) = inner
        .blobs
        .get(BlobKind::Image, &req.image_id)
        .map_err(|e| e.to_string())?
        .ok_or("image blob missing")?;
    let (_, mask_bytes) = inner
        .blobs
        .get(BlobKind::Mask, &req.mask_id)
        .map_err(|e| e.to_string())?
        .ok_or("mask blob missing")?;
    let image = ImageTensor::from_bytes(&image_bytes).map_err(|e| e.to_string())?;
    let mask = SpatialMask::from_png_bytes(&mask_bytes).map_err(|e| e.to_string())?;
    let mut observer = JobObserver { inner, id };
    let result =
        edit_prepared(&image, &mask, &req.params, inner.backend.as_ref(), &mut observer).map_err(|e| e.to_string())?;
    let out = inner.results_dir.join(id).join("edited.png");
    write_run_outputs(&result, req, &out).map_err(|e| e.to_string())?;
    let png = std::fs::read(&out).map_err(|e| e.to_string())?;
    let meta = inner
        .blobs
        .put(BlobKind::Image, &png, result.edited_image.resolution(), "image/png")
        .map_err(|e| e.to_string())?;
    inner.transition(id, JobState::Done, |job| {
        job.result_image_id = Some(meta.id.clone());
        job.config_fingerprint = Some(result.config_fingerprint.clone());
        job.warnings = result.warnings.clone();
    });
    Ok(())
}

fn submit(inner: &Inner, request: JobRequest) -> Result<EditJob, ApiError> {
    request.params.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let image = inner
        .blobs
        .meta(BlobKind::Image, &request.image_id)?
        .ok_or_else(|| ApiError::not_found("image", &request.image_id))?;
    let mask = inner
        .blobs
        .meta(BlobKind::Mask, &request.mask_id)?
        .ok_or_else(|| ApiError::not_found("mask", &request.mask_id))?;
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(ApiError::bad_request(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    let now = now_unix_ms();
    let job = EditJob {
        job_id: uuid::Uuid::new_v4().simple().to_string(),
        request,
        state: JobState::Queued,
        created_unix_ms: now,
        updated_unix_ms: now,
        result_image_id: None,
        config_fingerprint: None,
        warnings: Vec::new(),
        events: vec![],
    };
    {
        let mut shared = inner.lock();
        if shared.shutdown {
            return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down"));
        }
        shared
            .queue
            .push(job.job_id.clone(), job.request.priority)
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue full"))?;
        inner.job_store.save(&job)?;
        shared.jobs.insert(job.job_id.clone(), job.clone());
    }
    inner.wake.notify_one();
    Ok(job)
}

async fn healthz(State(inner): State<Arc<Inner>>) -> Json<serde_json::Value> {
    let (queued, jobs) = {
        let s = inner.lock();
        (s.queue.len(), s.jobs.len())
    };
    Json(json!({
        "status": "ok",
        "backend": inner.backend.fingerprint(),
        "queued": queued,
        "jobs": jobs,
        "max_concurrent_jobs": inner.config.max_concurrent_jobs,
    }))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlobCreated {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

async fn post_image(
    State(inner): State<Arc<Inner>>,
    body: Bytes,
) -> Result<(StatusCode, Json<BlobCreated>), ApiError> {
    blocking(move || {
        let format = image::guess_format(&body).map_err(|e| ApiError::bad_request(format!("not an image: {e}")))?;
        let img = ImageTensor::from_bytes(&body).map_err(|e| ApiError::bad_request(format!("not an image: {e}")))?;
        let meta = inner
            .blobs
            .put(BlobKind::Image, &body, img.resolution(), format.to_mime_type())?;
        Ok((
            StatusCode::CREATED,
            Json(BlobCreated {
                id: meta.id,
                width: meta.width,
                height: meta.height,
            }),
        ))
    })
    .await
}

fn blob_response(inner: &Inner, kind: BlobKind, id: &str) -> Result<Response, ApiError> {
    let what = if kind == BlobKind::Image { "image" } else { "mask" };
    let (meta, bytes) = inner.blobs.get(kind, id)?.ok_or_else(|| ApiError::not_found(what, id))?;
    Ok(([(header::CONTENT_TYPE, meta.media_type)], bytes).into_response())
}

async fn get_image(State(inner): State<Arc<Inner>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || blob_response(&inner, BlobKind::Image, &id)).await
}

async fn get_mask(State(inner): State<Arc<Inner>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    blocking(move || blob_response(&inner, BlobKind::Mask, &id)).await
}

/// JSON body of `POST /masks`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRequest {
    pub image_id: String,
    pub spec: MaskSpec,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskCreated {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub ones: usize,
}

/// Accepts either a painted mask as `image/png` or a JSON [`MaskRequest`]
/// resolved through the segmentation client.
async fn post_mask(
    State(inner): State<Arc<Inner>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<MaskCreated>), ApiError> {
    let is_png = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("image/png"));
    blocking(move || {
        let (mask, bytes) = if is_png {
            let mask = SpatialMask::from_png_bytes(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
            (mask, body.to_vec())
        } else {
            let req: MaskRequest =
                serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid mask request: {e}")))?;
            if matches!(req.spec, MaskSpec::File { .. }) {
                return Err(ApiError::bad_request("file masks are uploaded as image/png"));
            }
            let (_, image_bytes) = inner
                .blobs
                .get(BlobKind::Image, &req.image_id)?
                .ok_or_else(|| ApiError::not_found("image", &req.image_id))?;
            let image = ImageTensor::from_bytes(&image_bytes).map_err(ApiError::internal)?;
            let mask = inner.resolver.resolve(&req.spec, &image)?;
            let png = mask.to_png_bytes().map_err(ApiError::internal)?;
            (mask, png)
        };
        if mask.is_empty() {
            return Err(ApiError::bad_request("mask is empty"));
        }
        let meta = inner.blobs.put(BlobKind::Mask, &bytes, mask.resolution(), "image/png")?;
        Ok((
            StatusCode::CREATED,
            Json(MaskCreated {
                id: meta.id,
                width: meta.width,
                height: meta.height,
                ones: mask.count_ones(),
            }),
        ))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditAccepted {
    pub job_id: String,
    #[serde(flatten)]
    pub state: JobState,
}

async fn post_edit(State(inner): State<Arc<Inner>>, body: Bytes) -> Result<(StatusCode, Json<EditAccepted>), ApiError> {
    let request: JobRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid edit request: {e}")))?;
    blocking(move || {
        let job = submit(&inner, request)?;
        Ok((
            StatusCode::ACCEPTED,
            Json(EditAccepted {
                job_id: job.job_id,
                state: job.state,
            }),
        ))
    })
    .await
}

async fn get_edit(State(inner): State<Arc<Inner>>, Path(id): Path<String>) -> Result<Json<EditJob>, ApiError> {
    inner.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

async fn get_result(State(inner): State<Arc<Inner>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let job = inner.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    match (&job.state, job.result_image_id) {
        (JobState::Done, Some(image_id)) => blocking(move || blob_response(&inner, BlobKind::Image, &image_id)).await,
        (state, _) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {}", serde_json::to_value(state).map(|v| v["state"].to_string()).unwrap_or_default()),
        )),
    }
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

fn sse_event(e: &JobEvent) -> Result<Event, Infallible> {
    Ok(Event::default()
        .id(e.seq.to_string())
        .json_data(e)
        .unwrap_or_else(|_| Event::default().comment("unserializable event")))
}

struct Live {
    inner: Arc<Inner>,
    id: String,
    rx: broadcast::Receiver<JobEvent>,
    last: u64,
    pending: VecDeque<JobEvent>,
    done: bool,
}

/// Step progress as server-sent events. Events already emitted are replayed
/// after the sequence number in `Last-Event-ID` or `?after=`; the stream
/// ends after the terminal event.
async fn get_events(
    State(inner): State<Arc<Inner>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = inner.events.subscribe();
    let job = inner.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .or(q.after)
        .unwrap_or(0);
    let replay: VecDeque<JobEvent> = job.events.iter().filter(|e| e.seq > after).cloned().collect();
    let live = Live {
        inner: inner.clone(),
        id,
        rx,
        last: after,
        pending: replay,
        done: false,
    };
    let stream = stream::unfold(live, |mut s| async move {
        loop {
            if let Some(e) = s.pending.pop_front() {
                if e.seq <= s.last {
                    continue;
                }
                s.last = e.seq;
                s.done = e.state.is_terminal();
                return Some((e, s));
            }
            if s.done {
                return None;
            }
            if s.inner.job(&s.id).is_some_and(|j| j.state.is_terminal() && j.events.len() as u64 <= s.last) {
                return None;
            }
            match s.rx.recv().await {
                Ok(e) if e.job_id == s.id => s.pending.push_back(e),
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let last = s.last;
                    if let Some(j) = s.inner.job(&s.id) {
                        s.pending = j.events.into_iter().filter(|e| e.seq > last).collect();
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
    .map(|e| sse_event(&e));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
