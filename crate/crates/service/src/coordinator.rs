//! The coordinator: HTTP job submission, the WebSocket event channel, the
//! embedded broker, and the relay that routes worker events to sessions.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use cvgrid_core::job::{
    expand_job, parse_job_config, ContentHash, EventKind, FailurePayload, ImageRef, JobError, JobEvent, JobId,
    JobSpec, Locator, Scheme, SessionId,
};
use cvgrid_core::storage::{Namespace, ObjectKey, Storage, StorageError};
use futures::{SinkExt, StreamExt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::broker::{Broker, BrokerError, DEFAULT_VISIBILITY_TIMEOUT};
use crate::relay::{serve_relay, PubSubMessage};
use crate::wire::spawn_broker;

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("storage failure: {0}")]
    StorageFailure(#[from] StorageError),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("unknown artifact `{0}`")]
    UnknownArtifact(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("cannot bind {what}: {source}")]
    Bind {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
}

impl From<JobError> for CoordinatorError {
    fn from(e: JobError) -> Self {
        CoordinatorError::ValidationFailed(e.to_string())
    }
}

impl CoordinatorError {
    fn code(&self) -> &'static str {
        match self {
            CoordinatorError::UnknownSession(_) => "unknown_session",
            CoordinatorError::ValidationFailed(_) => "validation_failed",
            CoordinatorError::StorageFailure(_) => "storage_failure",
            CoordinatorError::UnknownJob(_) => "unknown_job",
            CoordinatorError::UnknownArtifact(_) => "unknown_artifact",
            CoordinatorError::Broker(_) => "broker",
            CoordinatorError::Bind { .. } => "bind",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            CoordinatorError::UnknownSession(_) => StatusCode::CONFLICT,
            CoordinatorError::ValidationFailed(_) => StatusCode::BAD_REQUEST,
            CoordinatorError::UnknownJob(_) | CoordinatorError::UnknownArtifact(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for CoordinatorError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.to_string(), "code": self.code() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Accepted,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Failed,
}

impl TaskState {
    fn is_terminal(self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: u32,
    pub state: TaskState,
    pub attempt: u32,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    next_seq: u64,
}

#[derive(Debug, Clone)]
pub struct JobRecord {
    pub job_id: JobId,
    pub spec: JobSpec,
    pub session_id: SessionId,
    pub authenticated: bool,
    pub state: JobState,
    pub tasks: Vec<TaskRecord>,
    pub images: Vec<ImageRef>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    /// Client-visible events in emission order.
    pub events: Vec<JobEvent>,
    job_seq: u64,
    watchers: Vec<SessionId>,
}

impl JobRecord {
    pub fn artifacts(&self) -> Vec<String> {
        self.tasks.iter().flat_map(|t| t.artifacts.iter().cloned()).collect()
    }

    pub fn view(&self) -> Value {
        json!({
            "job_id": self.job_id,
            "functionality": self.spec.exec,
            "session_id": self.session_id,
            "authenticated": self.authenticated,
            "state": self.state,
            "total": self.tasks.len(),
            "completed": self.tasks.iter().filter(|t| t.state == TaskState::Done).count(),
            "failed": self.tasks.iter().filter(|t| t.state == TaskState::Failed).count(),
            "tasks": self.tasks,
            "artifacts": self.artifacts(),
            "images": self.images,
            "events": self.events,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
        })
    }
}

/// Channel message in the event-channel wire format.
pub fn channel_message(event: &JobEvent) -> String {
    json!({
        "type": event.kind.wire_name(),
        "job_id": event.job_id,
        "task": event.task_index,
        "seq": event.seq,
        "payload": event.payload,
    })
    .to_string()
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub relay_received: AtomicU64,
    /// Events whose job or session is unknown.
    pub dropped: AtomicU64,
    /// Events from superseded task attempts or for already finished tasks.
    pub stale: AtomicU64,
    /// Events retained but not pushed because the session is gone.
    pub undelivered: AtomicU64,
}

pub struct AppState {
    pub broker: Broker,
    pub storage: Arc<Storage>,
    sessions: Mutex<HashMap<SessionId, mpsc::UnboundedSender<String>>>,
    jobs: Mutex<BTreeMap<JobId, JobRecord>>,
    pub metrics: Metrics,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState").field("storage", &self.storage).finish()
    }
}

/// Upload or reference supplied with a submission.
#[derive(Debug, Clone)]
pub enum ImageInput {
    Upload { name: String, bytes: Vec<u8> },
    Reference(Locator),
}

impl AppState {
    pub fn new(broker: Broker, storage: Arc<Storage>) -> Self {
        AppState {
            broker,
            storage,
            sessions: Mutex::new(HashMap::new()),
            jobs: Mutex::new(BTreeMap::new()),
            metrics: Metrics::default(),
        }
    }

    pub fn open_session(&self) -> (SessionId, mpsc::UnboundedReceiver<String>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut sessions = self.sessions.lock();
        let id = loop {
            let id = SessionId::generate();
            if !sessions.contains_key(&id) {
                break id;
            }
        };
        tx.send(json!({ "type": "hello", "session_id": id }).to_string())
            .expect("receiver held");
        sessions.insert(id.clone(), tx);
        (id, rx)
    }

    pub fn close_session(&self, id: &SessionId) {
        self.sessions.lock().remove(id);
    }

    pub fn session_live(&self, id: &SessionId) -> bool {
        self.sessions.lock().contains_key(id)
    }

    pub fn job_view(&self, id: &JobId) -> Result<Value, CoordinatorError> {
        self.jobs
            .lock()
            .get(id)
            .map(JobRecord::view)
            .ok_or_else(|| CoordinatorError::UnknownJob(id.to_string()))
    }

    pub fn job(&self, id: &JobId) -> Option<JobRecord> {
        self.jobs.lock().get(id).cloned()
    }

    pub fn job_ids(&self) -> Vec<JobId> {
        self.jobs.lock().keys().copied().collect()
    }

    fn push(&self, record: &mut JobRecord, event: JobEvent) {
        let text = channel_message(&event);
        record.events.push(event);
        let sessions = self.sessions.lock();
        match sessions.get(&record.session_id) {
            Some(tx) if tx.send(text.clone()).is_ok() => {}
            _ => {
                self.metrics.undelivered.fetch_add(1, Ordering::Relaxed);
            }
        }
        for w in &record.watchers {
            if let Some(tx) = sessions.get(w) {
                let _ = tx.send(text.clone());
            }
        }
    }

    fn job_event(&self, record: &mut JobRecord, kind: EventKind, payload: String) {
        let event = JobEvent {
            job_id: record.job_id,
            task_index: None,
            seq: record.job_seq,
            kind,
            payload,
        };
        record.job_seq += 1;
        self.push(record, event);
    }

    /// Reads every image referenced by `inputs` into the images namespace.
    pub fn ingest(&self, spec: &JobSpec, inputs: Vec<ImageInput>) -> Result<Vec<ImageRef>, CoordinatorError> {
        let inputs = if inputs.is_empty() {
            vec![ImageInput::Reference(spec.active_config().path.clone())]
        } else {
            inputs
        };
        let mut manifest = Vec::new();
        let mut store = |scheme: Scheme, path: String, bytes: &[u8]| -> Result<(), CoordinatorError> {
            self.storage.store_object(Namespace::Images, bytes)?;
            manifest.push(ImageRef {
                scheme,
                path,
                content_hash: Some(ContentHash::of(bytes)),
            });
            Ok(())
        };
        for input in inputs {
            match input {
                ImageInput::Upload { name, bytes } => store(Scheme::Local, format!("upload/{name}"), &bytes)?,
                ImageInput::Reference(loc) => {
                    let resolved = self.storage.resolve(&loc)?;
                    let files = if resolved.is_dir() {
                        self.storage.list_images(&loc)?
                    } else {
                        vec![loc]
                    };
                    for f in files {
                        let bytes = self.storage.read_locator(&f)?;
                        store(f.scheme, f.path.clone(), &bytes)?;
                    }
                }
            }
        }
        Ok(manifest)
    }

    /// Registers a job, emits `accepted`, and publishes its tasks.
    pub fn submit(
        &self,
        session: &SessionId,
        spec: JobSpec,
        manifest: Vec<ImageRef>,
        authenticated: bool,
    ) -> Result<(JobId, usize), CoordinatorError> {
        if !self.session_live(session) {
            return Err(CoordinatorError::UnknownSession(session.0.clone()));
        }
        spec.validate()?;
        let job_id = JobId::new();
        let envelopes = expand_job(&spec, manifest.clone(), session, job_id)?;
        let n = envelopes.len();
        {
            let mut jobs = self.jobs.lock();
            let mut record = JobRecord {
                job_id,
                spec,
                session_id: session.clone(),
                authenticated,
                state: JobState::Accepted,
                tasks: (0..n as u32)
                    .map(|index| TaskRecord {
                        index,
                        state: TaskState::Pending,
                        attempt: 0,
                        artifacts: Vec::new(),
                        summary: None,
                        error: None,
                        next_seq: 0,
                    })
                    .collect(),
                images: manifest,
                created_at: Utc::now(),
                finished_at: None,
                events: Vec::new(),
                job_seq: 0,
                watchers: Vec::new(),
            };
            self.job_event(&mut record, EventKind::Accepted, json!({ "tasks": n }).to_string());
            jobs.insert(job_id, record);
        }
        for env in &envelopes {
            self.broker.publish(env.functionality.name(), env.to_json())?;
        }
        tracing::info!(%job_id, tasks = n, "job accepted");
        Ok((job_id, n))
    }

    /// Replays the retained events of `job` to `session` and keeps it attached for live events.
    pub fn subscribe(&self, session: &SessionId, job: &JobId) -> Result<(), CoordinatorError> {
        let mut jobs = self.jobs.lock();
        let record = jobs.get_mut(job).ok_or_else(|| CoordinatorError::UnknownJob(job.to_string()))?;
        if &record.session_id == session || record.watchers.contains(session) {
            return Ok(());
        }
        let sessions = self.sessions.lock();
        let tx = sessions
            .get(session)
            .ok_or_else(|| CoordinatorError::UnknownSession(session.0.clone()))?;
        for e in &record.events {
            let _ = tx.send(channel_message(e));
        }
        drop(sessions);
        record.watchers.push(session.clone());
        Ok(())
    }

    /// Routes one worker event to the owning session and updates the job record.
    pub fn relay_event(&self, msg: PubSubMessage) {
        self.metrics.relay_received.fetch_add(1, Ordering::Relaxed);
        let mut jobs = self.jobs.lock();
        let Some(record) = jobs.get_mut(&msg.event.job_id) else {
            self.metrics.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        };
        if record.session_id != msg.session_id {
            self.metrics.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let Some(idx) = msg.event.task_index.map(|t| t as usize).filter(|t| *t < record.tasks.len()) else {
            self.metrics.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        };
        let task = &mut record.tasks[idx];
        if task.state.is_terminal() || msg.attempt < task.attempt {
            self.metrics.stale.fetch_add(1, Ordering::Relaxed);
            return;
        }
        task.attempt = msg.attempt;
        match msg.event.kind {
            EventKind::TaskStarted => task.state = TaskState::Running,
            EventKind::Artifact => task.artifacts.push(msg.event.payload.clone()),
            EventKind::TaskDone => {
                task.state = TaskState::Done;
                task.summary = serde_json::from_str(&msg.event.payload).ok();
            }
            EventKind::Failed => {
                let failure: Option<FailurePayload> = serde_json::from_str(&msg.event.payload).ok();
                let is_final = failure.as_ref().is_none_or(|f| f.is_final);
                if is_final {
                    task.state = TaskState::Failed;
                    task.error = Some(failure.map_or_else(|| msg.event.payload.clone(), |f| f.error));
                } else {
                    // The retry produces its own artifacts.
                    task.artifacts.clear();
                }
            }
            EventKind::OutputLine => {}
            EventKind::Accepted | EventKind::JobDone => {
                self.metrics.dropped.fetch_add(1, Ordering::Relaxed);
                return;
            }
        }
        let seq = task.next_seq;
        task.next_seq += 1;
        if record.state == JobState::Accepted {
            record.state = JobState::Running;
        }
        let event = JobEvent { seq, ..msg.event };
        self.push(record, event);
        if record.tasks.iter().all(|t| t.state.is_terminal()) {
            let failed: Vec<u32> = record
                .tasks
                .iter()
                .filter(|t| t.state == TaskState::Failed)
                .map(|t| t.index)
                .collect();
            let state = if failed.is_empty() {
                JobState::Done
            } else {
                let payload = FailurePayload {
                    error: format!("{} of {} tasks failed: {:?}", failed.len(), record.tasks.len(), failed),
                    attempt: 0,
                    is_final: true,
                };
                let text = serde_json::to_string(&payload).expect("serializable");
                self.job_event(record, EventKind::Failed, text);
                JobState::Failed
            };
            record.state = state;
            record.finished_at = Some(Utc::now());
            self.job_event(record, EventKind::JobDone, json!({ "state": state }).to_string());
            tracing::info!(job_id = %record.job_id, ?state, "job finished");
        }
    }

    pub fn metrics_view(&self) -> Value {
        let m = &self.metrics;
        json!({
            "relay_received": m.relay_received.load(Ordering::Relaxed),
            "dropped": m.dropped.load(Ordering::Relaxed),
            "stale": m.stale.load(Ordering::Relaxed),
            "undelivered": m.undelivered.load(Ordering::Relaxed),
            "sessions": self.sessions.lock().len(),
            "jobs": self.jobs.lock().len(),
            "queues": self.broker.all_stats(),
            "cache": {
                "hits": self.storage.cache_stats().snapshot().0,
                "misses": self.storage.cache_stats().snapshot().1,
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub http_addr: SocketAddr,
    pub broker_addr: SocketAddr,
    pub relay_addr: SocketAddr,
    pub storage_root: PathBuf,
    pub dropbox_root: Option<PathBuf>,
    pub console_dir: Option<PathBuf>,
    pub visibility_timeout: Duration,
}

impl CoordinatorConfig {
    /// Ephemeral loopback ports for every listener.
    pub fn ephemeral(storage_root: impl Into<PathBuf>) -> Self {
        let any: SocketAddr = "127.0.0.1:0".parse().expect("valid");
        CoordinatorConfig {
            http_addr: any,
            broker_addr: any,
            relay_addr: any,
            storage_root: storage_root.into(),
            dropbox_root: None,
            console_dir: None,
            visibility_timeout: DEFAULT_VISIBILITY_TIMEOUT,
        }
    }
}

pub struct CoordinatorHandle {
    pub http_addr: SocketAddr,
    pub broker_addr: SocketAddr,
    pub relay_addr: SocketAddr,
    pub state: Arc<AppState>,
    tasks: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for CoordinatorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoordinatorHandle")
            .field("http_addr", &self.http_addr)
            .field("broker_addr", &self.broker_addr)
            .field("relay_addr", &self.relay_addr)
            .finish()
    }
}

impl CoordinatorHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub fn shutdown(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }

    /// Runs until any listener task exits.
    pub async fn wait(mut self) {
        if let Some(first) = self.tasks.first_mut() {
            let _ = first.await;
        }
    }
}

impl Drop for CoordinatorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub async fn start(config: CoordinatorConfig) -> Result<CoordinatorHandle, CoordinatorError> {
    let mut storage = Storage::open(&config.storage_root)?;
    if let Some(d) = &config.dropbox_root {
        storage = storage.with_dropbox_root(d)?;
    }
    let broker = Broker::with_default_bindings(config.visibility_timeout);
    let state = Arc::new(AppState::new(broker.clone(), Arc::new(storage)));

    let (broker_addr, broker_task) = spawn_broker(config.broker_addr, broker)
        .await
        .map_err(|source| CoordinatorError::Bind { what: "broker", source })?;

    let relay_listener = TcpListener::bind(config.relay_addr)
        .await
        .map_err(|source| CoordinatorError::Bind { what: "relay", source })?;
    let relay_addr = relay_listener.local_addr().map_err(|source| CoordinatorError::Bind { what: "relay", source })?;
    let (tx, mut rx) = mpsc::unbounded_channel();
    let relay_task = tokio::spawn(serve_relay(relay_listener, tx));
    let relay_state = state.clone();
    let ingest_task = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            relay_state.relay_event(msg);
        }
    });

    let http_listener = TcpListener::bind(config.http_addr)
        .await
        .map_err(|source| CoordinatorError::Bind { what: "http", source })?;
    let http_addr = http_listener.local_addr().map_err(|source| CoordinatorError::Bind { what: "http", source })?;
    let app = router(state.clone(), config.console_dir.clone());
    let http_task = tokio::spawn(async move {
        if let Err(e) = axum::serve(http_listener, app).await {
            tracing::error!(error = %e, "http server stopped");
        }
    });
    tracing::info!(%http_addr, %broker_addr, %relay_addr, "coordinator listening");
    Ok(CoordinatorHandle {
        http_addr,
        broker_addr,
        relay_addr,
        state,
        tasks: vec![http_task, broker_task, relay_task, ingest_task],
    })
}

pub fn router(state: Arc<AppState>, console_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/jobs", get(list_jobs).post(submit_job))
        .route("/api/v1/jobs/{id}", get(job_status))
        .route("/api/v1/jobs/{id}/artifacts/{key}", get(job_artifact))
        .route("/api/v1/metrics", get(metrics))
        .route("/ws", get(ws_upgrade))
        .layer(DefaultBodyLimit::max(512 * 1024 * 1024))
        .with_state(state);
    match console_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "jobs": state.job_ids() }))
}

async fn metrics(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.metrics_view())
}

fn parse_job_id(raw: &str) -> Result<JobId, CoordinatorError> {
    raw.parse().map_err(|_| CoordinatorError::UnknownJob(raw.to_string()))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, CoordinatorError> {
    Ok(Json(state.job_view(&parse_job_id(&id)?)?))
}

async fn job_artifact(
    State(state): State<Arc<AppState>>,
    Path((id, key)): Path<(String, String)>,
) -> Result<Vec<u8>, CoordinatorError> {
    let job = state
        .job(&parse_job_id(&id)?)
        .ok_or_else(|| CoordinatorError::UnknownJob(id.clone()))?;
    if !job.artifacts().contains(&key) {
        return Err(CoordinatorError::UnknownArtifact(key));
    }
    let object = ObjectKey::new(Namespace::Artifacts, key)?;
    let storage = state.storage.clone();
    let bytes = tokio::task::spawn_blocking(move || storage.fetch_object(&object))
        .await
        .expect("fetch task panicked")?;
    Ok(bytes)
}

async fn submit_job(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<Value>), CoordinatorError> {
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let session = SessionId(header("x-session-id").ok_or_else(|| CoordinatorError::UnknownSession(String::new()))?);
    if !state.session_live(&session) {
        return Err(CoordinatorError::UnknownSession(session.0));
    }
    let authenticated = header("x-user-token").is_some_and(|t| !t.is_empty());
    let bad = |e: axum::extract::multipart::MultipartError| CoordinatorError::ValidationFailed(e.to_string());
    let mut spec_text = None;
    let mut inputs = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        match field.name().unwrap_or_default() {
            "spec" => spec_text = Some(field.text().await.map_err(bad)?),
            "image" => {
                let name = field
                    .file_name()
                    .map(|n| n.rsplit(['/', '\\']).next().unwrap_or(n).to_string())
                    .unwrap_or_else(|| format!("image{}", inputs.len()));
                let bytes = field.bytes().await.map_err(bad)?.to_vec();
                inputs.push(ImageInput::Upload { name, bytes });
            }
            "refs" => {
                let text = field.text().await.map_err(bad)?;
                let refs: Vec<String> = match serde_json::from_str::<Vec<String>>(&text) {
                    Ok(list) => list,
                    Err(_) => text.lines().map(str::to_string).collect(),
                };
                for r in refs.iter().map(|r| r.trim()).filter(|r| !r.is_empty()) {
                    let loc: Locator = r.parse()?;
                    inputs.push(ImageInput::Reference(loc));
                }
            }
            other => return Err(CoordinatorError::ValidationFailed(format!("unexpected form field `{other}`"))),
        }
    }
    let spec = parse_job_config(&spec_text.ok_or_else(|| CoordinatorError::ValidationFailed("missing `spec` part".into()))?)?;
    let ingest_state = state.clone();
    let ingest_spec = spec.clone();
    let manifest = tokio::task::spawn_blocking(move || ingest_state.ingest(&ingest_spec, inputs))
        .await
        .expect("ingest task panicked")?;
    let (job_id, tasks) = state.submit(&session, spec, manifest, authenticated)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id, "tasks": tasks }))))
}

async fn ws_upgrade(State(state): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| run_channel(state, socket))
}

#[derive(Debug, Deserialize)]
struct ClientMessage {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    job_id: Option<String>,
}

async fn run_channel(state: Arc<AppState>, socket: WebSocket) {
    let (session, mut rx) = state.open_session();
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let Ok(parsed) = serde_json::from_str::<ClientMessage>(&text) else {
            continue;
        };
        if parsed.kind == "subscribe" {
            let result = parsed
                .job_id
                .as_deref()
                .ok_or_else(|| CoordinatorError::UnknownJob(String::new()))
                .and_then(parse_job_id)
                .and_then(|id| state.subscribe(&session, &id));
            if let Err(e) = result {
                tracing::debug!(error = %e, %session, "subscribe rejected");
            }
        }
    }
    state.close_session(&session);
    writer.abort();
}

#[cfg(test)]
mod tests {
    use super::*;
    use cvgrid_core::job::{Functionality, TaskEnvelope};

    fn state() -> (Arc<AppState>, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let storage = Storage::open(dir.path()).unwrap();
        (
            Arc::new(AppState::new(Broker::with_default_bindings(DEFAULT_VISIBILITY_TIMEOUT), Arc::new(storage))),
            dir,
        )
    }

    fn spec(exec: &str) -> JobSpec {
        parse_job_config(&format!(
            r#"{{"exec": "{exec}", "maxim": 10, "config": [{{"name": "{exec}", "path": "local:/tmp", "output": "/tmp/out", "params": {{}}}}]}}"#
        ))
        .unwrap()
    }

    fn refs(n: usize) -> Vec<ImageRef> {
        (0..n)
            .map(|i| ImageRef {
                scheme: Scheme::Local,
                path: format!("i{i}.png"),
                content_hash: Some(ContentHash::of(&[i as u8])),
            })
            .collect()
    }

    fn event(job: JobId, task: u32, kind: EventKind, payload: &str) -> JobEvent {
        JobEvent {
            job_id: job,
            task_index: Some(task),
            seq: 0,
            kind,
            payload: payload.to_string(),
        }
    }

    fn drain(rx: &mut mpsc::UnboundedReceiver<String>) -> Vec<Value> {
        std::iter::from_fn(|| rx.try_recv().ok())
            .map(|t| serde_json::from_str(&t).unwrap())
            .collect()
    }

    #[test]
    fn sessions_are_unique_and_purged() {
        let (st, _d) = state();
        let (a, mut rx) = st.open_session();
        let (b, _rx) = st.open_session();
        assert_ne!(a, b);
        let hello = drain(&mut rx);
        assert_eq!(hello[0], json!({"type": "hello", "session_id": a.0}));
        st.close_session(&a);
        assert!(!st.session_live(&a));
        assert!(matches!(
            st.submit(&a, spec("classify"), refs(1), false),
            Err(CoordinatorError::UnknownSession(_))
        ));
    }

    #[test]
    fn submission_routes_tasks_and_precedes_completion() {
        let (st, _d) = state();
        let (s, _rx) = st.open_session();
        let (job, n) = st.submit(&s, spec("classify"), refs(3), false).unwrap();
        assert_eq!(n, 3);
        let queued = st.broker.peek_buffer("classification.gpu").unwrap();
        assert_eq!(queued.len(), 3);
        let env = TaskEnvelope::from_json(&queued[0]).unwrap();
        assert_eq!((env.job_id, env.functionality), (job, Functionality::Classify));
        assert_eq!(st.job(&job).unwrap().state, JobState::Accepted);
        assert!(matches!(
            st.submit(&s, spec("classify"), refs(11), false),
            Err(CoordinatorError::ValidationFailed(_))
        ));
    }

    #[test]
    fn relay_orders_renumbers_and_finishes() {
        let (st, _d) = state();
        let (s, mut rx) = st.open_session();
        let (job, _) = st.submit(&s, spec("vip"), refs(2), false).unwrap();
        let send = |task, kind, payload: &str, attempt| {
            st.relay_event(PubSubMessage {
                session_id: s.clone(),
                event: event(job, task, kind, payload),
                attempt,
            })
        };
        send(0, EventKind::TaskStarted, "", 1);
        send(0, EventKind::OutputLine, "a", 1);
        let fail = serde_json::to_string(&FailurePayload {
            error: "boom".into(),
            attempt: 1,
            is_final: false,
        })
        .unwrap();
        send(0, EventKind::Failed, &fail, 1);
        send(0, EventKind::TaskStarted, "", 2);
        // A straggler from the superseded attempt is dropped.
        send(0, EventKind::OutputLine, "late", 1);
        send(0, EventKind::Artifact, "k0", 2);
        send(0, EventKind::TaskDone, "{}", 2);
        send(1, EventKind::TaskStarted, "", 1);
        assert_eq!(st.job(&job).unwrap().state, JobState::Running);
        send(1, EventKind::TaskDone, "{}", 1);
        let msgs = drain(&mut rx);
        let task0: Vec<u64> = msgs.iter().filter(|m| m["task"] == 0).map(|m| m["seq"].as_u64().unwrap()).collect();
        assert_eq!(task0, vec![0, 1, 2, 3, 4, 5]);
        assert!(msgs.iter().all(|m| m["payload"] != "late"));
        let last = msgs.last().unwrap();
        assert_eq!(last["type"], "job_done");
        assert_eq!(last["payload"], json!({"state": "done"}).to_string());
        let rec = st.job(&job).unwrap();
        assert_eq!(rec.state, JobState::Done);
        assert_eq!(rec.artifacts(), vec!["k0".to_string()]);
        assert_eq!(st.metrics.stale.load(Ordering::Relaxed), 1);
        // Late events after completion change nothing.
        send(1, EventKind::OutputLine, "after", 1);
        assert_eq!(st.job(&job).unwrap().events.len(), rec.events.len());
    }

    #[test]
    fn final_failure_fails_job_and_orphans_are_counted() {
        let (st, _d) = state();
        let (s, mut rx) = st.open_session();
        let (job, _) = st.submit(&s, spec("ImageStitch"), refs(2), false).unwrap();
        let fail = serde_json::to_string(&FailurePayload {
            error: "bad".into(),
            attempt: 2,
            is_final: true,
        })
        .unwrap();
        st.relay_event(PubSubMessage {
            session_id: s.clone(),
            event: event(job, 0, EventKind::Failed, &fail),
            attempt: 2,
        });
        let msgs = drain(&mut rx);
        let kinds: Vec<&str> = msgs.iter().map(|m| m["type"].as_str().unwrap()).collect();
        assert_eq!(kinds, vec!["hello", "accepted", "failed", "failed", "job_done"]);
        assert_eq!(st.job(&job).unwrap().state, JobState::Failed);
        st.relay_event(PubSubMessage {
            session_id: s.clone(),
            event: event(JobId::new(), 0, EventKind::OutputLine, "x"),
            attempt: 1,
        });
        assert_eq!(st.metrics.dropped.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn disconnected_sessions_retain_and_subscribers_replay() {
        let (st, _d) = state();
        let (s, rx) = st.open_session();
        let (job, _) = st.submit(&s, spec("vip"), refs(1), false).unwrap();
        drop(rx);
        st.close_session(&s);
        st.relay_event(PubSubMessage {
            session_id: s.clone(),
            event: event(job, 0, EventKind::OutputLine, "kept"),
            attempt: 1,
        });
        assert!(st.metrics.undelivered.load(Ordering::Relaxed) >= 1);
        let (watcher, mut wrx) = st.open_session();
        st.subscribe(&watcher, &job).unwrap();
        st.relay_event(PubSubMessage {
            session_id: s.clone(),
            event: event(job, 0, EventKind::OutputLine, "live"),
            attempt: 1,
        });
        let payloads: Vec<String> = drain(&mut wrx)
            .iter()
            .skip(1)
            .map(|m| m["payload"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(payloads, vec![r#"{"tasks":1}"#, "kept", "live"]);
    }
}
