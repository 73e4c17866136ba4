//! Worker runtime: queue subscription, task execution, and event emission.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cvgrid_core::graph::Executor;
use cvgrid_core::job::{
    EventKind, FailurePayload, Functionality, ImageRef, JobEvent, ResourceClass, SessionId, TaskEnvelope,
};
use cvgrid_core::storage::{Namespace, ObjectKey, Storage, StorageError};
use parking_lot::Mutex;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinHandle;

use crate::broker::{BrokerError, Delivery};
use crate::handlers;
use crate::relay::{PubSubMessage, RelayPublisher, DEFAULT_BUFFER_LIMIT};
use crate::wire::{BrokerClient, SharedClient};

/// Attempts after which a failing task is acknowledged as failed.
pub const POISON_CAP: u32 = 2;

const POP_WAIT: Duration = Duration::from_millis(200);

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("invalid worker profile: {0}")]
    InvalidProfile(String),
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(BrokerError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error("executor: {0}")]
    Executor(String),
}

/// Failure of a single task, reported to the client as a `failed` event.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("FetchFailure: {0}")]
    FetchFailure(String),
    #[error("HandlerError: {0}")]
    HandlerError(String),
    #[error("StorageFailure: {0}")]
    StorageFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub resource_classes: BTreeSet<ResourceClass>,
    pub slots: usize,
    pub heartbeat: Duration,
}

impl WorkerProfile {
    pub fn new(
        worker_id: impl Into<String>,
        classes: impl IntoIterator<Item = ResourceClass>,
        slots: usize,
    ) -> Result<Self, WorkerError> {
        let profile = WorkerProfile {
            worker_id: worker_id.into(),
            resource_classes: classes.into_iter().collect(),
            slots,
            heartbeat: Duration::from_secs(5),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), WorkerError> {
        if self.resource_classes.is_empty() {
            return Err(WorkerError::InvalidProfile("no resource classes".into()));
        }
        if self.slots == 0 {
            return Err(WorkerError::InvalidProfile("slots must be at least 1".into()));
        }
        if self.heartbeat.is_zero() {
            return Err(WorkerError::InvalidProfile("heartbeat interval must be positive".into()));
        }
        Ok(())
    }
}

/// Event emitter for one task attempt. Sequence numbers are task-local.
pub struct EventSink {
    publisher: RelayPublisher,
    session_id: SessionId,
    job_id: cvgrid_core::job::JobId,
    task_index: u32,
    attempt: u32,
    seq: AtomicU64,
    alive: Arc<AtomicBool>,
}

impl EventSink {
    pub fn new(publisher: RelayPublisher, envelope: &TaskEnvelope, attempt: u32, alive: Arc<AtomicBool>) -> Self {
        EventSink {
            publisher,
            session_id: envelope.session_id.clone(),
            job_id: envelope.job_id,
            task_index: envelope.task_index,
            attempt,
            seq: AtomicU64::new(0),
            alive,
        }
    }

    pub fn emit(&self, kind: EventKind, payload: impl Into<String>) {
        if !self.alive.load(Ordering::SeqCst) {
            return;
        }
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        self.publisher.publish(PubSubMessage {
            session_id: self.session_id.clone(),
            event: JobEvent {
                job_id: self.job_id,
                task_index: Some(self.task_index),
                seq,
                kind,
                payload: payload.into(),
            },
            attempt: self.attempt,
        });
    }

    pub fn line(&self, text: impl Into<String>) {
        self.emit(EventKind::OutputLine, text);
    }

    pub fn emitted(&self) -> u64 {
        self.seq.load(Ordering::SeqCst)
    }
}

/// One fetched input image.
#[derive(Debug, Clone)]
pub struct TaskInput {
    pub image: ImageRef,
    pub bytes: Vec<u8>,
}

pub struct TaskContext<'a> {
    pub envelope: &'a TaskEnvelope,
    pub inputs: &'a [TaskInput],
    pub storage: &'a Storage,
    pub sink: &'a EventSink,
    pub executor: &'a Executor,
}

impl TaskContext<'_> {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.envelope.params.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Default)]
pub struct HandlerOutput {
    /// Artifact name (unique within the task) and bytes.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub summary: Value,
}

/// The in-process contract every functionality implements.
pub trait Handler: Send + Sync {
    fn run(&self, ctx: &TaskContext<'_>) -> Result<HandlerOutput, String>;
}

#[derive(Clone)]
pub struct FunctionalityRegistry {
    handlers: BTreeMap<Functionality, Arc<dyn Handler>>,
}

impl std::fmt::Debug for FunctionalityRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.handlers.keys()).finish()
    }
}

impl FunctionalityRegistry {
    pub fn empty() -> Self {
        FunctionalityRegistry {
            handlers: BTreeMap::new(),
        }
    }

    /// Handlers for every functionality the job model accepts.
    pub fn standard() -> Self {
        FunctionalityRegistry::empty()
            .with(Functionality::Classify, Arc::new(handlers::ClassifyHandler))
            .with(Functionality::Features, Arc::new(handlers::FeaturesHandler))
            .with(Functionality::Vip, Arc::new(handlers::VipHandler))
            .with(Functionality::ImageStitch, Arc::new(handlers::StitchHandler))
    }

    pub fn with(mut self, f: Functionality, handler: Arc<dyn Handler>) -> Self {
        self.handlers.insert(f, handler);
        self
    }

    pub fn get(&self, f: Functionality) -> Option<Arc<dyn Handler>> {
        self.handlers.get(&f).cloned()
    }

    pub fn names(&self) -> Vec<Functionality> {
        self.handlers.keys().copied().collect()
    }
}

#[derive(Debug, Default)]
pub struct WorkerStats {
    pub running: AtomicUsize,
    pub max_running: AtomicUsize,
    pub acked: AtomicU64,
    pub nacked: AtomicU64,
    pub failed_final: AtomicU64,
    /// (functionality, resource class) of every task this worker started.
    pub executed: Mutex<Vec<(Functionality, ResourceClass)>>,
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub profile: WorkerProfile,
    pub broker_addr: SocketAddr,
    pub relay_addr: SocketAddr,
    pub storage_root: PathBuf,
    pub dropbox_root: Option<PathBuf>,
    pub threads: usize,
    pub connect_attempts: u32,
}

impl WorkerConfig {
    pub fn new(profile: WorkerProfile, broker_addr: SocketAddr, relay_addr: SocketAddr, storage_root: impl Into<PathBuf>) -> Self {
        WorkerConfig {
            profile,
            broker_addr,
            relay_addr,
            storage_root: storage_root.into(),
            dropbox_root: None,
            threads: 2,
            connect_attempts: 5,
        }
    }
}

struct Runtime {
    profile: WorkerProfile,
    registry: FunctionalityRegistry,
    storage: Arc<Storage>,
    executor: Arc<Executor>,
    publisher: RelayPublisher,
    alive: Arc<AtomicBool>,
    stats: Arc<WorkerStats>,
    slots: Arc<Semaphore>,
}

pub struct WorkerHandle {
    pub worker_id: String,
    subscriptions: Vec<String>,
    alive: Arc<AtomicBool>,
    publisher: RelayPublisher,
    stats: Arc<WorkerStats>,
    storage: Arc<Storage>,
    tasks: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl std::fmt::Debug for WorkerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerHandle")
            .field("worker_id", &self.worker_id)
            .field("subscriptions", &self.subscriptions)
            .finish()
    }
}

impl WorkerHandle {
    pub fn subscriptions(&self) -> &[String] {
        &self.subscriptions
    }

    pub fn stats(&self) -> &WorkerStats {
        &self.stats
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Simulates abrupt worker death: connections drop without acks and no
    /// further events leave the worker.
    pub fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
        self.publisher.close();
        for t in self.tasks.lock().drain(..) {
            t.abort();
        }
    }

    /// Runs until killed.
    pub async fn wait(&self) {
        while self.is_alive() {
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Connects to the broker, subscribes to every queue this profile can
/// serve, and starts the pull loops.
pub async fn register_worker(config: WorkerConfig, registry: FunctionalityRegistry) -> Result<WorkerHandle, WorkerError> {
    config.profile.validate()?;
    let mut storage = Storage::open(&config.storage_root)?;
    if let Some(d) = &config.dropbox_root {
        storage = storage.with_dropbox_root(d)?;
    }
    let storage = Arc::new(storage);
    let executor = Arc::new(Executor::new(config.threads).map_err(|e| WorkerError::Executor(e.to_string()))?);
    let id = config.profile.worker_id.clone();
    let mut control = BrokerClient::connect_with_retry(
        config.broker_addr,
        &format!("{id}/control"),
        config.connect_attempts,
        Duration::from_millis(50),
    )
    .await
    .map_err(WorkerError::BrokerUnreachable)?;
    let mut queues = BTreeSet::new();
    for b in control.bindings().await.map_err(WorkerError::BrokerUnreachable)? {
        let class = b.routing_key.parse::<Functionality>().map(Functionality::resource_class);
        if let Ok(class) = class {
            if config.profile.resource_classes.contains(&class) {
                queues.insert(b.queue_name);
            }
        }
    }
    drop(control);

    let alive = Arc::new(AtomicBool::new(true));
    let publisher = RelayPublisher::spawn(config.relay_addr, DEFAULT_BUFFER_LIMIT);
    let stats = Arc::new(WorkerStats::default());
    let runtime = Arc::new(Runtime {
        slots: Arc::new(Semaphore::new(config.profile.slots)),
        profile: config.profile.clone(),
        registry,
        storage: storage.clone(),
        executor,
        publisher: publisher.clone(),
        alive: alive.clone(),
        stats: stats.clone(),
    });
    let tasks: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::new(Mutex::new(Vec::new()));
    for queue in &queues {
        let client = BrokerClient::connect_with_retry(
            config.broker_addr,
            &format!("{id}/{queue}"),
            config.connect_attempts,
            Duration::from_millis(50),
        )
        .await
        .map_err(WorkerError::BrokerUnreachable)?;
        let client: SharedClient = Arc::new(tokio::sync::Mutex::new(client));
        let hb_client = client.clone();
        let hb_alive = alive.clone();
        let interval = config.profile.heartbeat;
        let heartbeat = tokio::spawn(async move {
            let mut tick = tokio::time::interval(interval);
            while hb_alive.load(Ordering::SeqCst) {
                tick.tick().await;
                if hb_client.lock().await.heartbeat().await.is_err() {
                    break;
                }
            }
        });
        let pull = tokio::spawn(pull_loop(runtime.clone(), queue.clone(), client, tasks.clone()));
        tasks.lock().extend([heartbeat, pull]);
    }
    tracing::info!(worker = %id, queues = ?queues, "worker registered");
    Ok(WorkerHandle {
        worker_id: id,
        subscriptions: queues.into_iter().collect(),
        alive,
        publisher,
        stats,
        storage,
        tasks,
    })
}

async fn pull_loop(rt: Arc<Runtime>, queue: String, client: SharedClient, tasks: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    loop {
        let Ok(permit) = rt.slots.clone().acquire_owned().await else {
            return;
        };
        if !rt.alive.load(Ordering::SeqCst) {
            return;
        }
        let popped = client.lock().await.pop(&queue, POP_WAIT).await;
        let delivery = match popped {
            Ok(Some(d)) => d,
            Ok(None) => continue,
            Err(e) => {
                tracing::warn!(worker = %rt.profile.worker_id, error = %e, "broker connection lost");
                return;
            }
        };
        let rt2 = rt.clone();
        let client = client.clone();
        let queue = queue.clone();
        let job = tokio::spawn(async move {
            let settle = run_delivery(&rt2, &delivery).await;
            if !rt2.alive.load(Ordering::SeqCst) {
                return;
            }
            let mut c = client.lock().await;
            let r = match settle {
                Settle::Ack => c.ack(&queue, delivery.tag).await,
                Settle::Nack => c.nack(&queue, delivery.tag).await,
            };
            if let Err(e) = r {
                tracing::warn!(error = %e, tag = delivery.tag, "settling delivery failed");
            }
            drop(permit);
        });
        let mut held = tasks.lock();
        held.retain(|t| !t.is_finished());
        held.push(job);
    }
}

enum Settle {
    Ack,
    Nack,
}

async fn run_delivery(rt: &Arc<Runtime>, delivery: &Delivery) -> Settle {
    let envelope = match TaskEnvelope::from_json(&delivery.payload) {
        Ok(e) => e,
        Err(e) => {
            tracing::error!(error = %e, "undecodable envelope acknowledged and discarded");
            return Settle::Ack;
        }
    };
    if !rt.profile.resource_classes.contains(&envelope.resource_class) {
        tracing::error!(class = ?envelope.resource_class, "task routed to a worker lacking its resource class");
        return Settle::Nack;
    }
    let now_running = rt.stats.running.fetch_add(1, Ordering::SeqCst) + 1;
    rt.stats.max_running.fetch_max(now_running, Ordering::SeqCst);
    rt.stats.executed.lock().push((envelope.functionality, envelope.resource_class));
    let sink = Arc::new(EventSink::new(rt.publisher.clone(), &envelope, delivery.attempt, rt.alive.clone()));
    sink.emit(
        EventKind::TaskStarted,
        json!({ "worker": rt.profile.worker_id, "attempt": delivery.attempt }).to_string(),
    );
    let started = Instant::now();
    let rt2 = rt.clone();
    let sink2 = sink.clone();
    let env2 = envelope.clone();
    let outcome = tokio::task::spawn_blocking(move || execute(&rt2, &env2, &sink2))
        .await
        .unwrap_or_else(|e| Err(TaskError::HandlerError(format!("handler panicked: {e}"))));
    rt.stats.running.fetch_sub(1, Ordering::SeqCst);
    match outcome {
        Ok((keys, summary)) => {
            for k in &keys {
                sink.emit(EventKind::Artifact, k.clone());
            }
            let done = json!({
                "artifacts": keys,
                "summary": summary,
                "duration_ms": started.elapsed().as_millis() as u64,
            });
            sink.emit(EventKind::TaskDone, done.to_string());
            rt.stats.acked.fetch_add(1, Ordering::SeqCst);
            Settle::Ack
        }
        Err(e) => {
            let is_final = delivery.attempt >= POISON_CAP;
            let payload = FailurePayload {
                error: e.to_string(),
                attempt: delivery.attempt,
                is_final,
            };
            sink.emit(EventKind::Failed, serde_json::to_string(&payload).expect("serializable"));
            tracing::warn!(job = %envelope.job_id, task = envelope.task_index, attempt = delivery.attempt, error = %e, "task failed");
            if is_final {
                rt.stats.failed_final.fetch_add(1, Ordering::SeqCst);
                rt.stats.acked.fetch_add(1, Ordering::SeqCst);
                Settle::Ack
            } else {
                rt.stats.nacked.fetch_add(1, Ordering::SeqCst);
                Settle::Nack
            }
        }
    }
}

/// Fetch, run, and store; returns artifact keys and the summary.
fn execute(rt: &Runtime, envelope: &TaskEnvelope, sink: &EventSink) -> Result<(Vec<String>, Value), TaskError> {
    let handler = rt
        .registry
        .get(envelope.functionality)
        .ok_or_else(|| TaskError::HandlerError(format!("no handler for {}", envelope.functionality)))?;
    let inputs = fetch_inputs(&rt.storage, &envelope.images)?;
    let ctx = TaskContext {
        envelope,
        inputs: &inputs,
        storage: &rt.storage,
        sink,
        executor: &rt.executor,
    };
    let output = handler.run(&ctx).map_err(TaskError::HandlerError)?;
    let mut keys = Vec::with_capacity(output.artifacts.len());
    for (name, bytes) in &output.artifacts {
        let key = artifact_key(envelope, name);
        let object = ObjectKey::new(Namespace::Artifacts, key.clone()).map_err(|e| TaskError::StorageFailure(e.to_string()))?;
        rt.storage
            .put_object(&object, bytes)
            .map_err(|e| TaskError::StorageFailure(e.to_string()))?;
        keys.push(key);
    }
    Ok((keys, output.summary))
}

pub fn artifact_key(envelope: &TaskEnvelope, name: &str) -> String {
    format!("{}.{}.{}", envelope.job_id, envelope.task_index, name)
}

pub fn fetch_inputs(storage: &Storage, images: &[ImageRef]) -> Result<Vec<TaskInput>, TaskError> {
    images
        .iter()
        .map(|image| {
            let bytes = match &image.content_hash {
                Some(h) => storage.fetch_object(&ObjectKey::image(h)),
                None => storage.read_locator(&image.locator()),
            }
            .map_err(|e| TaskError::FetchFailure(format!("{}: {e}", image.locator())))?;
            Ok(TaskInput {
                image: image.clone(),
                bytes,
            })
        })
        .collect()
}
