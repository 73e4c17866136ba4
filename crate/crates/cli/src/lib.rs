//! Client side of the job service: submit a configured job, stream its
//! terminal output and copy artifacts somewhere useful.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::time::Duration;

use cvgrid_core::job::{parse_job_config, Functionality, JobError, JobSpec, Locator, Scheme};
use futures::StreamExt;
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONNECTION: i32 = 3;
pub const EXIT_FAILED: i32 = 4;

/// Environment variable consulted for a user token when none is given.
pub const TOKEN_ENV: &str = "CVGRID_TOKEN";

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const POLL_INTERVAL: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot reach coordinator at {addr}: {reason}")]
    Connection { addr: String, reason: String },
    #[error("coordinator rejected the request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("job {job_id} is {state}, not done")]
    JobNotDone { job_id: String, state: String },
    #[error("cannot write to {target}: {reason}")]
    TargetUnwritable { target: String, reason: String },
}

impl ClientError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Config(_) => EXIT_CONFIG,
            ClientError::Rejected { status, .. } if *status == 400 => EXIT_CONFIG,
            ClientError::Connection { .. } | ClientError::Rejected { .. } => EXIT_CONNECTION,
            ClientError::JobNotDone { .. } | ClientError::TargetUnwritable { .. } => EXIT_FAILED,
        }
    }
}

impl From<JobError> for ClientError {
    fn from(e: JobError) -> Self {
        ClientError::Config(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ClientSettings {
    pub config_path: PathBuf,
    /// Applied over the file config; see [`apply_overrides`] for the accepted keys.
    pub overrides: BTreeMap<String, String>,
    pub authenticated: bool,
    /// Sent as the user token when `authenticated` is set.
    pub token: Option<String>,
    /// Base URL or `host:port` of the coordinator.
    pub coordinator: String,
}

impl ClientSettings {
    pub fn new(config_path: impl Into<PathBuf>, coordinator: impl Into<String>) -> Self {
        ClientSettings {
            config_path: config_path.into(),
            overrides: BTreeMap::new(),
            authenticated: false,
            token: None,
            coordinator: coordinator.into(),
        }
    }

    pub fn base_url(&self) -> String {
        base_url(&self.coordinator)
    }

    fn effective_token(&self) -> Option<String> {
        if !self.authenticated {
            return None;
        }
        self.token
            .clone()
            .or_else(|| std::env::var(TOKEN_ENV).ok())
            .filter(|t| !t.is_empty())
            .or_else(|| Some("desk-user".to_string()))
    }
}

fn base_url(addr: &str) -> String {
    let addr = addr.trim().trim_end_matches('/');
    if addr.starts_with("http://") || addr.starts_with("https://") {
        addr.to_string()
    } else {
        format!("http://{addr}")
    }
}

fn ws_url(base: &str) -> String {
    let rest = base.strip_prefix("http").unwrap_or(base);
    format!("ws{rest}/ws")
}

/// Parses a `key=value` override.
pub fn parse_override(raw: &str) -> Result<(String, String), ClientError> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| ClientError::Config(format!("override `{raw}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ClientError::Config(format!("override `{raw}` has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Applies overrides to `spec`.
///
/// Accepted keys are `exec`, `maxim`, and the fields of the active
/// config block: `path`, `output` and `params.<name>`. Switching `exec` to a
/// functionality without its own block reuses the current block's path and
/// output with empty params. Field overrides always target the block that is
/// active after the `exec` override.
pub fn apply_overrides(mut spec: JobSpec, overrides: &BTreeMap<String, String>) -> Result<JobSpec, ClientError> {
    if let Some(exec) = overrides.get("exec") {
        let target: Functionality = exec.parse()?;
        if spec.config_mut(target).is_none() {
            let mut block = spec.active_config().clone();
            block.name = target;
            block.params.clear();
            spec.configs.push(block);
        }
        spec.exec = target;
    }
    for (key, value) in overrides {
        match key.as_str() {
            "exec" => {}
            "maxim" => {
                spec.maxim = value
                    .parse()
                    .map_err(|e| ClientError::Config(format!("maxim `{value}`: {e}")))?;
            }
            "path" => {
                let loc: Locator = value.parse()?;
                let exec = spec.exec;
                spec.config_mut(exec).expect("active block").path = loc;
            }
            "output" => {
                let exec = spec.exec;
                spec.config_mut(exec).expect("active block").output = value.clone();
            }
            other => match other.strip_prefix("params.") {
                Some(param) if !param.is_empty() => {
                    let exec = spec.exec;
                    spec.config_mut(exec)
                        .expect("active block")
                        .params
                        .insert(param.to_string(), value.clone());
                }
                _ => return Err(ClientError::Config(format!("unknown override key `{other}`"))),
            },
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Reads the config file and applies the settings' overrides.
pub fn load_spec(settings: &ClientSettings) -> Result<JobSpec, ClientError> {
    let text = std::fs::read_to_string(&settings.config_path)
        .map_err(|e| ClientError::Config(format!("{}: {e}", settings.config_path.display())))?;
    apply_overrides(parse_job_config(&text)?, &settings.overrides)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|x| x.to_str())
        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
}

/// Image files named by a local path: the file itself, or a directory's images in name order.
pub fn local_images(path: &Path) -> Result<Vec<PathBuf>, ClientError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ClientError::Config(format!("no images under {}", path.display())));
    }
    Ok(files)
}

/// A channel or status event, reduced to what the client needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientEvent {
    pub kind: String,
    pub job_id: String,
    pub task: Option<u64>,
    pub seq: u64,
    pub payload: String,
}

impl ClientEvent {
    fn from_channel(v: &Value) -> Option<Self> {
        Some(ClientEvent {
            kind: v["type"].as_str()?.to_string(),
            job_id: v["job_id"].as_str()?.to_string(),
            task: v["task"].as_u64(),
            seq: v["seq"].as_u64()?,
            payload: v["payload"].as_str().unwrap_or_default().to_string(),
        })
    }

    fn from_status(v: &Value) -> Option<Self> {
        Some(ClientEvent {
            kind: v["kind"].as_str()?.to_string(),
            job_id: v["job_id"].as_str()?.to_string(),
            task: v["task_index"].as_u64(),
            seq: v["seq"].as_u64()?,
            payload: v["payload"].as_str().unwrap_or_default().to_string(),
        })
    }
}

/// Prints each event once, in per-task seq order, whichever source it comes from.
#[derive(Debug, Default)]
struct Printer {
    last_seq: HashMap<Option<u64>, u64>,
    outcome: Option<bool>,
    lines: usize,
}

impl Printer {
    fn accept(&mut self, e: &ClientEvent, out: &mut (dyn Write + Send)) {
        if self.outcome.is_some() {
            return;
        }
        if let Some(&last) = self.last_seq.get(&e.task) {
            if e.seq <= last {
                return;
            }
        }
        self.last_seq.insert(e.task, e.seq);
        match e.kind.as_str() {
            "output_line" => {
                let _ = writeln!(out, "{}", e.payload);
                let _ = out.flush();
                self.lines += 1;
            }
            "job_done" => {
                let state = serde_json::from_str::<Value>(&e.payload)
                    .ok()
                    .and_then(|v| v["state"].as_str().map(str::to_string))
                    .unwrap_or_default();
                self.outcome = Some(state == "done");
            }
            "failed" if e.task.is_none() => {
                tracing::warn!(payload = %e.payload, "job failed");
            }
            "failed" => {
                tracing::warn!(task = ?e.task, payload = %e.payload, "task failed");
            }
            _ => {}
        }
    }
}

/// Outcome of a monitored submission.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub job_id: String,
    pub succeeded: bool,
    pub lines: usize,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.succeeded {
            EXIT_OK
        } else {
            EXIT_FAILED
        }
    }
}

fn connection(addr: &str) -> impl Fn(String) -> ClientError + '_ {
    move |reason| ClientError::Connection {
        addr: addr.to_string(),
        reason,
    }
}

async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().await.unwrap_or_default();
    Err(ClientError::Rejected {
        status: status.as_u16(),
        body,
    })
}

/// Builds the multipart form. Local images are uploaded from this machine;
/// dropbox locators travel as references for the coordinator to resolve.
fn submission_form(spec: &JobSpec) -> Result<reqwest::multipart::Form, ClientError> {
    let mut form = reqwest::multipart::Form::new().text("spec", spec.to_document());
    let source = &spec.active_config().path;
    match source.scheme {
        Scheme::Local => {
            for file in local_images(Path::new(&source.path))? {
                let bytes = std::fs::read(&file).map_err(|e| ClientError::Config(format!("{}: {e}", file.display())))?;
                let name = file
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".to_string());
                form = form.part("image", reqwest::multipart::Part::bytes(bytes).file_name(name));
            }
        }
        Scheme::Dropbox => {
            form = form.text("refs", serde_json::to_string(&[source.to_string()]).expect("strings serialize"));
        }
    }
    Ok(form)
}

/// Submits the configured job and prints its output lines to `out` until it finishes.
pub async fn submit_and_monitor(settings: &ClientSettings, out: &mut (dyn Write + Send)) -> Result<RunSummary, ClientError> {
    let spec = load_spec(settings)?;
    let form = submission_form(&spec)?;
    let base = settings.base_url();
    let conn = connection(&base);

    let (mut socket, _) = tokio_tungstenite::connect_async(ws_url(&base))
        .await
        .map_err(|e| conn(e.to_string()))?;
    let session = loop {
        match socket.next().await {
            Some(Ok(Message::Text(t))) => {
                let v: Value = serde_json::from_str(&t).map_err(|e| conn(format!("bad hello: {e}")))?;
                if v["type"] == "hello" {
                    break v["session_id"].as_str().unwrap_or_default().to_string();
                }
            }
            Some(Ok(_)) => continue,
            Some(Err(e)) => return Err(conn(e.to_string())),
            None => return Err(conn("event channel closed before hello".into())),
        }
    };

    let http = reqwest::Client::new();
    let mut request = http
        .post(format!("{base}/api/v1/jobs"))
        .header("X-Session-Id", &session)
        .multipart(form);
    if let Some(token) = settings.effective_token() {
        request = request.header("X-User-Token", token);
    }
    // Events can overtake the HTTP response, so the socket is read concurrently.
    let mut early: Vec<ClientEvent> = Vec::new();
    let mut channel_open = true;
    let submit = request.send();
    tokio::pin!(submit);
    let response = loop {
        tokio::select! {
            resp = &mut submit => break resp.map_err(|e| conn(e.to_string()))?,
            msg = socket.next(), if channel_open => match msg {
                Some(Ok(Message::Text(t))) => {
                    if let Some(e) = serde_json::from_str::<Value>(&t).ok().as_ref().and_then(ClientEvent::from_channel) {
                        early.push(e);
                    }
                }
                Some(Ok(_)) => {}
                _ => channel_open = false,
            },
        }
    };
    let accepted: Value = check(response).await?.json().await.map_err(|e| conn(e.to_string()))?;
    let job_id = accepted["job_id"].as_str().unwrap_or_default().to_string();
    tracing::info!(%job_id, tasks = %accepted["tasks"], "job accepted");

    let mut printer = Printer::default();
    for e in early.iter().filter(|e| e.job_id == job_id) {
        printer.accept(e, out);
    }
    let status_url = format!("{base}/api/v1/jobs/{job_id}");
    let mut poll = tokio::time::interval(POLL_INTERVAL);
    poll.tick().await;
    while printer.outcome.is_none() {
        tokio::select! {
            msg = socket.next(), if channel_open => match msg {
                Some(Ok(Message::Text(t))) => {
                    if let Some(e) = serde_json::from_str::<Value>(&t).ok().as_ref().and_then(ClientEvent::from_channel) {
                        if e.job_id == job_id {
                            printer.accept(&e, out);
                        }
                    }
                }
                Some(Ok(_)) => {}
                _ => {
                    tracing::warn!("event channel lost, following job status instead");
                    channel_open = false;
                }
            },
            _ = poll.tick() => {
                // The status view carries every retained event; replaying it
                // only fills gaps since already printed seqs are skipped.
                let view: Value = check(http.get(&status_url).send().await.map_err(|e| conn(e.to_string()))?)
                    .await?
                    .json()
                    .await
                    .map_err(|e| conn(e.to_string()))?;
                if let Some(events) = view["events"].as_array() {
                    for e in events.iter().filter_map(ClientEvent::from_status) {
                        printer.accept(&e, out);
                    }
                }
            }
        }
    }
    let _ = socket.close(None).await;
    Ok(RunSummary {
        job_id,
        succeeded: printer.outcome == Some(true),
        lines: printer.lines,
    })
}

/// Fetches the job's status view.
pub async fn job_status(coordinator: &str, job_id: &str) -> Result<Value, ClientError> {
    let base = base_url(coordinator);
    let conn = connection(&base);
    let resp = reqwest::get(format!("{base}/api/v1/jobs/{job_id}"))
        .await
        .map_err(|e| conn(e.to_string()))?;
    check(resp).await?.json().await.map_err(|e| conn(e.to_string()))
}

/// Where `dropbox:` targets land on this machine.
#[derive(Debug, Clone)]
pub struct SaveRoots {
    pub dropbox: PathBuf,
}

fn confined(root: &Path, rel: &str) -> Option<PathBuf> {
    let rel = Path::new(rel.trim_start_matches('/'));
    rel.components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
        .then(|| root.join(rel))
}

/// Copies every artifact of a finished job under `target` and returns the written paths.
/// Saving again overwrites the same files with the same bytes.
pub async fn save_results(
    coordinator: &str,
    job_id: &str,
    target: &Locator,
    roots: &SaveRoots,
) -> Result<Vec<PathBuf>, ClientError> {
    let unwritable = |reason: String| ClientError::TargetUnwritable {
        target: target.to_string(),
        reason,
    };
    let dir = match target.scheme {
        Scheme::Local => PathBuf::from(&target.path),
        Scheme::Dropbox => confined(&roots.dropbox, &target.path).ok_or_else(|| unwritable("path escapes the dropbox root".into()))?,
    };
    let view = job_status(coordinator, job_id).await?;
    let state = view["state"].as_str().unwrap_or_default();
    if state != "done" {
        return Err(ClientError::JobNotDone {
            job_id: job_id.to_string(),
            state: state.to_string(),
        });
    }
    std::fs::create_dir_all(&dir).map_err(|e| unwritable(e.to_string()))?;
    let base = base_url(coordinator);
    let conn = connection(&base);
    let mut written = Vec::new();
    for key in view["artifacts"].as_array().into_iter().flatten().filter_map(Value::as_str) {
        let resp = reqwest::get(format!("{base}/api/v1/jobs/{job_id}/artifacts/{key}"))
            .await
            .map_err(|e| conn(e.to_string()))?;
        let bytes = check(resp).await?.bytes().await.map_err(|e| conn(e.to_string()))?;
        let path = dir.join(key);
        std::fs::write(&path, &bytes).map_err(|e| unwritable(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
