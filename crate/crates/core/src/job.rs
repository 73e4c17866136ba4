//! Job and task data model.
//!
//! A [`JobSpec`] is parsed from the client configuration document, checked,
//! and fanned out by [`expand_job`] into [`TaskEnvelope`]s that the broker can
//! route to capability-matched workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JobError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unknown functionality `{0}`")]
    UnknownFunctionality(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("functionality `{0}` configured more than once")]
    DuplicateFunctionality(String),
    #[error("unknown storage scheme `{0}`")]
    UnknownScheme(String),
    #[error("empty storage path")]
    EmptyPath,
    #[error("job accepts at most {maxim} images, got {got}")]
    TooManyImages { maxim: u32, got: usize },
    #[error("no images supplied")]
    EmptyManifest,
}

/// The named operations a job may execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Functionality {
    #[serde(rename = "ImageStitch")]
    ImageStitch,
    #[serde(rename = "classify")]
    Classify,
    #[serde(rename = "features")]
    Features,
    #[serde(rename = "vip")]
    Vip,
}

impl Functionality {
    pub const ALL: [Functionality; 4] = [
        Functionality::ImageStitch,
        Functionality::Classify,
        Functionality::Features,
        Functionality::Vip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functionality::ImageStitch => "ImageStitch",
            Functionality::Classify => "classify",
            Functionality::Features => "features",
            Functionality::Vip => "vip",
        }
    }

    /// Which worker class a task of this kind is routed to.
    pub fn resource_class(self) -> ResourceClass {
        match self {
            Functionality::ImageStitch => ResourceClass::Cpu,
            Functionality::Classify | Functionality::Features | Functionality::Vip => {
                ResourceClass::Gpu
            }
        }
    }

    /// Image-parallel functionalities get one task per image; graph jobs get one task total.
    pub fn is_image_parallel(self) -> bool {
        !matches!(self, Functionality::ImageStitch)
    }
}

impl fmt::Display for Functionality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Functionality {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Functionality::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| JobError::UnknownFunctionality(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceClass {
    Gpu,
    Cpu,
}

impl ResourceClass {
    pub fn name(self) -> &'static str {
        match self {
            ResourceClass::Gpu => "gpu",
            ResourceClass::Cpu => "cpu",
        }
    }
}

impl FromStr for ResourceClass {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "gpu" => Ok(ResourceClass::Gpu),
            "cpu" => Ok(ResourceClass::Cpu),
            other => Err(JobError::InvalidValue {
                field: "resource_class".into(),
                reason: format!("`{other}` is neither gpu nor cpu"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Local,
    Dropbox,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Local => "local",
            Scheme::Dropbox => "dropbox",
        }
    }
}

impl FromStr for Scheme {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Scheme::Local),
            "dropbox" => Ok(Scheme::Dropbox),
            other => Err(JobError::UnknownScheme(other.to_string())),
        }
    }
}

/// 256-bit SHA-256 digest of stored bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ContentHash {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = |reason: &str| JobError::InvalidValue {
            field: "content_hash".into(),
            reason: reason.into(),
        };
        let bytes = hex::decode(s).map_err(|_| invalid("not hex"))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| invalid("expected 32 bytes"))?;
        Ok(ContentHash(arr))
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A scheme-qualified storage location, e.g. `dropbox:/1/`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Locator {
    pub scheme: Scheme,
    pub path: String,
}

impl Locator {
    pub fn new(scheme: Scheme, path: impl Into<String>) -> Self {
        Locator {
            scheme,
            path: path.into(),
        }
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme.name(), self.path)
    }
}

impl FromStr for Locator {
    type Err = JobError;

    fn from_str(raw: &str) -> Result<Self, Self::Err> {
        let raw = raw.trim();
        let (scheme, path) = raw
            .split_once(':')
            .ok_or_else(|| JobError::UnknownScheme(raw.to_string()))?;
        let scheme: Scheme = scheme.trim().parse()?;
        let path = path.trim();
        if path.is_empty() {
            return Err(JobError::EmptyPath);
        }
        Ok(Locator::new(scheme, path))
    }
}

impl Serialize for Locator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Locator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Reference to one input image. `content_hash` is filled in when the bytes are ingested.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub scheme: Scheme,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<ContentHash>,
}

impl ImageRef {
    pub fn locator(&self) -> Locator {
        Locator::new(self.scheme, self.path.clone())
    }

    pub fn with_hash(mut self, hash: ContentHash) -> Self {
        self.content_hash = Some(hash);
        self
    }
}

/// Splits `<scheme>:<path>` into an unhashed [`ImageRef`].
pub fn resolve_image_ref(raw: &str) -> Result<ImageRef, JobError> {
    let loc: Locator = raw.parse()?;
    Ok(ImageRef {
        scheme: loc.scheme,
        path: loc.path,
        content_hash: None,
    })
}

pub type Params = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalityConfig {
    pub name: Functionality,
    pub path: Locator,
    pub output: String,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub exec: Functionality,
    pub maxim: u32,
    #[serde(rename = "config")]
    pub configs: Vec<FunctionalityConfig>,
}

impl JobSpec {
    /// The configuration block selected by `exec`.
    pub fn active_config(&self) -> &FunctionalityConfig {
        self.configs
            .iter()
            .find(|c| c.name == self.exec)
            .expect("validated JobSpec has a config for exec")
    }

    pub fn config_mut(&mut self, name: Functionality) -> Option<&mut FunctionalityConfig> {
        self.configs.iter_mut().find(|c| c.name == name)
    }

    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<(), JobError> {
        if self.maxim == 0 {
            return Err(JobError::InvalidValue {
                field: "maxim".into(),
                reason: "must be at least 1".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for c in &self.configs {
            if !seen.insert(c.name) {
                return Err(JobError::DuplicateFunctionality(c.name.to_string()));
            }
        }
        if !seen.contains(&self.exec) {
            return Err(JobError::MissingField(format!(
                "config entry for exec `{}`",
                self.exec
            )));
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("JobSpec serializes")
    }
}

fn take_str(obj: &mut Map<String, Value>, key: &str, ctx: &str) -> Result<String, JobError> {
    match obj.remove(key) {
        None | Some(Value::Null) => Err(JobError::MissingField(format!("{ctx}{key}"))),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(JobError::InvalidValue {
            field: format!("{ctx}{key}"),
            reason: format!("expected string, got {other}"),
        }),
    }
}

fn reject_leftovers(obj: &Map<String, Value>, ctx: &str) -> Result<(), JobError> {
    match obj.keys().next() {
        Some(k) => Err(JobError::UnknownKey(format!("{ctx}{k}"))),
        None => Ok(()),
    }
}

fn parse_config_entry(index: usize, value: Value) -> Result<FunctionalityConfig, JobError> {
    let ctx = format!("config[{index}].");
    let Value::Object(mut obj) = value else {
        return Err(JobError::MalformedDocument(format!("{ctx} is not an object")));
    };
    let name: Functionality = take_str(&mut obj, "name", &ctx)?.parse()?;
    let path: Locator = take_str(&mut obj, "path", &ctx)?.parse()?;
    let output = take_str(&mut obj, "output", &ctx)?;
    let mut params = Params::new();
    match obj.remove("params") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                match v {
                    Value::String(s) => {
                        params.insert(k, s);
                    }
                    other => {
                        return Err(JobError::InvalidValue {
                            field: format!("{ctx}params.{k}"),
                            reason: format!("params are strings, got {other}"),
                        })
                    }
                }
            }
        }
        Some(other) => {
            return Err(JobError::InvalidValue {
                field: format!("{ctx}params"),
                reason: format!("expected object, got {other}"),
            })
        }
    }
    reject_leftovers(&obj, &ctx)?;
    Ok(FunctionalityConfig {
        name,
        path,
        output,
        params,
    })
}

/// Parses a job configuration document.
///
/// The accepted syntax is JSON5-compatible so the trailing commas and
/// comments people leave in hand-edited configs are tolerated.
pub fn parse_job_config(text: &str) -> Result<JobSpec, JobError> {
    let root: Value =
        json5::from_str(text).map_err(|e| JobError::MalformedDocument(e.to_string()))?;
    let Value::Object(mut obj) = root else {
        return Err(JobError::MalformedDocument("top level must be an object".into()));
    };
    let exec: Functionality = take_str(&mut obj, "exec", "")?.parse()?;
    let maxim = match obj.remove("maxim") {
        None | Some(Value::Null) => return Err(JobError::MissingField("maxim".into())),
        Some(Value::Number(n)) => n
            .as_u64()
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| JobError::InvalidValue {
                field: "maxim".into(),
                reason: format!("{n} is not a non-negative 32-bit integer"),
            })?,
        Some(other) => {
            return Err(JobError::InvalidValue {
                field: "maxim".into(),
                reason: format!("expected integer, got {other}"),
            })
        }
    };
    let configs = match obj.remove("config") {
        None | Some(Value::Null) => return Err(JobError::MissingField("config".into())),
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| parse_config_entry(i, v))
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(JobError::InvalidValue {
                field: "config".into(),
                reason: format!("expected list, got {other}"),
            })
        }
    };
    reject_leftovers(&obj, "")?;
    let spec = JobSpec {
        exec,
        maxim,
        configs,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub Uuid);

impl JobId {
    pub fn new() -> Self {
        JobId(Uuid::new_v4())
    }
}

impl Default for JobId {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for JobId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(JobId(s.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn generate() -> Self {
        SessionId(Uuid::new_v4().simple().to_string())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One routable unit of work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub job_id: JobId,
    pub task_index: u32,
    pub functionality: Functionality,
    pub images: Vec<ImageRef>,
    pub params: Params,
    pub resource_class: ResourceClass,
    pub session_id: SessionId,
}

impl TaskEnvelope {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Fans a job out into task envelopes.
pub fn expand_job(
    spec: &JobSpec,
    manifest: Vec<ImageRef>,
    session_id: &SessionId,
    job_id: JobId,
) -> Result<Vec<TaskEnvelope>, JobError> {
    if manifest.is_empty() {
        return Err(JobError::EmptyManifest);
    }
    if manifest.len() > spec.maxim as usize {
        return Err(JobError::TooManyImages {
            maxim: spec.maxim,
            got: manifest.len(),
        });
    }
    let functionality = spec.exec;
    let params = spec.active_config().params.clone();
    let make = |task_index: u32, images: Vec<ImageRef>| TaskEnvelope {
        job_id,
        task_index,
        functionality,
        images,
        params: params.clone(),
        resource_class: functionality.resource_class(),
        session_id: session_id.clone(),
    };
    let envelopes = if functionality.is_image_parallel() {
        manifest
            .into_iter()
            .enumerate()
            .map(|(i, img)| make(i as u32, vec![img]))
            .collect()
    } else {
        vec![make(0, manifest)]
    };
    Ok(envelopes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Accepted,
    TaskStarted,
    OutputLine,
    Artifact,
    TaskDone,
    JobDone,
    Failed,
}

impl EventKind {
    pub fn wire_name(self) -> &'static str {
        match self {
            EventKind::Accepted => "accepted",
            EventKind::TaskStarted => "task_started",
            EventKind::OutputLine => "output_line",
            EventKind::Artifact => "artifact",
            EventKind::TaskDone => "task_done",
            EventKind::JobDone => "job_done",
            EventKind::Failed => "failed",
        }
    }
}

/// A progress or result event. `task_index` is `None` for job-level events
/// (`accepted`, `job_done`, and a job-level `failed`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobEvent {
    pub job_id: JobId,
    pub task_index: Option<u32>,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: String,
}

/// Payload of a `failed` event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePayload {
    pub error: String,
    pub attempt: u32,
    /// `true` once no further retry of the task will happen.
    #[serde(rename = "final")]
    pub is_final: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE_LISTING: &str = r#"{
    "exec": "classify",
    "maxim": 500,
    "config": [
        {
            "name": "ImageStitch",
            "path": "dropbox:/1/",
            "output": "/home/dexter/Pictures/test_download",
            "params": {
                "warp": "plane"
            }
        },
        {
            "name": "classify",
            "path": "local: /home/dexter/Pictures/test_download/3",
            "output": "/home/dexter/Pictures/test_download",
            "params": {
            }
        },
        {
            "name": "features",
            "path": "local: /home/dexter/Pictures/test_download/3",
            "output": "/home/dexter/Pictures/test_download",
            "params": {
                "name": "decaf",
                "verbose": "2",
            }
        }
    ]
}"#;

    fn refs(n: usize) -> Vec<ImageRef> {
        (0..n)
            .map(|i| resolve_image_ref(&format!("local:/img/{i}.png")).unwrap())
            .collect()
    }

    #[test]
    fn parses_reference_listing() {
        let spec = parse_job_config(EXAMPLE_LISTING).unwrap();
        assert_eq!(spec.exec, Functionality::Classify);
        assert_eq!(spec.maxim, 500);
        assert_eq!(spec.configs.len(), 3);
        let stitch = &spec.configs[0];
        assert_eq!(stitch.name, Functionality::ImageStitch);
        assert_eq!(stitch.params.get("warp").map(String::as_str), Some("plane"));
        assert_eq!(stitch.path, Locator::new(Scheme::Dropbox, "/1/"));
        let features = &spec.configs[2];
        let expected: Params = [("name", "decaf"), ("verbose", "2")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        assert_eq!(features.params, expected);
        assert!(spec.configs[1].params.is_empty());
    }

    #[test]
    fn exec_without_matching_config_is_missing_field() {
        let err = parse_job_config(r#"{"exec": "classify", "maxim": 5, "config": []}"#).unwrap_err();
        assert!(matches!(err, JobError::MissingField(_)), "{err:?}");
    }

    #[test]
    fn parse_errors_are_classified() {
        assert!(matches!(
            parse_job_config("{\"exec\": ").unwrap_err(),
            JobError::MalformedDocument(_)
        ));
        let unknown = r#"{"exec": "segment", "maxim": 5, "config": []}"#;
        assert_eq!(
            parse_job_config(unknown).unwrap_err(),
            JobError::UnknownFunctionality("segment".into())
        );
        let no_exec = r#"{"maxim": 5, "config": []}"#;
        assert_eq!(
            parse_job_config(no_exec).unwrap_err(),
            JobError::MissingField("exec".into())
        );
        let no_path = r#"{"exec": "vip", "maxim": 5, "config": [{"name": "vip", "output": "/o"}]}"#;
        assert_eq!(
            parse_job_config(no_path).unwrap_err(),
            JobError::MissingField("config[0].path".into())
        );
        let no_output =
            r#"{"exec": "vip", "maxim": 5, "config": [{"name": "vip", "path": "local:/x"}]}"#;
        assert_eq!(
            parse_job_config(no_output).unwrap_err(),
            JobError::MissingField("config[0].output".into())
        );
        let extra = r#"{"exec": "vip", "maxim": 5, "priority": 1,
            "config": [{"name": "vip", "path": "local:/x", "output": "/o"}]}"#;
        assert_eq!(
            parse_job_config(extra).unwrap_err(),
            JobError::UnknownKey("priority".into())
        );
        let dup = r#"{"exec": "vip", "maxim": 5, "config": [
            {"name": "vip", "path": "local:/x", "output": "/o"},
            {"name": "vip", "path": "local:/y", "output": "/o"}]}"#;
        assert!(matches!(
            parse_job_config(dup).unwrap_err(),
            JobError::DuplicateFunctionality(_)
        ));
        let zero = r#"{"exec": "vip", "maxim": 0, "config": [{"name": "vip", "path": "local:/x", "output": "/o"}]}"#;
        assert!(matches!(
            parse_job_config(zero).unwrap_err(),
            JobError::InvalidValue { .. }
        ));
    }

    #[test]
    fn resolves_locators() {
        let r = resolve_image_ref("dropbox:/1/").unwrap();
        assert_eq!((r.scheme, r.path.as_str()), (Scheme::Dropbox, "/1/"));
        assert!(r.content_hash.is_none());
        let r = resolve_image_ref("local: /home/dexter/Pictures/test_download/3").unwrap();
        assert_eq!(
            (r.scheme, r.path.as_str()),
            (Scheme::Local, "/home/dexter/Pictures/test_download/3")
        );
        assert_eq!(
            resolve_image_ref("ftp:/x").unwrap_err(),
            JobError::UnknownScheme("ftp".into())
        );
        assert_eq!(resolve_image_ref("  local:   ").unwrap_err(), JobError::EmptyPath);
    }

    #[test]
    fn classify_fans_out_per_image() {
        let spec = parse_job_config(EXAMPLE_LISTING).unwrap();
        let session = SessionId("s1".into());
        let job = JobId::new();
        let envs = expand_job(&spec, refs(3), &session, job).unwrap();
        assert_eq!(envs.len(), 3);
        for (i, env) in envs.iter().enumerate() {
            assert_eq!(env.task_index, i as u32);
            assert_eq!(env.resource_class, ResourceClass::Gpu);
            assert_eq!(env.images.len(), 1);
            assert_eq!(env.job_id, job);
            assert_eq!(env.session_id, session);
        }
    }

    #[test]
    fn stitch_is_one_graph_task() {
        let mut spec = parse_job_config(EXAMPLE_LISTING).unwrap();
        spec.exec = Functionality::ImageStitch;
        let envs = expand_job(&spec, refs(5), &SessionId("s".into()), JobId::new()).unwrap();
        assert_eq!(envs.len(), 1);
        assert_eq!(envs[0].images.len(), 5);
        assert_eq!(envs[0].resource_class, ResourceClass::Cpu);
        assert_eq!(envs[0].params.get("warp").map(String::as_str), Some("plane"));
    }

    #[test]
    fn maxim_is_enforced() {
        let spec = parse_job_config(EXAMPLE_LISTING).unwrap();
        let s = SessionId("s".into());
        assert!(expand_job(&spec, refs(500), &s, JobId::new()).is_ok());
        assert_eq!(
            expand_job(&spec, refs(501), &s, JobId::new()).unwrap_err(),
            JobError::TooManyImages {
                maxim: 500,
                got: 501
            }
        );
        assert_eq!(
            expand_job(&spec, vec![], &s, JobId::new()).unwrap_err(),
            JobError::EmptyManifest
        );
    }

    #[test]
    fn envelope_json_round_trip() {
        let spec = parse_job_config(EXAMPLE_LISTING).unwrap();
        let img = refs(1).remove(0).with_hash(ContentHash::of(b"abc"));
        let env = expand_job(&spec, vec![img], &SessionId("s".into()), JobId::new())
            .unwrap()
            .remove(0);
        assert_eq!(TaskEnvelope::from_json(&env.to_json()).unwrap(), env);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn functionality() -> impl Strategy<Value = Functionality> {
            prop::sample::select(Functionality::ALL.to_vec())
        }

        fn config(name: Functionality) -> impl Strategy<Value = FunctionalityConfig> {
            (
                prop::bool::ANY,
                "/[a-z0-9/ ]{0,12}[a-z0-9]",
                "[ -~]{0,16}",
                prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,10}", 0..4),
            )
                .prop_map(move |(dropbox, path, output, params)| FunctionalityConfig {
                    name,
                    path: Locator::new(
                        if dropbox { Scheme::Dropbox } else { Scheme::Local },
                        path,
                    ),
                    output,
                    params,
                })
        }

        fn job_spec() -> impl Strategy<Value = JobSpec> {
            (
                prop::sample::subsequence(Functionality::ALL.to_vec(), 1..=4),
                any::<prop::sample::Index>(),
                1u32..100_000,
            )
                .prop_flat_map(|(names, pick, maxim)| {
                    let exec = names[pick.index(names.len())];
                    let configs: Vec<_> = names.into_iter().map(config).collect();
                    (Just(exec), Just(maxim), configs).prop_map(|(exec, maxim, configs)| {
                        JobSpec {
                            exec,
                            maxim,
                            configs,
                        }
                    })
                })
        }

        proptest! {
            #[test]
            fn document_round_trip(spec in job_spec()) {
                let text = spec.to_document();
                prop_assert_eq!(parse_job_config(&text).unwrap(), spec);
            }

            #[test]
            fn expansion_counts_and_indices(f in functionality(), n in 1usize..40) {
                let spec = JobSpec {
                    exec: f,
                    maxim: 64,
                    configs: vec![FunctionalityConfig {
                        name: f,
                        path: Locator::new(Scheme::Local, "/x"),
                        output: "/o".into(),
                        params: Params::new(),
                    }],
                };
                let session = SessionId("sess".into());
                let job = JobId::new();
                let envs = expand_job(&spec, refs(n), &session, job).unwrap();
                let expected = if f.is_image_parallel() { n } else { 1 };
                prop_assert_eq!(envs.len(), expected);
                for (i, e) in envs.iter().enumerate() {
                    prop_assert_eq!(e.task_index as usize, i);
                    prop_assert_eq!(e.job_id, job);
                    prop_assert_eq!(&e.session_id, &session);
                    prop_assert_eq!(e.resource_class, f.resource_class());
                }
                let total: usize = envs.iter().map(|e| e.images.len()).sum();
                prop_assert_eq!(total, n);
            }
        }
    }
}
