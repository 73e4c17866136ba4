//! Shared object store, scheme resolution, and the content-addressed feature cache.
//!
//! On-disk layout is `<root>/{images,features,artifacts,models}/<key>`. Every
//! write goes through a temp file and a rename so concurrent readers never
//! observe a partial object.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{decode_matrix, encode_matrix};
use crate::job::{ContentHash, Locator, Scheme};

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("path `{0}` escapes its storage root")]
    PathEscape(String),
    #[error("invalid object key `{0}`")]
    InvalidKey(String),
    #[error("corrupt cached object {key}: {reason}")]
    Corrupt { key: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Images,
    Features,
    Artifacts,
    Models,
}

impl Namespace {
    pub const ALL: [Namespace; 4] = [
        Namespace::Images,
        Namespace::Features,
        Namespace::Artifacts,
        Namespace::Models,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Namespace::Images => "images",
            Namespace::Features => "features",
            Namespace::Artifacts => "artifacts",
            Namespace::Models => "models",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectKey {
    pub namespace: Namespace,
    pub key: String,
}

impl ObjectKey {
    pub fn new(namespace: Namespace, key: impl Into<String>) -> Result<Self, StorageError> {
        let key = key.into();
        validate_key(&key)?;
        Ok(ObjectKey { namespace, key })
    }

    pub fn image(hash: &ContentHash) -> Self {
        ObjectKey {
            namespace: Namespace::Images,
            key: hash.to_hex(),
        }
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace.dir_name(), self.key)
    }
}

/// Keys are single path segments drawn from a conservative alphabet.
pub fn validate_key(key: &str) -> Result<(), StorageError> {
    let ok = !key.is_empty()
        && key.len() <= 200
        && !key.starts_with('.')
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StorageError::InvalidKey(key.to_string()))
    }
}

/// Identity of one cached feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub content_hash: ContentHash,
    pub backend: String,
    pub params_digest: String,
}

impl CacheKey {
    /// `params` is digested in sorted key order, so equal maps give equal keys.
    pub fn new(content_hash: ContentHash, backend: &str, params: &BTreeMap<String, String>) -> Self {
        let mut h = Sha256::new();
        for (k, v) in params {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((v.len() as u64).to_le_bytes());
            h.update(v.as_bytes());
        }
        CacheKey {
            content_hash,
            backend: backend.to_string(),
            params_digest: hex::encode(&h.finalize()[..8]),
        }
    }

    fn object_key(&self) -> Result<ObjectKey, StorageError> {
        ObjectKey::new(
            Namespace::Features,
            format!(
                "{}_{}_{}.ccvm",
                self.content_hash.to_hex(),
                self.backend,
                self.params_digest
            ),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheStatus {
    Hit,
    Miss,
    /// The cache could not be read or written; the value was computed directly.
    Bypassed,
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub computes: AtomicU64,
    pub bypasses: AtomicU64,
}

impl CacheStats {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.hits.load(Ordering::SeqCst),
            self.misses.load(Ordering::SeqCst),
            self.computes.load(Ordering::SeqCst),
        )
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "ppm", "pgm"];

pub struct Storage {
    root: PathBuf,
    dropbox_root: PathBuf,
    local_root: Option<PathBuf>,
    inflight: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    stats: CacheStats,
}

impl fmt::Debug for Storage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Storage")
            .field("root", &self.root)
            .field("dropbox_root", &self.dropbox_root)
            .field("local_root", &self.local_root)
            .finish()
    }
}

impl Storage {
    /// Opens (creating if needed) a store at `root`. The dropbox stub lives at
    /// `<root>/dropbox` unless overridden with [`Storage::with_dropbox_root`].
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        for ns in Namespace::ALL {
            let dir = root.join(ns.dir_name());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let dropbox_root = root.join("dropbox");
        fs::create_dir_all(&dropbox_root).map_err(io_err(&dropbox_root))?;
        Ok(Storage {
            root,
            dropbox_root,
            local_root: None,
            inflight: Mutex::new(HashMap::new()),
            stats: CacheStats::default(),
        })
    }

    pub fn with_dropbox_root(mut self, dir: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        self.dropbox_root = dir;
        Ok(self)
    }

    /// Confines `local:` locators to `dir`. Without this, local paths are used verbatim.
    pub fn with_local_root(mut self, dir: impl Into<PathBuf>) -> Self {
        self.local_root = Some(dir.into());
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dropbox_root(&self) -> &Path {
        &self.dropbox_root
    }

    pub fn cache_stats(&self) -> &CacheStats {
        &self.stats
    }

    fn object_path(&self, key: &ObjectKey) -> PathBuf {
        self.root.join(key.namespace.dir_name()).join(&key.key)
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
        let dir = path.parent().expect("object paths have a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            StorageError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        })
    }

    /// Stores content-addressed bytes; the key is the SHA-256 of `bytes`.
    pub fn store_object(&self, namespace: Namespace, bytes: &[u8]) -> Result<ObjectKey, StorageError> {
        let key = ObjectKey {
            namespace,
            key: ContentHash::of(bytes).to_hex(),
        };
        let path = self.object_path(&key);
        if !path.exists() {
            Self::write_atomic(&path, bytes)?;
        }
        Ok(key)
    }

    /// Stores bytes under a caller-chosen key, overwriting any previous object.
    pub fn put_object(&self, key: &ObjectKey, bytes: &[u8]) -> Result<(), StorageError> {
        validate_key(&key.key)?;
        Self::write_atomic(&self.object_path(key), bytes)
    }

    pub fn fetch_object(&self, key: &ObjectKey) -> Result<Vec<u8>, StorageError> {
        validate_key(&key.key)?;
        let path = self.object_path(key);
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound(key.to_string()),
            _ => StorageError::Io { path, source: e },
        })
    }

    pub fn contains(&self, key: &ObjectKey) -> bool {
        validate_key(&key.key).is_ok() && self.object_path(key).is_file()
    }

    /// Removes every object in `namespace`. Returns how many were deleted.
    pub fn purge(&self, namespace: Namespace) -> Result<usize, StorageError> {
        let dir = self.root.join(namespace.dir_name());
        let mut n = 0;
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
            n += 1;
        }
        Ok(n)
    }

    /// Maps a locator to a filesystem path: `dropbox:p` to `<dropbox_root>/p`,
    /// `local:p` to `p` (or `<local_root>/p` when confined).
    pub fn resolve(&self, loc: &Locator) -> Result<PathBuf, StorageError> {
        match (loc.scheme, &self.local_root) {
            (Scheme::Dropbox, _) => confine(&self.dropbox_root, &loc.path),
            (Scheme::Local, Some(root)) => confine(root, &loc.path),
            (Scheme::Local, None) => Ok(PathBuf::from(&loc.path)),
        }
    }

    pub fn read_locator(&self, loc: &Locator) -> Result<Vec<u8>, StorageError> {
        let path = self.resolve(loc)?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound(loc.to_string()),
            _ => StorageError::Io { path, source: e },
        })
    }

    pub fn write_locator(&self, loc: &Locator, bytes: &[u8]) -> Result<PathBuf, StorageError> {
        let path = self.resolve(loc)?;
        Self::write_atomic(&path, bytes)?;
        Ok(path)
    }

    /// Expands a locator into image files: a file resolves to itself, a
    /// directory to its image files in name order.
    pub fn list_images(&self, loc: &Locator) -> Result<Vec<Locator>, StorageError> {
        let path = self.resolve(loc)?;
        if path.is_file() {
            return Ok(vec![loc.clone()]);
        }
        if !path.is_dir() {
            return Err(StorageError::NotFound(loc.to_string()));
        }
        let mut names: Vec<String> = fs::read_dir(&path)
            .map_err(io_err(&path))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|name| {
                Path::new(name)
                    .extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        names.sort();
        let base = loc.path.trim_end_matches('/');
        Ok(names
            .into_iter()
            .map(|n| Locator::new(loc.scheme, format!("{base}/{n}")))
            .collect())
    }

    pub fn dropbox_upload(&self, path: &str, bytes: &[u8]) -> Result<PathBuf, StorageError> {
        self.write_locator(&Locator::new(Scheme::Dropbox, path), bytes)
    }

    pub fn dropbox_download(&self, path: &str) -> Result<Vec<u8>, StorageError> {
        self.read_locator(&Locator::new(Scheme::Dropbox, path))
    }

    pub fn dropbox_list(&self, path: &str) -> Result<Vec<Locator>, StorageError> {
        self.list_images(&Locator::new(Scheme::Dropbox, path))
    }

    fn read_cached(&self, key: &ObjectKey) -> Result<Option<DMatrix<f64>>, StorageError> {
        match self.fetch_object(key) {
            Ok(bytes) => decode_matrix(&bytes).map(Some).map_err(|e| StorageError::Corrupt {
                key: key.to_string(),
                reason: e.to_string(),
            }),
            Err(StorageError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Returns the cached matrix for `key`, computing and persisting it on a miss.
    ///
    /// Concurrent callers with the same key inside this process share one
    /// computation. When the cache itself fails the value is computed anyway
    /// and reported as [`CacheStatus::Bypassed`].
    pub fn cache_get_or_compute<E>(
        &self,
        key: &CacheKey,
        compute: impl FnOnce() -> Result<DMatrix<f64>, E>,
    ) -> Result<(DMatrix<f64>, CacheStatus), E> {
        let run = |compute: Box<dyn FnOnce() -> Result<DMatrix<f64>, E> + '_>| {
            self.stats.computes.fetch_add(1, Ordering::SeqCst);
            compute()
        };
        let object = match key.object_key() {
            Ok(k) => k,
            Err(e) => {
                tracing::warn!(error = %e, "feature cache bypassed");
                self.stats.bypasses.fetch_add(1, Ordering::SeqCst);
                return run(Box::new(compute)).map(|m| (m, CacheStatus::Bypassed));
            }
        };
        let slot = self
            .inflight
            .lock()
            .entry(key.clone())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone();
        let result = {
            let _guard = slot.lock();
            match self.read_cached(&object) {
                Ok(Some(m)) => {
                    self.stats.hits.fetch_add(1, Ordering::SeqCst);
                    Ok((m, CacheStatus::Hit))
                }
                Ok(None) => {
                    self.stats.misses.fetch_add(1, Ordering::SeqCst);
                    run(Box::new(compute)).map(|m| {
                        match self.put_object(&object, &encode_matrix(&m)) {
                            Ok(()) => (m, CacheStatus::Miss),
                            Err(e) => {
                                tracing::warn!(error = %e, "feature cache write failed");
                                self.stats.bypasses.fetch_add(1, Ordering::SeqCst);
                                (m, CacheStatus::Bypassed)
                            }
                        }
                    })
                }
                Err(e) => {
                    tracing::warn!(error = %e, "feature cache read failed");
                    self.stats.bypasses.fetch_add(1, Ordering::SeqCst);
                    run(Box::new(compute)).map(|m| (m, CacheStatus::Bypassed))
                }
            }
        };
        let mut inflight = self.inflight.lock();
        if Arc::strong_count(&slot) == 2 {
            inflight.remove(key);
        }
        result
    }
}

/// Joins `rel` under `root`, refusing any path that climbs out of it.
fn confine(root: &Path, rel: &str) -> Result<PathBuf, StorageError> {
    let mut out = root.to_path_buf();
    let mut depth = 0usize;
    for comp in Path::new(rel).components() {
        match comp {
            Component::Normal(part) => {
                out.push(part);
                depth += 1;
            }
            Component::ParentDir => {
                if depth == 0 {
                    return Err(StorageError::PathEscape(rel.to_string()));
                }
                out.pop();
                depth -= 1;
            }
            Component::CurDir | Component::RootDir | Component::Prefix(_) => {}
        }
    }
    // Symlinks inside the root may still point elsewhere.
    if let (Ok(real), Ok(real_root)) = (out.canonicalize(), root.canonicalize()) {
        if !real.starts_with(&real_root) {
            return Err(StorageError::PathEscape(rel.to_string()));
        }
    }
    Ok(out)
}
