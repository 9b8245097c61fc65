//! Embedded key-value persistence used by the stateful capabilities.
//!
//! Records are grouped into namespaces. [`FileKv`] stores one file per record
//! and replaces it atomically (write to a temporary file, then rename), so a
//! crash leaves either the old or the new record on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

#[derive(Debug, thiserror::Error)]
pub enum KvError {
    #[error("storage io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record {namespace}/{key}: {reason}")]
    Corrupt {
        namespace: String,
        key: String,
        reason: String,
    },
}

pub trait KvStore: Send + Sync + std::fmt::Debug {
    fn get(&self, namespace: &str, key: &str) -> Result<Option<Vec<u8>>, KvError>;
    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> Result<(), KvError>;
    fn delete(&self, namespace: &str, key: &str) -> Result<bool, KvError>;
    /// All records of a namespace ordered by key.
    fn scan(&self, namespace: &str) -> Result<Vec<(String, Vec<u8>)>, KvError>;
}

pub type SharedKv = Arc<dyn KvStore>;

pub fn get_json<T: serde::de::DeserializeOwned>(
    kv: &dyn KvStore,
    namespace: &str,
    key: &str,
) -> Result<Option<T>, KvError> {
    match kv.get(namespace, key)? {
        None => Ok(None),
        Some(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| KvError::Corrupt {
                namespace: namespace.to_string(),
                key: key.to_string(),
                reason: e.to_string(),
            }),
    }
}

pub fn put_json<T: serde::Serialize>(
    kv: &dyn KvStore,
    namespace: &str,
    key: &str,
    value: &T,
) -> Result<(), KvError> {
    let bytes = serde_json::to_vec(value).expect("in-memory values always serialize");
    kv.put(namespace, key, &bytes)
}

pub fn scan_json<T: serde::de::DeserializeOwned>(
    kv: &dyn KvStore,
    namespace: &str,
) -> Result<Vec<(String, T)>, KvError> {
    kv.scan(namespace)?
        .into_iter()
        .map(|(key, bytes)| {
            serde_json::from_slice(&bytes)
                .map(|v| (key.clone(), v))
                .map_err(|e| KvError::Corrupt {
                    namespace: namespace.to_string(),
                    key,
                    reason: e.to_string(),
                })
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct MemoryKv {
    data: RwLock<BTreeMap<String, BTreeMap<String, Vec<u8>>>>,
}

impl MemoryKv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared() -> SharedKv {
        Arc::new(Self::new())
    }
}

impl KvStore for MemoryKv {
    fn get(&self, namespace: &str, key: &str) -> Result<Option<Vec<u8>>, KvError> {
        Ok(self
            .data
            .read()
            .get(namespace)
            .and_then(|ns| ns.get(key))
            .cloned())
    }

    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> Result<(), KvError> {
        self.data
            .write()
            .entry(namespace.to_string())
            .or_default()
            .insert(key.to_string(), value.to_vec());
        Ok(())
    }

    fn delete(&self, namespace: &str, key: &str) -> Result<bool, KvError> {
        Ok(self
            .data
            .write()
            .get_mut(namespace)
            .map(|ns| ns.remove(key).is_some())
            .unwrap_or(false))
    }

    fn scan(&self, namespace: &str) -> Result<Vec<(String, Vec<u8>)>, KvError> {
        Ok(self
            .data
            .read()
            .get(namespace)
            .map(|ns| ns.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default())
    }
}

const NAME_ESCAPES: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_');

/// Directory-backed store: `<root>/<namespace>/<escaped key>.json`.
#[derive(Debug)]
pub struct FileKv {
    root: PathBuf,
    write_lock: parking_lot::Mutex<()>,
}

impl FileKv {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, KvError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|source| KvError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(Self {
            root,
            write_lock: parking_lot::Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ns_dir(&self, namespace: &str) -> PathBuf {
        self.root
            .join(utf8_percent_encode(namespace, NAME_ESCAPES).to_string())
    }

    fn record_path(&self, namespace: &str, key: &str) -> PathBuf {
        self.ns_dir(namespace)
            .join(format!("{}.json", utf8_percent_encode(key, NAME_ESCAPES)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KvError + '_ {
    move |source| KvError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl KvStore for FileKv {
    fn get(&self, namespace: &str, key: &str) -> Result<Option<Vec<u8>>, KvError> {
        let path = self.record_path(namespace, key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn put(&self, namespace: &str, key: &str, value: &[u8]) -> Result<(), KvError> {
        let _guard = self.write_lock.lock();
        let dir = self.ns_dir(namespace);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = self.record_path(namespace, key);
        let tmp = path.with_extension("json.tmp");
        let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(value).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn delete(&self, namespace: &str, key: &str) -> Result<bool, KvError> {
        let _guard = self.write_lock.lock();
        let path = self.record_path(namespace, key);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn scan(&self, namespace: &str) -> Result<Vec<(String, Vec<u8>)>, KvError> {
        let dir = self.ns_dir(namespace);
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".json") else {
                continue;
            };
            let key = percent_decode_str(stem).decode_utf8_lossy().into_owned();
            let bytes = fs::read(entry.path()).map_err(io_err(&entry.path()))?;
            out.push((key, bytes));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }
}
