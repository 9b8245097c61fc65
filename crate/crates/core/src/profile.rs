//! Profile store: long-term, namespaced configuration (`user:{id}`, `system`).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::kv::{self, KvError, SharedKv};
use crate::ports::{PortError, ProfilePort};

const KV_NAMESPACE: &str = "profile";

/// Largest accepted serialized value.
pub const MAX_VALUE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub namespace: String,
    pub key: String,
    pub value: Value,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("profile key must not be empty")]
    EmptyKey,
    #[error("value of {0} bytes exceeds the {MAX_VALUE_BYTES} byte limit")]
    ValueTooLarge(usize),
    #[error(transparent)]
    Storage(#[from] KvError),
}

impl ProfileError {
    pub fn code(&self) -> &'static str {
        match self {
            ProfileError::EmptyKey => "EmptyKey",
            ProfileError::ValueTooLarge(_) => "ValueTooLarge",
            ProfileError::Storage(_) => "StorageError",
        }
    }
}

pub fn user_namespace(user_id: &str) -> String {
    format!("user:{user_id}")
}

fn record_key(namespace: &str, key: &str) -> String {
    serde_json::to_string(&(namespace, key)).expect("strings serialize")
}

#[derive(Debug)]
pub struct ProfileStore {
    kv: SharedKv,
    clock: SharedClock,
    events: Recorder,
    entries: RwLock<BTreeMap<(String, String), ProfileEntry>>,
    lookups: AtomicU64,
}

impl ProfileStore {
    pub fn open(kv: SharedKv, clock: SharedClock, events: Recorder) -> Result<Self, ProfileError> {
        let entries = kv::scan_json::<ProfileEntry>(kv.as_ref(), KV_NAMESPACE)?
            .into_iter()
            .map(|(_, e)| ((e.namespace.clone(), e.key.clone()), e))
            .collect();
        Ok(Self {
            kv,
            clock,
            events,
            entries: RwLock::new(entries),
            lookups: AtomicU64::new(0),
        })
    }

    pub fn put(
        &self,
        namespace: &str,
        key: &str,
        value: Value,
    ) -> Result<ProfileEntry, ProfileError> {
        if key.trim().is_empty() {
            return Err(ProfileError::EmptyKey);
        }
        let size = serde_json::to_vec(&value)
            .map(|v| v.len())
            .unwrap_or(usize::MAX);
        if size > MAX_VALUE_BYTES {
            return Err(ProfileError::ValueTooLarge(size));
        }
        let entry = ProfileEntry {
            namespace: namespace.to_string(),
            key: key.to_string(),
            value,
            updated_at: self.clock.now(),
        };
        let mut entries = self.entries.write();
        kv::put_json(
            self.kv.as_ref(),
            KV_NAMESPACE,
            &record_key(namespace, key),
            &entry,
        )?;
        entries.insert((namespace.to_string(), key.to_string()), entry.clone());
        Ok(entry)
    }

    /// `None` is the normal not-found answer.
    pub fn get(&self, namespace: &str, key: &str) -> Option<Value> {
        self.entries
            .read()
            .get(&(namespace.to_string(), key.to_string()))
            .map(|e| e.value.clone())
    }

    pub fn entry(&self, namespace: &str, key: &str) -> Option<ProfileEntry> {
        self.entries
            .read()
            .get(&(namespace.to_string(), key.to_string()))
            .cloned()
    }

    pub fn delete(&self, namespace: &str, key: &str) -> Result<bool, ProfileError> {
        let mut entries = self.entries.write();
        self.kv.delete(KV_NAMESPACE, &record_key(namespace, key))?;
        Ok(entries
            .remove(&(namespace.to_string(), key.to_string()))
            .is_some())
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lookups served through [`ProfilePort`].
    pub fn lookup_count(&self) -> u64 {
        self.lookups.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl ProfilePort for ProfileStore {
    async fn lookup(&self, namespace: &str, key: &str) -> Result<Option<Value>, PortError> {
        self.lookups.fetch_add(1, Ordering::SeqCst);
        let value = self.get(namespace, key);
        let summary = match &value {
            Some(v) => format!("{namespace}/{key} = {}", crate::canon::canonical_json(v)),
            None => format!("{namespace}/{key} not found"),
        };
        self.events.record("profile", "get", summary, []);
        Ok(value)
    }
}
