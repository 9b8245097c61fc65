//! Ordered event log shared by the capabilities of one stack.
//!
//! Events feed scenario transcripts. Every event carries a sequence number
//! drawn from a single counter, so the log is totally ordered.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub actor: String,
    pub action: String,
    pub summary: String,
    #[serde(default)]
    pub refs: Vec<String>,
}

#[derive(Debug, Default)]
struct LogInner {
    next_seq: u64,
    events: Vec<Event>,
}

/// Cheap to clone; a disabled recorder drops everything.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    inner: Option<Arc<Mutex<LogInner>>>,
}

impl Recorder {
    pub fn enabled() -> Self {
        Self {
            inner: Some(Arc::new(Mutex::new(LogInner::default()))),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn record(
        &self,
        actor: &str,
        action: &str,
        summary: impl Into<String>,
        refs: impl IntoIterator<Item = String>,
    ) {
        let Some(inner) = &self.inner else { return };
        let mut log = inner.lock();
        log.next_seq += 1;
        let seq = log.next_seq;
        log.events.push(Event {
            seq,
            actor: actor.to_string(),
            action: action.to_string(),
            summary: summary.into(),
            refs: refs.into_iter().collect(),
        });
    }

    /// Removes and returns everything recorded so far.
    pub fn drain(&self) -> Vec<Event> {
        match &self.inner {
            Some(inner) => std::mem::take(&mut inner.lock().events),
            None => Vec::new(),
        }
    }

    pub fn snapshot(&self) -> Vec<Event> {
        match &self.inner {
            Some(inner) => inner.lock().events.clone(),
            None => Vec::new(),
        }
    }
}
