//! Methodology store: versioned expert-knowledge records, best-match lookup and
//! the expert editing operations.
//!
//! Every mutation produces a new immutable version. Versions are persisted as
//! canonical JSON, so fetching `(id, version)` always yields the same bytes.

use std::collections::BTreeMap;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon::canonical_json;
use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::kv::{KvError, SharedKv};
use crate::planning::StepSource;
use crate::ports::{MethodologyPort, PortError};
use crate::task::StructuredTask;
use crate::text;

const KV_NAMESPACE: &str = "methodology";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessStep {
    pub title: String,
    pub description: String,
    #[serde(default)]
    pub required_data: Vec<String>,
    #[serde(default)]
    pub produces: Vec<String>,
    /// Where the step's data comes from; tool discovery when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<StepSource>,
    /// Parameter template handed to the plan step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<serde_json::Map<String, Value>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPoint {
    pub after_step: usize,
    pub logic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExceptionCase {
    pub trigger: String,
    pub handling: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub name: String,
    pub content_ref: String,
}

/// The seven-part expert record, plus an intent label and keyword lexicon
/// that tie it to structured tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Methodology {
    #[serde(default)]
    pub methodology_id: String,
    pub intent: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    pub description: String,
    pub process_steps: Vec<ProcessStep>,
    #[serde(default)]
    pub decision_points: Vec<DecisionPoint>,
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default)]
    pub exceptions: Vec<ExceptionCase>,
    #[serde(default)]
    pub suggestions: Vec<String>,
    #[serde(default)]
    pub references: Vec<Reference>,
    #[serde(default)]
    pub version: u64,
    #[serde(default)]
    pub updated_by: String,
    #[serde(default)]
    pub updated_at: Option<DateTime<Utc>>,
}

impl Methodology {
    /// Itemized invariant violations; empty when the document is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.intent.trim().is_empty() {
            out.push("intent is empty".to_string());
        }
        if self.process_steps.is_empty() {
            out.push("process_steps is empty".to_string());
        }
        for (i, step) in self.process_steps.iter().enumerate() {
            if step.title.trim().is_empty() {
                out.push(format!("process_steps[{i}].title is empty"));
            }
        }
        for (i, dp) in self.decision_points.iter().enumerate() {
            if dp.after_step >= self.process_steps.len() {
                out.push(format!(
                    "decision_points[{i}].after_step {} is not a valid step index",
                    dp.after_step
                ));
            }
        }
        out
    }

    /// Content that conditions planning; excludes version bookkeeping so that
    /// identical content hashes identically across versions.
    pub fn planning_view(&self) -> Value {
        serde_json::json!({
            "methodology_id": self.methodology_id,
            "intent": self.intent,
            "description": self.description,
            "process_steps": self.process_steps,
            "decision_points": self.decision_points,
            "rules": self.rules,
            "exceptions": self.exceptions,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MethodologyError {
    #[error("invalid methodology: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown methodology `{0}`")]
    UnknownMethodology(String),
    #[error("position {position} out of range for {len} steps")]
    BadPosition { position: usize, len: usize },
    #[error(
        "version conflict on `{id}`: current version is {current}, write was based on {supplied}"
    )]
    VersionConflict {
        id: String,
        current: u64,
        supplied: u64,
    },
    #[error(transparent)]
    Storage(#[from] KvError),
}

impl MethodologyError {
    pub fn code(&self) -> &'static str {
        match self {
            MethodologyError::Validation(_) => "ValidationError",
            MethodologyError::UnknownMethodology(_) => "UnknownMethodology",
            MethodologyError::BadPosition { .. } => "BadPosition",
            MethodologyError::VersionConflict { .. } => "VersionConflict",
            MethodologyError::Storage(_) => "StorageError",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// A methodology with a different intent is returned only when its
    /// keyword-overlap score is strictly greater than this.
    pub threshold: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { threshold: 2 }
    }
}

#[derive(Debug)]
pub struct MethodologyStore {
    kv: SharedKv,
    clock: SharedClock,
    config: MatchConfig,
    events: Recorder,
    /// id -> canonical JSON of every version, index = version - 1.
    versions: RwLock<BTreeMap<String, Vec<String>>>,
}

fn version_key(id: &str, version: u64) -> String {
    format!("{id}@{version:010}")
}

impl MethodologyStore {
    pub fn open(
        kv: SharedKv,
        clock: SharedClock,
        config: MatchConfig,
        events: Recorder,
    ) -> Result<Self, MethodologyError> {
        let mut versions: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (_, bytes) in kv.scan(KV_NAMESPACE)? {
            let doc: Methodology =
                serde_json::from_slice(&bytes).map_err(|e| KvError::Corrupt {
                    namespace: KV_NAMESPACE.into(),
                    key: String::new(),
                    reason: e.to_string(),
                })?;
            versions
                .entry(doc.methodology_id.clone())
                .or_default()
                .push(String::from_utf8_lossy(&bytes).into_owned());
        }
        Ok(Self {
            kv,
            clock,
            config,
            events,
            versions: RwLock::new(versions),
        })
    }

    /// Creates or replaces a methodology. For an existing id the document's
    /// `version` must equal the stored latest version.
    pub fn upsert_methodology(
        &self,
        mut doc: Methodology,
        expert_id: &str,
    ) -> Result<(String, u64), MethodologyError> {
        let problems = doc.violations();
        if !problems.is_empty() {
            return Err(MethodologyError::Validation(problems));
        }
        if doc.methodology_id.trim().is_empty() {
            doc.methodology_id = format!("m-{}", uuid::Uuid::new_v4().simple());
        }
        let mut versions = self.versions.write();
        let current = versions
            .get(&doc.methodology_id)
            .map(|v| v.len() as u64)
            .unwrap_or(0);
        if current > 0 && doc.version != current {
            return Err(MethodologyError::VersionConflict {
                id: doc.methodology_id.clone(),
                current,
                supplied: doc.version,
            });
        }
        let stored = self.commit(&mut versions, doc, current, expert_id)?;
        self.events.record(
            "methodology",
            "upsert",
            format!(
                "stored `{}` version {} with {} steps",
                stored.methodology_id,
                stored.version,
                stored.process_steps.len()
            ),
            [stored.methodology_id.clone()],
        );
        Ok((stored.methodology_id, stored.version))
    }

    fn commit(
        &self,
        versions: &mut BTreeMap<String, Vec<String>>,
        mut doc: Methodology,
        current: u64,
        expert_id: &str,
    ) -> Result<Methodology, MethodologyError> {
        doc.version = current + 1;
        doc.updated_by = expert_id.to_string();
        doc.updated_at = Some(self.clock.now());
        let json = canonical_json(&doc);
        self.kv.put(
            KV_NAMESPACE,
            &version_key(&doc.methodology_id, doc.version),
            json.as_bytes(),
        )?;
        versions
            .entry(doc.methodology_id.clone())
            .or_default()
            .push(json);
        Ok(doc)
    }

    fn mutate(
        &self,
        id: &str,
        expected_version: Option<u64>,
        expert_id: &str,
        edit: impl FnOnce(&mut Methodology) -> Result<(), MethodologyError>,
    ) -> Result<Methodology, MethodologyError> {
        let mut versions = self.versions.write();
        let latest = versions
            .get(id)
            .and_then(|v| v.last())
            .ok_or_else(|| MethodologyError::UnknownMethodology(id.to_string()))?;
        let mut doc: Methodology = serde_json::from_str(latest).expect("stored versions parse");
        let current = doc.version;
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(MethodologyError::VersionConflict {
                    id: id.to_string(),
                    current,
                    supplied: expected,
                });
            }
        }
        edit(&mut doc)?;
        let problems = doc.violations();
        if !problems.is_empty() {
            return Err(MethodologyError::Validation(problems));
        }
        self.commit(&mut versions, doc, current, expert_id)
    }

    /// Inserts a process step; decision points at or after `position` shift by one.
    pub fn insert_step(
        &self,
        id: &str,
        position: usize,
        step: ProcessStep,
        expert_id: &str,
        expected_version: Option<u64>,
    ) -> Result<u64, MethodologyError> {
        let title = step.title.clone();
        let doc = self.mutate(id, expected_version, expert_id, |doc| {
            let len = doc.process_steps.len();
            if position > len {
                return Err(MethodologyError::BadPosition { position, len });
            }
            doc.process_steps.insert(position, step);
            for dp in &mut doc.decision_points {
                if dp.after_step >= position {
                    dp.after_step += 1;
                }
            }
            Ok(())
        })?;
        self.events.record(
            "methodology",
            "insert_step",
            format!(
                "expert {expert_id} inserted \"{title}\" at position {position}; `{id}` now version {} with {} steps",
                doc.version,
                doc.process_steps.len()
            ),
            [id.to_string()],
        );
        Ok(doc.version)
    }

    /// Removes a process step together with decision points attached to it.
    pub fn delete_step(
        &self,
        id: &str,
        position: usize,
        expert_id: &str,
        expected_version: Option<u64>,
    ) -> Result<u64, MethodologyError> {
        let doc = self.mutate(id, expected_version, expert_id, |doc| {
            let len = doc.process_steps.len();
            if position >= len {
                return Err(MethodologyError::BadPosition { position, len });
            }
            doc.process_steps.remove(position);
            doc.decision_points.retain(|dp| dp.after_step != position);
            for dp in &mut doc.decision_points {
                if dp.after_step > position {
                    dp.after_step -= 1;
                }
            }
            Ok(())
        })?;
        Ok(doc.version)
    }

    pub fn get(&self, id: &str) -> Option<Methodology> {
        self.versions
            .read()
            .get(id)
            .and_then(|v| v.last())
            .map(|json| serde_json::from_str(json).expect("stored versions parse"))
    }

    /// Canonical JSON of a specific version.
    pub fn get_version_json(&self, id: &str, version: u64) -> Option<String> {
        let index = usize::try_from(version).ok()?.checked_sub(1)?;
        self.versions.read().get(id)?.get(index).cloned()
    }

    pub fn get_version(&self, id: &str, version: u64) -> Option<Methodology> {
        self.get_version_json(id, version)
            .map(|json| serde_json::from_str(&json).expect("stored versions parse"))
    }

    /// Latest version of every methodology, ordered by id.
    pub fn list(&self) -> Vec<Methodology> {
        self.versions
            .read()
            .values()
            .filter_map(|v| v.last())
            .map(|json| serde_json::from_str(json).expect("stored versions parse"))
            .collect()
    }

    /// `(intent, keywords)` pairs used by reception's intent lexicon.
    pub fn intent_lexicon(&self) -> Vec<IntentEntry> {
        self.list()
            .into_iter()
            .map(|m| IntentEntry {
                intent: m.intent,
                keywords: m.keywords,
            })
            .collect()
    }

    pub fn match_methodology(&self, task: &StructuredTask) -> Option<Methodology> {
        let found = match_among(&self.list(), task, self.config.threshold);
        match &found {
            Some(m) => self.events.record(
                "methodology",
                "match",
                format!(
                    "intent `{}` matched `{}` version {} ({} steps)",
                    task.intent,
                    m.methodology_id,
                    m.version,
                    m.process_steps.len()
                ),
                [task.task_id.clone(), m.methodology_id.clone()],
            ),
            None => self.events.record(
                "methodology",
                "match",
                format!("intent `{}` matched no methodology", task.intent),
                [task.task_id.clone()],
            ),
        }
        found
    }
}

#[async_trait]
impl MethodologyPort for MethodologyStore {
    async fn match_task(&self, task: &StructuredTask) -> Result<Option<Methodology>, PortError> {
        Ok(self.match_methodology(task))
    }

    async fn fetch(&self, id: &str) -> Result<Option<Methodology>, PortError> {
        Ok(self.get(id))
    }

    async fn lexicon(&self) -> Result<Vec<IntentEntry>, PortError> {
        Ok(self.intent_lexicon())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentEntry {
    pub intent: String,
    pub keywords: Vec<String>,
}

/// Case-folded token intersection count between task text and description.
pub fn keyword_score(task_text: &str, description: &str) -> usize {
    text::overlap_count(task_text, description)
}

/// Exact intent match wins; ties go to the higher keyword score, then to the
/// lexicographically smaller id. Without an intent match, only candidates
/// scoring above `threshold` qualify.
pub fn match_among(
    candidates: &[Methodology],
    task: &StructuredTask,
    threshold: usize,
) -> Option<Methodology> {
    let scored = candidates
        .iter()
        .map(|m| (m, keyword_score(&task.raw_text, &m.description)));
    let best = |pool: Vec<(&Methodology, usize)>| {
        pool.into_iter()
            .min_by(|(a, sa), (b, sb)| {
                sb.cmp(sa)
                    .then_with(|| a.methodology_id.cmp(&b.methodology_id))
            })
            .map(|(m, _)| m.clone())
    };
    let same_intent: Vec<_> = scored
        .clone()
        .filter(|(m, _)| m.intent == task.intent)
        .collect();
    if !same_intent.is_empty() {
        return best(same_intent);
    }
    best(scored.filter(|(_, s)| *s > threshold).collect())
}
