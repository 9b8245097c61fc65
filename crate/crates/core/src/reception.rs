//! Reception: accepts user requests, structures them into tasks, hands them to
//! the workflow engine and keeps the task-status table the caller polls.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::RwLock;
use regex::Regex;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::canon::canonical_json;
use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::methodology::IntentEntry;
use crate::ports::{MethodologyPort, PortError, ResultSink, WorkflowPort};
use crate::reasoner::{Reasoner, ReasonerKind, ReasonerRequest};
use crate::task::{StructuredTask, TaskResult, UserRequest, UNKNOWN_INTENT};
use crate::text;

/// Extracts one entity from the request text. The value is the lowercased
/// capture `group` (whole match when the group is absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRule {
    pub name: String,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

/// Adds `constraint` when `pattern` matches the request text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRule {
    pub pattern: String,
    pub constraint: String,
}

pub fn default_entity_rules() -> Vec<EntityRule> {
    let rule = |name: &str, pattern: &str| EntityRule {
        name: name.into(),
        pattern: pattern.into(),
        group: Some(1),
    };
    vec![
        rule(
            "party",
            r"(?i)\b(family|friends|kids|children|partner|colleagues)\b",
        ),
        rule("scope", r"(?i)\b(nearby|local|abroad|domestic)\b"),
        rule(
            "timeframe",
            r"(?i)\b(this (?:vacation|holiday|weekend|summer)|next (?:week|month)|tomorrow|today)\b",
        ),
    ]
}

pub fn default_constraint_rules() -> Vec<ConstraintRule> {
    let rule = |pattern: &str, constraint: &str| ConstraintRule {
        pattern: pattern.into(),
        constraint: constraint.into(),
    };
    vec![
        rule(r"(?i)\b(family|kids|children)\b", "family_friendly"),
        rule(r"(?i)\b(nearby|near|close)\b", "short_distance"),
    ]
}

/// Returns the first pattern that fails to compile.
pub fn check_rules(entities: &[EntityRule], constraints: &[ConstraintRule]) -> Result<(), String> {
    let patterns = entities
        .iter()
        .map(|r| &r.pattern)
        .chain(constraints.iter().map(|r| &r.pattern));
    for p in patterns {
        Regex::new(p).map_err(|e| format!("bad pattern `{p}`: {e}"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Structured {
    pub intent: String,
    pub entities: BTreeMap<String, String>,
    pub constraints: Vec<String>,
}

/// Picks the intent whose keywords share the most tokens with `text` (ties
/// by intent label), then applies the entity and constraint rules.
pub fn structure_text(
    text: &str,
    lexicon: &[IntentEntry],
    entity_rules: &[EntityRule],
    constraint_rules: &[ConstraintRule],
) -> Structured {
    let words = text::token_set(text);
    let mut best: Option<(usize, &str)> = None;
    for entry in lexicon {
        let hits = entry
            .keywords
            .iter()
            .flat_map(|k| text::tokens(k))
            .collect::<std::collections::BTreeSet<_>>()
            .intersection(&words)
            .count();
        if hits == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((h, intent)) => hits > h || (hits == h && entry.intent.as_str() < intent),
        };
        if better {
            best = Some((hits, &entry.intent));
        }
    }
    let intent = best.map_or(UNKNOWN_INTENT, |(_, i)| i).to_string();

    let mut entities = BTreeMap::new();
    for rule in entity_rules {
        let Ok(re) = Regex::new(&rule.pattern) else {
            continue;
        };
        if entities.contains_key(&rule.name) {
            continue;
        }
        if let Some(caps) = re.captures(text) {
            let m = rule.group.and_then(|g| caps.get(g)).or_else(|| caps.get(0));
            if let Some(m) = m {
                entities.insert(rule.name.clone(), m.as_str().to_lowercase());
            }
        }
    }

    let mut constraints = Vec::new();
    for rule in constraint_rules {
        let Ok(re) = Regex::new(&rule.pattern) else {
            continue;
        };
        if re.is_match(text) && !constraints.contains(&rule.constraint) {
            constraints.push(rule.constraint.clone());
        }
    }

    Structured {
        intent,
        entities,
        constraints,
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReceptionError {
    #[error("request text is empty")]
    EmptyRequest,
    #[error("downstream unavailable: {0}")]
    DownstreamUnavailable(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

impl ReceptionError {
    pub fn code(&self) -> &'static str {
        match self {
            ReceptionError::EmptyRequest => "EmptyRequest",
            ReceptionError::DownstreamUnavailable(_) => "DownstreamUnavailable",
            ReceptionError::UnknownTask(_) => "UnknownTask",
        }
    }
}

/// Answer to a status poll.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskView {
    Pending,
    Done(TaskResult),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceptionConfig {
    pub entity_rules: Vec<EntityRule>,
    pub constraint_rules: Vec<ConstraintRule>,
    /// Let the reasoner structure requests instead of the lexicon rules.
    pub use_reasoner: bool,
}

impl Default for ReceptionConfig {
    fn default() -> Self {
        Self {
            entity_rules: default_entity_rules(),
            constraint_rules: default_constraint_rules(),
            use_reasoner: false,
        }
    }
}

#[derive(Debug)]
struct TaskEntry {
    task: StructuredTask,
    instance_id: Option<String>,
    result: Option<TaskResult>,
}

#[derive(Debug)]
pub struct Reception {
    config: ReceptionConfig,
    methodologies: Arc<dyn MethodologyPort>,
    workflow: RwLock<Option<Arc<dyn WorkflowPort>>>,
    reasoner: Option<Arc<dyn Reasoner>>,
    clock: SharedClock,
    events: Recorder,
    tasks: RwLock<HashMap<String, TaskEntry>>,
    reported: Notify,
}

impl Reception {
    pub fn new(
        config: ReceptionConfig,
        methodologies: Arc<dyn MethodologyPort>,
        reasoner: Option<Arc<dyn Reasoner>>,
        clock: SharedClock,
        events: Recorder,
    ) -> Self {
        Self {
            config,
            methodologies,
            workflow: RwLock::new(None),
            reasoner,
            clock,
            events,
            tasks: RwLock::new(HashMap::new()),
            reported: Notify::new(),
        }
    }

    /// Wires the workflow engine; the engine in turn reports back to us, so
    /// the two are connected after construction.
    pub fn connect_workflow(&self, workflow: Arc<dyn WorkflowPort>) {
        *self.workflow.write() = Some(workflow);
    }

    pub async fn submit_request(
        &self,
        user_id: &str,
        text: &str,
    ) -> Result<String, ReceptionError> {
        if text.trim().is_empty() {
            return Err(ReceptionError::EmptyRequest);
        }
        let req = UserRequest {
            request_id: uuid::Uuid::new_v4().to_string(),
            user_id: user_id.to_string(),
            text: text.to_string(),
            submitted_at: self.clock.now(),
        };
        self.events.record(
            "reception",
            "submit_request",
            format!("user {user_id} asks: {text}"),
            [req.request_id.clone()],
        );
        let task = self.structure_request(&req).await?;
        let workflow = self.workflow.read().clone().ok_or_else(|| {
            ReceptionError::DownstreamUnavailable("workflow engine not connected".into())
        })?;
        self.tasks.write().insert(
            task.task_id.clone(),
            TaskEntry {
                task: task.clone(),
                instance_id: None,
                result: None,
            },
        );
        match workflow.start(&task).await {
            Ok(instance_id) => {
                if let Some(e) = self.tasks.write().get_mut(&task.task_id) {
                    e.instance_id = Some(instance_id);
                }
                Ok(task.task_id)
            }
            Err(err) => {
                self.tasks.write().remove(&task.task_id);
                Err(ReceptionError::DownstreamUnavailable(err.to_string()))
            }
        }
    }

    pub async fn structure_request(
        &self,
        req: &UserRequest,
    ) -> Result<StructuredTask, ReceptionError> {
        let lexicon = self
            .methodologies
            .lexicon()
            .await
            .map_err(|e| ReceptionError::DownstreamUnavailable(e.to_string()))?;
        let structured = match self.reasoner_structure(&req.text, &lexicon).await {
            Some(s) => s,
            None => structure_text(
                &req.text,
                &lexicon,
                &self.config.entity_rules,
                &self.config.constraint_rules,
            ),
        };
        let task = StructuredTask {
            task_id: uuid::Uuid::new_v4().to_string(),
            request_id: req.request_id.clone(),
            user_id: req.user_id.clone(),
            intent: structured.intent,
            entities: structured.entities,
            constraints: structured.constraints,
            raw_text: req.text.clone(),
        };
        self.events.record(
            "reception",
            "structure_request",
            format!(
                "intent {}; entities {}; constraints {}",
                task.intent,
                canonical_json(&task.entities),
                canonical_json(&task.constraints)
            ),
            [task.task_id.clone()],
        );
        Ok(task)
    }

    async fn reasoner_structure(&self, text: &str, lexicon: &[IntentEntry]) -> Option<Structured> {
        if !self.config.use_reasoner {
            return None;
        }
        let reasoner = self.reasoner.as_ref()?;
        let req = ReasonerRequest {
            kind: ReasonerKind::StructureTask,
            payload: serde_json::json!({
                "text": text,
                "lexicon": lexicon,
                "entity_rules": self.config.entity_rules,
                "constraint_rules": self.config.constraint_rules,
            }),
            budget: 16 * 1024,
        };
        let resp = match reasoner.complete(&req).await {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!("structure_task completion failed, using rules: {e}");
                return None;
            }
        };
        let parsed: Structured = serde_json::from_str(&resp.text).ok()?;
        let known =
            parsed.intent == UNKNOWN_INTENT || lexicon.iter().any(|e| e.intent == parsed.intent);
        known.then_some(parsed)
    }

    pub fn get_status(&self, task_id: &str) -> Result<TaskView, ReceptionError> {
        let tasks = self.tasks.read();
        let entry = tasks
            .get(task_id)
            .ok_or_else(|| ReceptionError::UnknownTask(task_id.to_string()))?;
        Ok(match &entry.result {
            Some(r) => TaskView::Done(r.clone()),
            None => TaskView::Pending,
        })
    }

    pub fn task(&self, task_id: &str) -> Option<StructuredTask> {
        self.tasks.read().get(task_id).map(|e| e.task.clone())
    }

    pub fn instance_of(&self, task_id: &str) -> Option<String> {
        self.tasks
            .read()
            .get(task_id)
            .and_then(|e| e.instance_id.clone())
    }

    /// Waits until the task's result has been reported.
    pub async fn wait_result(
        &self,
        task_id: &str,
        timeout: Duration,
    ) -> Result<Option<TaskResult>, ReceptionError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.reported.notified();
            if let TaskView::Done(r) = self.get_status(task_id)? {
                return Ok(Some(r));
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(None);
            }
        }
    }

    /// Stores a reported result. The first report wins; later ones are ignored.
    pub fn accept_result(&self, result: &TaskResult) -> Result<bool, ReceptionError> {
        let mut tasks = self.tasks.write();
        let entry = tasks
            .get_mut(&result.task_id)
            .ok_or_else(|| ReceptionError::UnknownTask(result.task_id.clone()))?;
        if entry.result.is_some() {
            return Ok(false);
        }
        entry.result = Some(result.clone());
        drop(tasks);
        self.events.record(
            "reception",
            "deliver_result",
            format!("{}: {}", result.status.as_str(), result.summary),
            [result.task_id.clone(), result.trace_ref.clone()],
        );
        self.reported.notify_waiters();
        Ok(true)
    }
}

#[async_trait]
impl ResultSink for Reception {
    async fn deliver(&self, result: &TaskResult) -> Result<(), PortError> {
        self.accept_result(result)
            .map(|_| ())
            .map_err(|e| PortError::Rejected {
                code: e.code().into(),
                message: e.to_string(),
            })
    }
}
