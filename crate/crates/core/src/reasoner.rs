//! Completion interface behind every reasoning call, with three backends:
//!
//! * [`ScriptedReasoner`] replays fixture responses keyed by request kind and
//!   the SHA-256 of the canonical payload; a missing key is an error.
//! * [`RuleReasoner`] computes responses from the payload deterministically.
//! * [`GatewayReasoner`] forwards to an HTTP endpoint. Disabled unless configured.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::canon::{canonical_hash, canonical_json};
use crate::methodology::{IntentEntry, Methodology};
use crate::planning::derive_plan;
use crate::reception::{structure_text, ConstraintRule, EntityRule};
use crate::task::StructuredTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonerKind {
    StructureTask,
    GeneratePlan,
    RankTools,
}

impl fmt::Display for ReasonerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReasonerKind::StructureTask => "structure_task",
            ReasonerKind::GeneratePlan => "generate_plan",
            ReasonerKind::RankTools => "rank_tools",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub kind: ReasonerKind,
    pub payload: Value,
    /// Maximum response size in bytes.
    pub budget: usize,
}

impl ReasonerRequest {
    pub fn payload_hash(&self) -> String {
        canonical_hash(&self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerResponse {
    pub text: String,
    pub backend: String,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasonerError {
    #[error("no scripted response for {kind} payload {hash}")]
    ScriptMiss { kind: ReasonerKind, hash: String },
    #[error("gateway timed out after {0} ms")]
    GatewayTimeout(u64),
    #[error("gateway error: {0}")]
    GatewayError(String),
    #[error("payload does not match request kind: {0}")]
    BadPayload(String),
    #[error("response of {len} bytes exceeds budget of {budget}")]
    BudgetExceeded { len: usize, budget: usize },
    #[error("cannot load reasoner script {path}: {reason}")]
    Script { path: String, reason: String },
}

#[async_trait]
pub trait Reasoner: Send + Sync + fmt::Debug {
    async fn complete(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError>;
    fn label(&self) -> &'static str;
}

fn within_budget(text: String, budget: usize) -> Result<String, ReasonerError> {
    if text.len() > budget {
        return Err(ReasonerError::BudgetExceeded {
            len: text.len(),
            budget,
        });
    }
    Ok(text)
}

/// One recorded completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub kind: ReasonerKind,
    pub payload_hash: String,
    pub response: String,
    /// The payload the hash was computed from, kept for auditing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn record(&mut self, req: &ReasonerRequest, response: &str) {
        let hash = req.payload_hash();
        self.entries
            .retain(|e| !(e.kind == req.kind && e.payload_hash == hash));
        self.entries.push(ScriptEntry {
            kind: req.kind,
            payload_hash: hash,
            response: response.to_string(),
            payload: Some(req.payload.clone()),
        });
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedReasoner {
    responses: HashMap<(ReasonerKind, String), String>,
}

impl ScriptedReasoner {
    pub fn new(script: Script) -> Self {
        Self {
            responses: script
                .entries
                .into_iter()
                .map(|e| ((e.kind, e.payload_hash), e.response))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ReasonerError> {
        let script: Script = serde_json::from_str(text).map_err(|e| ReasonerError::Script {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        Ok(Self::new(script))
    }

    pub fn from_path(path: &Path) -> Result<Self, ReasonerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReasonerError::Script {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ReasonerError::Script { reason, .. } => ReasonerError::Script {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}

#[async_trait]
impl Reasoner for ScriptedReasoner {
    async fn complete(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        let hash = req.payload_hash();
        let text = self
            .responses
            .get(&(req.kind, hash.clone()))
            .cloned()
            .ok_or(ReasonerError::ScriptMiss {
                kind: req.kind,
                hash,
            })?;
        Ok(ReasonerResponse {
            text: within_budget(text, req.budget)?,
            backend: self.label().into(),
            deterministic: true,
        })
    }

    fn label(&self) -> &'static str {
        "scripted"
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructurePayload {
    pub text: String,
    pub lexicon: Vec<IntentEntry>,
    #[serde(default)]
    pub entity_rules: Vec<EntityRule>,
    #[serde(default)]
    pub constraint_rules: Vec<ConstraintRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanTaskView {
    intent: String,
    #[serde(default)]
    entities: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    constraints: Vec<String>,
    raw_text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanPayload {
    task: PlanTaskView,
    methodology: Methodology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCandidate {
    pub tool_id: String,
    pub score: f64,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankPayload {
    step_description: String,
    candidates: Vec<RankCandidate>,
}

/// Response document of a `rank_tools` completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub ranking: Vec<String>,
}

fn bad_payload(e: serde_json::Error) -> ReasonerError {
    ReasonerError::BadPayload(e.to_string())
}

/// Deterministic production fallback.
#[derive(Debug, Clone, Default)]
pub struct RuleReasoner;

impl RuleReasoner {
    fn respond(&self, req: &ReasonerRequest) -> Result<String, ReasonerError> {
        match req.kind {
            ReasonerKind::StructureTask => {
                let p: StructurePayload =
                    serde_json::from_value(req.payload.clone()).map_err(bad_payload)?;
                let s = structure_text(&p.text, &p.lexicon, &p.entity_rules, &p.constraint_rules);
                Ok(canonical_json(&s))
            }
            ReasonerKind::GeneratePlan => {
                let p: PlanPayload =
                    serde_json::from_value(req.payload.clone()).map_err(bad_payload)?;
                let task = StructuredTask {
                    task_id: String::new(),
                    request_id: String::new(),
                    user_id: String::new(),
                    intent: p.task.intent,
                    entities: p.task.entities,
                    constraints: p.task.constraints,
                    raw_text: p.task.raw_text,
                };
                Ok(derive_plan(&task, &p.methodology).to_canonical_json())
            }
            ReasonerKind::RankTools => {
                let p: RankPayload =
                    serde_json::from_value(req.payload.clone()).map_err(bad_payload)?;
                let _ = p.step_description;
                let mut c = p.candidates;
                c.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then_with(|| a.tool_id.cmp(&b.tool_id))
                });
                Ok(canonical_json(&Ranking {
                    ranking: c.into_iter().map(|c| c.tool_id).collect(),
                }))
            }
        }
    }
}

#[async_trait]
impl Reasoner for RuleReasoner {
    async fn complete(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        Ok(ReasonerResponse {
            text: within_budget(self.respond(req)?, req.budget)?,
            backend: self.label().into(),
            deterministic: true,
        })
    }

    fn label(&self) -> &'static str {
        "rules"
    }
}

/// Thin HTTP client for an external completion service.
///
/// Request body: `{"kind", "payload", "budget"}`. The reply is either a JSON
/// object with a `text` field or a raw text body.
#[derive(Debug, Clone)]
pub struct GatewayReasoner {
    client: reqwest::Client,
    url: String,
    timeout: Duration,
    in_flight: Arc<Semaphore>,
}

impl GatewayReasoner {
    pub fn new(url: &str, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            client: reqwest::Client::new(),
            url: url.to_string(),
            timeout,
            in_flight: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }
}

#[async_trait]
impl Reasoner for GatewayReasoner {
    async fn complete(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        let _permit = self
            .in_flight
            .acquire()
            .await
            .map_err(|e| ReasonerError::GatewayError(e.to_string()))?;
        let call = async {
            let resp = self
                .client
                .post(&self.url)
                .json(&json!({"kind": req.kind, "payload": req.payload, "budget": req.budget}))
                .send()
                .await
                .map_err(|e| ReasonerError::GatewayError(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(ReasonerError::GatewayError(format!(
                    "status {}",
                    resp.status()
                )));
            }
            resp.text()
                .await
                .map_err(|e| ReasonerError::GatewayError(e.to_string()))
        };
        let body = tokio::time::timeout(self.timeout, call)
            .await
            .map_err(|_| ReasonerError::GatewayTimeout(self.timeout.as_millis() as u64))??;
        let text = serde_json::from_str::<Value>(&body)
            .ok()
            .and_then(|v| v.get("text").and_then(Value::as_str).map(str::to_string))
            .unwrap_or(body);
        Ok(ReasonerResponse {
            text: within_budget(text, req.budget)?,
            backend: self.label().into(),
            deterministic: false,
        })
    }

    fn label(&self) -> &'static str {
        "gateway"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Scripted,
    Rules,
    Gateway,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Backend::Scripted),
            "rules" => Ok(Backend::Rules),
            "gateway" => Ok(Backend::Gateway),
            other => Err(format!("unknown reasoner backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerConfig {
    pub backend: Backend,
    /// Script file for the scripted backend; the shipped demo script when unset.
    pub script_path: Option<PathBuf>,
    pub gateway_url: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub budget: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            script_path: None,
            gateway_url: None,
            timeout_ms: 20_000,
            max_in_flight: 4,
            budget: 64 * 1024,
        }
    }
}

pub const DEMO_SCRIPT: &str = include_str!("../fixtures/reasoner/demo-script.json");

pub fn build_reasoner(cfg: &ReasonerConfig) -> Result<Arc<dyn Reasoner>, ReasonerError> {
    Ok(match cfg.backend {
        Backend::Scripted => match &cfg.script_path {
            Some(path) => Arc::new(ScriptedReasoner::from_path(path)?),
            None => Arc::new(ScriptedReasoner::from_json(DEMO_SCRIPT)?),
        },
        Backend::Rules => Arc::new(RuleReasoner),
        Backend::Gateway => {
            let url = cfg.gateway_url.as_deref().ok_or_else(|| {
                ReasonerError::GatewayError("reasoner.gateway_url is not configured".into())
            })?;
            Arc::new(GatewayReasoner::new(
                url,
                Duration::from_millis(cfg.timeout_ms),
                cfg.max_in_flight,
            ))
        }
    })
}

/// Backend that answers from the rules and records every exchange, used to
/// author scripted fixtures.
#[derive(Debug, Default)]
pub struct RecordingReasoner {
    inner: RuleReasoner,
    script: parking_lot::Mutex<Script>,
}

impl RecordingReasoner {
    pub fn script(&self) -> Script {
        self.script.lock().clone()
    }
}

#[async_trait]
impl Reasoner for RecordingReasoner {
    async fn complete(&self, req: &ReasonerRequest) -> Result<ReasonerResponse, ReasonerError> {
        let resp = self.inner.complete(req).await?;
        self.script.lock().record(req, &resp.text);
        Ok(resp)
    }

    fn label(&self) -> &'static str {
        "rules"
    }
}
