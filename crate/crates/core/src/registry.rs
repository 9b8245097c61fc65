//! Tool registry: registration, heartbeat liveness, stale sweep and
//! discovery with a deterministic scorer.
//!
//! A tool's score for a query is `a * overlap + b * outputs + c * params`:
//!
//! * `overlap`: fraction of the query's description tokens found in the
//!   tool's description and tags;
//! * `outputs`: fraction of the requested output keys named in the tool's
//!   output schema (0 when none are requested);
//! * `params`: fraction of the tool's required parameters that bind to a
//!   context key (1 when the tool has no required parameters).
//!
//! Candidates are ranked by score, descending, then by `tool_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use chrono::{DateTime, Duration, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canon::canonical_json;
use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::ports::{
    DiscoverError, DiscoveryPort, HeartbeatAck, HeartbeatRequest, RegistryCallError, RegistryPort,
};
use crate::reasoner::{RankCandidate, Ranking, Reasoner, ReasonerKind, ReasonerRequest};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Number,
    Boolean,
    List,
    Object,
}

impl ParamType {
    pub fn of(v: &Value) -> Option<ParamType> {
        match v {
            Value::String(_) => Some(ParamType::String),
            Value::Number(_) => Some(ParamType::Number),
            Value::Bool(_) => Some(ParamType::Boolean),
            Value::Array(_) => Some(ParamType::List),
            Value::Object(_) => Some(ParamType::Object),
            Value::Null => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::List => "list",
            ParamType::Object => "object",
        }
    }

    pub fn accepts(self, v: &Value) -> bool {
        ParamType::of(v) == Some(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolState {
    #[default]
    Available,
    Suspect,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub endpoint: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub output_schema: Vec<ParamSpec>,
    #[serde(default)]
    pub broker_id: String,
    #[serde(default)]
    pub state: ToolState,
    #[serde(default)]
    pub last_heartbeat_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub registered_at: Option<DateTime<Utc>>,
    /// Bumped each time the owning broker re-registers the tool.
    #[serde(default)]
    pub version: u64,
}

impl ToolDescriptor {
    /// Itemized problems; empty when the descriptor is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.tool_id.trim().is_empty() {
            out.push("tool_id is empty".to_string());
        }
        if self.name.trim().is_empty() {
            out.push("name is empty".to_string());
        }
        match url::Url::parse(&self.endpoint) {
            Ok(u) if matches!(u.scheme(), "http" | "https") => {}
            Ok(u) => out.push(format!("endpoint scheme `{}` is not http(s)", u.scheme())),
            Err(e) => out.push(format!(
                "endpoint `{}` is not a valid URL: {e}",
                self.endpoint
            )),
        }
        for (field, specs) in [
            ("params", &self.params),
            ("output_schema", &self.output_schema),
        ] {
            let mut seen = BTreeSet::new();
            for p in specs.iter() {
                if p.name.trim().is_empty() {
                    out.push(format!("{field} has an unnamed entry"));
                } else if !seen.insert(p.name.as_str()) {
                    out.push(format!("{field} name `{}` is duplicated", p.name));
                }
            }
        }
        out
    }

    pub fn required_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.required)
    }
}

/// A context key offered to discovery, optionally with the type of its value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "ContextKeyRepr")]
pub struct ContextKey {
    pub name: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ParamType>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ContextKeyRepr {
    Name(String),
    Full {
        name: String,
        #[serde(rename = "type", default)]
        kind: Option<ParamType>,
    },
}

impl From<ContextKeyRepr> for ContextKey {
    fn from(r: ContextKeyRepr) -> Self {
        match r {
            ContextKeyRepr::Name(name) => ContextKey { name, kind: None },
            ContextKeyRepr::Full { name, kind } => ContextKey { name, kind },
        }
    }
}

impl ContextKey {
    pub fn named(name: &str) -> Self {
        ContextKey {
            name: name.to_string(),
            kind: None,
        }
    }

    pub fn typed(name: &str, value: &Value) -> Self {
        ContextKey {
            name: name.to_string(),
            kind: ParamType::of(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryQuery {
    pub step_description: String,
    #[serde(default)]
    pub context_keys: Vec<ContextKey>,
    #[serde(default)]
    pub required_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBinding {
    /// Take the value of this context key.
    FromContext(String),
    /// No context key fits; the caller must supply the value.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub tool_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub selected: String,
    pub bound_params: BTreeMap<String, ParamBinding>,
    pub score: f64,
    pub alternatives: Vec<Alternative>,
    /// Descriptor of the selected tool, so the caller can reach its endpoint.
    pub tool: ToolDescriptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreWeights {
    pub overlap: f64,
    pub outputs: f64,
    pub params: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            overlap: 0.6,
            outputs: 0.25,
            params: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    pub heartbeat_interval_s: i64,
    pub suspect_after_missed: i64,
    pub evict_after_missed: i64,
    pub retention_s: i64,
    pub weights: ScoreWeights,
    pub threshold: f64,
    pub epsilon: f64,
    /// Let the reasoner reorder candidates within `epsilon` of the best score.
    pub reasoner_assist: bool,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_s: 10,
            suspect_after_missed: 2,
            evict_after_missed: 3,
            retention_s: 24 * 3600,
            weights: ScoreWeights::default(),
            threshold: 0.2,
            epsilon: 0.05,
            reasoner_assist: true,
        }
    }
}

/// Per-signal score of one tool for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub overlap: f64,
    pub outputs: f64,
    pub params: f64,
    pub total: f64,
}

fn types_compatible(key: &ContextKey, param: &ParamSpec) -> bool {
    key.kind.is_none_or(|k| k == param.kind)
}

/// Binds `param` to a context key: exact name first, then the key whose
/// name tokens all occur in the parameter description (more tokens first,
/// then by name). Type-incompatible keys are never bound.
pub fn bind_param(param: &ParamSpec, context_keys: &[ContextKey]) -> Option<String> {
    if let Some(k) = context_keys
        .iter()
        .find(|k| k.name == param.name && types_compatible(k, param))
    {
        return Some(k.name.clone());
    }
    let desc = text::token_set(&param.description);
    context_keys
        .iter()
        .filter(|k| types_compatible(k, param))
        .filter_map(|k| {
            let toks = text::token_set(&k.name);
            (!toks.is_empty() && toks.is_subset(&desc)).then_some((toks.len(), &k.name))
        })
        .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, name)| name.clone())
}

pub fn score_tool(tool: &ToolDescriptor, query: &DiscoveryQuery, w: &ScoreWeights) -> Score {
    let step = text::token_set(&query.step_description);
    let mut offered = text::token_set(&tool.description);
    for tag in &tool.tags {
        offered.extend(text::tokens(tag));
    }
    let overlap = if step.is_empty() {
        0.0
    } else {
        step.intersection(&offered).count() as f64 / step.len() as f64
    };
    let outputs = if query.required_outputs.is_empty() {
        0.0
    } else {
        let hits = query
            .required_outputs
            .iter()
            .filter(|o| tool.output_schema.iter().any(|s| &s.name == *o))
            .count();
        hits as f64 / query.required_outputs.len() as f64
    };
    let required: Vec<&ParamSpec> = tool.required_params().collect();
    let params = if required.is_empty() {
        1.0
    } else {
        let bound = required
            .iter()
            .filter(|p| bind_param(p, &query.context_keys).is_some())
            .count();
        bound as f64 / required.len() as f64
    };
    Score {
        overlap,
        outputs,
        params,
        total: w.overlap * overlap + w.outputs * outputs + w.params * params,
    }
}

pub fn bind_params(
    tool: &ToolDescriptor,
    context_keys: &[ContextKey],
) -> BTreeMap<String, ParamBinding> {
    let mut out = BTreeMap::new();
    for p in &tool.params {
        match bind_param(p, context_keys) {
            Some(k) => {
                out.insert(p.name.clone(), ParamBinding::FromContext(k));
            }
            None if p.required => {
                out.insert(p.name.clone(), ParamBinding::Unresolved);
            }
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("invalid descriptor: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("tool `{tool_id}` is registered by broker `{owner}`")]
    DuplicateToolOtherBroker { tool_id: String, owner: String },
    #[error("unknown broker `{0}`")]
    UnknownBroker(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        match self {
            RegistryError::Validation(_) => "ValidationError",
            RegistryError::DuplicateToolOtherBroker { .. } => "DuplicateToolOtherBroker",
            RegistryError::UnknownBroker(_) => "UnknownBroker",
            RegistryError::UnknownTool(_) => "UnknownTool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub tool_id: String,
    pub from: ToolState,
    /// `None` when the tool was deleted after the retention period.
    pub to: Option<ToolState>,
}

#[derive(Debug, Default)]
struct Tables {
    tools: BTreeMap<String, ToolDescriptor>,
    brokers: BTreeSet<String>,
}

#[derive(Debug)]
pub struct ToolRegistry {
    config: RegistryConfig,
    clock: SharedClock,
    events: Recorder,
    reasoner: Option<Arc<dyn Reasoner>>,
    tables: RwLock<Tables>,
}

impl ToolRegistry {
    pub fn new(
        config: RegistryConfig,
        clock: SharedClock,
        reasoner: Option<Arc<dyn Reasoner>>,
        events: Recorder,
    ) -> Self {
        Self {
            config,
            clock,
            events,
            reasoner,
            tables: RwLock::new(Tables::default()),
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn register_tool(
        &self,
        desc: &ToolDescriptor,
        broker_id: &str,
    ) -> Result<String, RegistryError> {
        let problems = desc.violations();
        if !problems.is_empty() {
            return Err(RegistryError::Validation(problems));
        }
        if broker_id.trim().is_empty() {
            return Err(RegistryError::Validation(vec!["broker_id is empty".into()]));
        }
        let now = self.clock.now();
        let mut t = self.tables.write();
        let version = match t.tools.get(&desc.tool_id) {
            Some(prev) if prev.broker_id != broker_id => {
                return Err(RegistryError::DuplicateToolOtherBroker {
                    tool_id: desc.tool_id.clone(),
                    owner: prev.broker_id.clone(),
                })
            }
            Some(prev) => prev.version + 1,
            None => 1,
        };
        let mut stored = desc.clone();
        stored.broker_id = broker_id.to_string();
        stored.state = ToolState::Available;
        stored.last_heartbeat_at = Some(now);
        stored.registered_at = Some(now);
        stored.version = version;
        t.tools.insert(stored.tool_id.clone(), stored);
        t.brokers.insert(broker_id.to_string());
        drop(t);
        self.events.record(
            "registry",
            "register_tool",
            format!(
                "{} v{version} registered by broker {broker_id}",
                desc.tool_id
            ),
            [],
        );
        Ok(desc.tool_id.clone())
    }

    pub fn deregister(&self, tool_id: &str) -> Result<ToolDescriptor, RegistryError> {
        let removed = self.tables.write().tools.remove(tool_id);
        let removed = removed.ok_or_else(|| RegistryError::UnknownTool(tool_id.to_string()))?;
        self.events
            .record("registry", "deregister", format!("{tool_id} removed"), []);
        Ok(removed)
    }

    pub fn heartbeat(&self, req: &HeartbeatRequest) -> Result<HeartbeatAck, RegistryError> {
        let now = self.clock.now();
        let mut t = self.tables.write();
        if !t.brokers.contains(&req.broker_id) {
            return Err(RegistryError::UnknownBroker(req.broker_id.clone()));
        }
        let mut ack = HeartbeatAck::default();
        for id in &req.tool_ids {
            match t.tools.get_mut(id) {
                Some(tool)
                    if tool.broker_id == req.broker_id && tool.state != ToolState::Unavailable =>
                {
                    tool.last_heartbeat_at = Some(now);
                    tool.state = ToolState::Available;
                    ack.acknowledged.push(id.clone());
                }
                _ => ack.reregister.push(id.clone()),
            }
        }
        Ok(ack)
    }

    /// Applies the liveness policy as of `now`. A tool that skips past the
    /// suspect window in a single sweep is reported as passing through it.
    pub fn sweep_stale(&self, now: DateTime<Utc>) -> Vec<StateChange> {
        let interval = Duration::seconds(self.config.heartbeat_interval_s);
        let suspect_after = interval * self.config.suspect_after_missed as i32;
        let evict_after = interval * self.config.evict_after_missed as i32;
        let retention = Duration::seconds(self.config.retention_s);
        let mut changes = Vec::new();
        let mut t = self.tables.write();
        let mut deleted = Vec::new();
        for tool in t.tools.values_mut() {
            let silent = now - tool.last_heartbeat_at.unwrap_or(now);
            let id = || tool.tool_id.clone();
            if tool.state == ToolState::Available && silent > suspect_after {
                changes.push(StateChange {
                    tool_id: id(),
                    from: ToolState::Available,
                    to: Some(ToolState::Suspect),
                });
                tool.state = ToolState::Suspect;
            }
            if tool.state == ToolState::Suspect && silent > evict_after {
                changes.push(StateChange {
                    tool_id: id(),
                    from: ToolState::Suspect,
                    to: Some(ToolState::Unavailable),
                });
                tool.state = ToolState::Unavailable;
            }
            if tool.state == ToolState::Unavailable && silent > retention {
                changes.push(StateChange {
                    tool_id: id(),
                    from: ToolState::Unavailable,
                    to: None,
                });
                deleted.push(id());
            }
        }
        for id in deleted {
            t.tools.remove(&id);
        }
        drop(t);
        for c in &changes {
            let to =
                c.to.map_or("deleted".to_string(), |s| format!("{s:?}").to_lowercase());
            self.events.record(
                "registry",
                "sweep",
                format!(
                    "{}: {} -> {to}",
                    c.tool_id,
                    format!("{:?}", c.from).to_lowercase()
                ),
                [],
            );
        }
        changes
    }

    pub fn list(&self) -> Vec<ToolDescriptor> {
        self.tables.read().tools.values().cloned().collect()
    }

    pub fn get(&self, tool_id: &str) -> Option<ToolDescriptor> {
        self.tables.read().tools.get(tool_id).cloned()
    }

    /// Deterministic ranking of the available tools that reach the threshold.
    pub fn rank(&self, query: &DiscoveryQuery) -> (Vec<(ToolDescriptor, f64)>, f64) {
        let t = self.tables.read();
        let mut scored: Vec<(ToolDescriptor, f64)> = t
            .tools
            .values()
            .filter(|d| d.state == ToolState::Available)
            .map(|d| (d.clone(), score_tool(d, query, &self.config.weights).total))
            .collect();
        drop(t);
        let best = scored.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        scored.retain(|(_, s)| *s >= self.config.threshold);
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.tool_id.cmp(&b.0.tool_id))
        });
        (scored, best)
    }

    pub async fn discover(&self, query: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError> {
        self.sweep_stale(self.clock.now());
        let (mut ranked, best) = self.rank(query);
        if ranked.is_empty() {
            self.events.record(
                "registry",
                "discover",
                format!(
                    "\"{}\" -> no tool (best score {best:.3} below {:.3})",
                    query.step_description, self.config.threshold
                ),
                [],
            );
            return Err(DiscoverError::NoToolFound {
                step_description: query.step_description.clone(),
                best_score: best,
            });
        }
        self.assist(query, &mut ranked).await;
        let (tool, score) = ranked.remove(0);
        let result = DiscoveryResult {
            selected: tool.tool_id.clone(),
            bound_params: bind_params(&tool, &query.context_keys),
            score,
            alternatives: ranked
                .iter()
                .map(|(d, s)| Alternative {
                    tool_id: d.tool_id.clone(),
                    score: *s,
                })
                .collect(),
            tool,
        };
        self.events.record(
            "registry",
            "discover",
            format!(
                "\"{}\" -> {} (score {score:.3}); params {}",
                query.step_description,
                result.selected,
                canonical_json(&result.bound_params)
            ),
            [],
        );
        Ok(result)
    }

    /// Lets the reasoner reorder the candidates whose scores lie within
    /// epsilon of the best one. Any failure keeps the deterministic order.
    async fn assist(&self, query: &DiscoveryQuery, ranked: &mut [(ToolDescriptor, f64)]) {
        if !self.config.reasoner_assist {
            return;
        }
        let Some(reasoner) = &self.reasoner else {
            return;
        };
        let top = ranked[0].1;
        let band = ranked
            .iter()
            .take_while(|(_, s)| top - *s <= self.config.epsilon)
            .count();
        if band < 2 {
            return;
        }
        let candidates: Vec<RankCandidate> = ranked[..band]
            .iter()
            .map(|(d, s)| RankCandidate {
                tool_id: d.tool_id.clone(),
                score: *s,
                description: d.description.clone(),
            })
            .collect();
        let req = ReasonerRequest {
            kind: ReasonerKind::RankTools,
            payload: serde_json::json!({
                "step_description": query.step_description,
                "candidates": candidates,
            }),
            budget: 16 * 1024,
        };
        let ranking = match reasoner.complete(&req).await {
            Ok(resp) => match serde_json::from_str::<Ranking>(&resp.text) {
                Ok(r) => r.ranking,
                Err(e) => {
                    tracing::warn!("unparseable tool ranking ignored: {e}");
                    return;
                }
            },
            Err(e) => {
                tracing::warn!("tool ranking failed, keeping scorer order: {e}");
                return;
            }
        };
        let position = |id: &str| ranking.iter().position(|r| r == id).unwrap_or(usize::MAX);
        ranked[..band].sort_by_key(|(d, _)| position(&d.tool_id));
    }
}

#[async_trait]
impl DiscoveryPort for ToolRegistry {
    async fn discover(&self, query: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError> {
        ToolRegistry::discover(self, query).await
    }
}

fn call_error(e: RegistryError) -> RegistryCallError {
    RegistryCallError::Rejected {
        code: e.code().into(),
        message: e.to_string(),
    }
}

#[async_trait]
impl RegistryPort for ToolRegistry {
    async fn register_tool(
        &self,
        desc: &ToolDescriptor,
        broker_id: &str,
    ) -> Result<String, RegistryCallError> {
        ToolRegistry::register_tool(self, desc, broker_id).map_err(call_error)
    }

    async fn heartbeat(&self, req: &HeartbeatRequest) -> Result<HeartbeatAck, RegistryCallError> {
        ToolRegistry::heartbeat(self, req).map_err(call_error)
    }
}
