//! Planning: turns a structured task and its matched methodology into a
//! validated plan of execute / branch / loop steps.
//!
//! The reasoner is asked for a plan document first. Its output is parsed
//! strictly and validated; when it is unusable the plan is derived directly
//! from the methodology's process steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::binding::{Template, INDEX_KEY, ITEM_KEY};
use crate::canon::canonical_json;
use crate::events::Recorder;
use crate::expr::Expr;
use crate::methodology::Methodology;
use crate::ports::{MethodologyPort, PlanningPort, PortError};
use crate::reasoner::{Reasoner, ReasonerError, ReasonerKind, ReasonerRequest};
use crate::task::StructuredTask;

/// Placeholder ids in reasoner-produced documents; the planner assigns real ones.
pub const DRAFT_ID: &str = "draft";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Execute,
    Branch,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Profile,
    #[default]
    Tool,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub condition: String,
    pub then_steps: Vec<ProcStep>,
    pub else_steps: Vec<ProcStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub over_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u32>,
    pub exported_keys: Vec<String>,
    pub body_steps: Vec<ProcStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcStep {
    pub step_id: String,
    pub kind: StepKind,
    pub title: String,
    pub description: String,
    pub required_keys: Vec<String>,
    pub output_keys: Vec<String>,
    pub source: StepSource,
    pub binding: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<BranchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "loop")]
    pub loop_spec: Option<LoopSpec>,
}

impl ProcStep {
    pub fn execute(step_id: &str, title: &str, source: StepSource) -> ProcStep {
        ProcStep {
            step_id: step_id.to_string(),
            kind: StepKind::Execute,
            title: title.to_string(),
            description: title.to_string(),
            required_keys: Vec::new(),
            output_keys: Vec::new(),
            source,
            binding: Map::new(),
            branch: None,
            loop_spec: None,
        }
    }

    /// Nested steps of a branch or loop, in declaration order.
    pub fn children(&self) -> Vec<&ProcStep> {
        let mut out = Vec::new();
        if let Some(b) = &self.branch {
            out.extend(b.then_steps.iter());
            out.extend(b.else_steps.iter());
        }
        if let Some(l) = &self.loop_spec {
            out.extend(l.body_steps.iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub plan_id: String,
    pub task_id: String,
    pub methodology_id: String,
    pub result_keys: Vec<String>,
    pub steps: Vec<ProcStep>,
}

impl Plan {
    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }

    /// Every step title in depth-first order.
    pub fn all_titles(&self) -> Vec<String> {
        fn walk(steps: &[ProcStep], out: &mut Vec<String>) {
            for s in steps {
                out.push(s.title.clone());
                if let Some(b) = &s.branch {
                    walk(&b.then_steps, out);
                    walk(&b.else_steps, out);
                }
                if let Some(l) = &s.loop_spec {
                    walk(&l.body_steps, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.steps, &mut out);
        out
    }

    /// Same plan with run-specific ids blanked, for comparing plans across runs.
    pub fn without_ids(&self) -> Plan {
        Plan {
            plan_id: DRAFT_ID.into(),
            task_id: DRAFT_ID.into(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("plan parse error at {position}: {reason}")]
pub struct ParseError {
    pub position: String,
    pub reason: String,
}

const KINDS: [&str; 3] = ["execute", "branch", "loop"];

fn check_kinds(steps: &Value, path: &str) -> Result<(), ParseError> {
    let Some(items) = steps.as_array() else {
        return Ok(());
    };
    for (i, step) in items.iter().enumerate() {
        let here = format!("{path}[{i}]");
        if let Some(kind) = step.get("kind").and_then(Value::as_str) {
            if !KINDS.contains(&kind) {
                return Err(ParseError {
                    position: format!("{here}.kind"),
                    reason: format!("unknown kind `{kind}`"),
                });
            }
        }
        if let Some(b) = step.get("branch") {
            check_kinds(
                b.get("then_steps").unwrap_or(&Value::Null),
                &format!("{here}.branch.then_steps"),
            )?;
            check_kinds(
                b.get("else_steps").unwrap_or(&Value::Null),
                &format!("{here}.branch.else_steps"),
            )?;
        }
        if let Some(l) = step.get("loop") {
            check_kinds(
                l.get("body_steps").unwrap_or(&Value::Null),
                &format!("{here}.loop.body_steps"),
            )?;
        }
    }
    Ok(())
}

fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .unwrap_or(t);
    t.strip_suffix("```").unwrap_or(t).trim()
}

/// Parses the plan-JSON document. Unknown fields and kinds are rejected.
pub fn parse_reasoner_plan(raw: &str) -> Result<Plan, ParseError> {
    let text = strip_fences(raw);
    let value: Value = serde_json::from_str(text).map_err(|e| ParseError {
        position: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    check_kinds(value.get("steps").unwrap_or(&Value::Null), "steps")?;
    serde_json::from_value(value).map_err(|e| ParseError {
        position: "document".into(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationCode {
    EmptyPlan,
    EmptyBody,
    UnboundKey,
    KindMismatch,
    DuplicateStepId,
    MissingField,
    BadCondition,
    BadLoop,
    BadBinding,
    BadExport,
    UnproducedResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step_id: Option<String>,
    pub code: ViolationCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.step_id {
            Some(id) => write!(f, "step {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

struct Validator {
    violations: Vec<Violation>,
    seen_ids: BTreeSet<String>,
    produced: BTreeSet<String>,
}

impl Validator {
    fn push(&mut self, step: Option<&ProcStep>, code: ViolationCode, message: String) {
        self.violations.push(Violation {
            step_id: step.map(|s| s.step_id.clone()),
            code,
            message,
        });
    }

    fn need(&mut self, step: &ProcStep, key: &str, available: &BTreeSet<String>, what: &str) {
        if !available.contains(key) {
            self.push(
                Some(step),
                ViolationCode::UnboundKey,
                format!("unbound key `{key}` ({what})"),
            );
        }
    }

    fn condition(&mut self, step: &ProcStep, src: &str, available: &BTreeSet<String>) {
        match Expr::parse(src) {
            Ok(expr) => {
                for key in expr.required_keys() {
                    self.need(step, &key, available, "read by condition");
                }
            }
            Err(e) => self.push(
                Some(step),
                ViolationCode::BadCondition,
                format!("condition `{src}`: {e}"),
            ),
        }
    }

    /// Validates `steps` in order; returns keys guaranteed available afterwards.
    fn steps(&mut self, steps: &[ProcStep], mut available: BTreeSet<String>) -> BTreeSet<String> {
        for step in steps {
            available = self.step(step, available);
        }
        available
    }

    fn step(&mut self, step: &ProcStep, available: BTreeSet<String>) -> BTreeSet<String> {
        if step.step_id.trim().is_empty() {
            self.push(
                Some(step),
                ViolationCode::MissingField,
                "empty step_id".into(),
            );
        } else if !self.seen_ids.insert(step.step_id.clone()) {
            self.push(
                Some(step),
                ViolationCode::DuplicateStepId,
                format!("duplicate step_id `{}`", step.step_id),
            );
        }
        if step.title.trim().is_empty() {
            self.push(
                Some(step),
                ViolationCode::MissingField,
                "empty title".into(),
            );
        }
        for key in &step.required_keys {
            self.need(step, key, &available, "required by step");
        }
        let consistent = match step.kind {
            StepKind::Execute => step.branch.is_none() && step.loop_spec.is_none(),
            StepKind::Branch => step.branch.is_some() && step.loop_spec.is_none(),
            StepKind::Loop => step.loop_spec.is_some() && step.branch.is_none(),
        };
        if !consistent {
            self.push(
                Some(step),
                ViolationCode::KindMismatch,
                format!(
                    "kind {:?} does not match the branch/loop fields present",
                    step.kind
                ),
            );
            return available;
        }
        if step.kind != StepKind::Execute && !step.binding.is_empty() {
            // never read by the engine, so any content is a planning mistake
            self.push(
                Some(step),
                ViolationCode::BadBinding,
                format!("{:?} steps take no binding", step.kind).to_lowercase(),
            );
        }
        match step.kind {
            StepKind::Execute => self.execute(step, available),
            StepKind::Branch => self.branch(step, available),
            StepKind::Loop => self.looping(step, available),
        }
    }

    fn execute(&mut self, step: &ProcStep, mut available: BTreeSet<String>) -> BTreeSet<String> {
        match Template::from_binding(&step.binding) {
            Err(e) => self.push(Some(step), ViolationCode::BadBinding, e.to_string()),
            Ok(t) => {
                let mut scope = available.clone();
                if let Some(each) = &t.each {
                    if step.source != StepSource::Tool {
                        self.push(
                            Some(step),
                            ViolationCode::BadBinding,
                            "`$each` is only valid on tool steps".into(),
                        );
                    }
                    self.need(step, each, &available, "iterated by `$each`");
                    scope.insert(ITEM_KEY.into());
                    scope.insert(INDEX_KEY.into());
                }
                if let Some(cond) = &t.keep_if {
                    if t.each.is_none() {
                        self.push(
                            Some(step),
                            ViolationCode::BadBinding,
                            "`$keep_if` requires `$each`".into(),
                        );
                    }
                    if let Err(e) = Expr::parse(cond) {
                        self.push(
                            Some(step),
                            ViolationCode::BadCondition,
                            format!("`$keep_if` `{cond}`: {e}"),
                        );
                    }
                }
                for root in t.referenced_roots() {
                    self.need(step, &root, &scope, "referenced by binding");
                }
                match step.source {
                    StepSource::Profile if step.output_keys.is_empty() => self.push(
                        Some(step),
                        ViolationCode::MissingField,
                        "profile lookup declares no output keys".into(),
                    ),
                    StepSource::Internal => {
                        for key in &step.output_keys {
                            if !t.params.contains_key(key) {
                                self.push(
                                    Some(step),
                                    ViolationCode::BadBinding,
                                    format!("internal step has no binding for output `{key}`"),
                                );
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        for key in &step.output_keys {
            self.produced.insert(key.clone());
            available.insert(key.clone());
        }
        available
    }

    fn branch(&mut self, step: &ProcStep, mut available: BTreeSet<String>) -> BTreeSet<String> {
        let spec = step.branch.as_ref().expect("checked by caller");
        self.condition(step, &spec.condition, &available);
        let after_then = self.steps(&spec.then_steps, available.clone());
        let after_else = self.steps(&spec.else_steps, available.clone());
        let both: BTreeSet<String> = after_then.intersection(&after_else).cloned().collect();
        for key in &step.output_keys {
            if !both.contains(key) {
                self.push(
                    Some(step),
                    ViolationCode::BadExport,
                    format!("output `{key}` is not produced on both arms"),
                );
            }
        }
        available.extend(both);
        available
    }

    fn looping(&mut self, step: &ProcStep, mut available: BTreeSet<String>) -> BTreeSet<String> {
        let spec = step.loop_spec.as_ref().expect("checked by caller");
        let mut body_scope = available.clone();
        body_scope.insert(INDEX_KEY.into());
        match (&spec.over_key, &spec.condition) {
            (Some(over), None) => {
                self.need(step, over, &available, "iterated by loop");
                body_scope.insert(ITEM_KEY.into());
                if spec.max_iterations == Some(0) {
                    self.push(
                        Some(step),
                        ViolationCode::BadLoop,
                        "max_iterations must be at least 1".into(),
                    );
                }
            }
            (None, Some(cond)) => {
                let mut cond_scope = available.clone();
                cond_scope.insert(INDEX_KEY.into());
                self.condition(step, cond, &cond_scope);
                match spec.max_iterations {
                    None => self.push(
                        Some(step),
                        ViolationCode::BadLoop,
                        "condition loop without max_iterations".into(),
                    ),
                    Some(0) => self.push(
                        Some(step),
                        ViolationCode::BadLoop,
                        "max_iterations must be at least 1".into(),
                    ),
                    Some(_) => {}
                }
            }
            _ => self.push(
                Some(step),
                ViolationCode::BadLoop,
                "loop needs exactly one of over_key or condition".into(),
            ),
        }
        if spec.body_steps.is_empty() {
            self.push(
                Some(step),
                ViolationCode::EmptyBody,
                "loop body is empty".into(),
            );
        }
        let before_body: BTreeSet<String> = body_scope.clone();
        let after_body = self.steps(&spec.body_steps, body_scope);
        for key in &spec.exported_keys {
            if before_body.contains(key) || !after_body.contains(key) {
                self.push(
                    Some(step),
                    ViolationCode::BadExport,
                    format!("exported key `{key}` is not produced by the loop body"),
                );
            }
        }
        for key in &step.output_keys {
            if !spec.exported_keys.contains(key) {
                self.push(
                    Some(step),
                    ViolationCode::BadExport,
                    format!("loop output `{key}` is not an exported key"),
                );
            }
        }
        for key in &spec.exported_keys {
            self.produced.insert(key.clone());
            available.insert(key.clone());
        }
        available
    }
}

/// Checks every plan and step invariant plus dataflow well-formedness.
/// `seed_keys` are the keys present before the first step (task entities).
/// All violations are returned, not just the first.
pub fn validate_plan(plan: &Plan, seed_keys: &[String]) -> Result<(), Vec<Violation>> {
    let mut v = Validator {
        violations: Vec::new(),
        seen_ids: BTreeSet::new(),
        produced: BTreeSet::new(),
    };
    if plan.steps.is_empty() {
        v.push(None, ViolationCode::EmptyPlan, "empty plan".into());
    }
    let seeds: BTreeSet<String> = seed_keys.iter().cloned().collect();
    v.steps(&plan.steps, seeds);
    for key in &plan.result_keys {
        if !v.produced.contains(key) {
            v.push(
                None,
                ViolationCode::UnproducedResult,
                format!("result key `{key}` is not produced by any step"),
            );
        }
    }
    if v.violations.is_empty() {
        Ok(())
    } else {
        Err(v.violations)
    }
}

struct Guard {
    /// Wraps the steps after this process-step index; `None` wraps everything.
    after: Option<usize>,
    step: ProcStep,
}

fn keys_available_after(
    m: &Methodology,
    entities: &BTreeSet<String>,
    keys: &[String],
) -> Option<Option<usize>> {
    let mut avail = entities.clone();
    if keys.iter().all(|k| avail.contains(k)) {
        return Some(None);
    }
    for (i, step) in m.process_steps.iter().enumerate() {
        avail.extend(step.produces.iter().cloned());
        if keys.iter().all(|k| avail.contains(k)) {
            return Some(Some(i));
        }
    }
    None
}

fn guard_step(
    step_id: String,
    title: String,
    description: String,
    condition: String,
    required: Vec<String>,
) -> ProcStep {
    ProcStep {
        step_id,
        kind: StepKind::Branch,
        title,
        description,
        required_keys: required,
        output_keys: Vec::new(),
        source: StepSource::Internal,
        binding: Map::new(),
        branch: Some(BranchSpec {
            condition,
            then_steps: Vec::new(),
            else_steps: Vec::new(),
        }),
        loop_spec: None,
    }
}

/// Deterministic derivation of a plan from a methodology.
///
/// Each process step becomes one execute step. Decision points and rules
/// whose condition parses and reads only declared data keys become branch
/// steps that guard the remaining steps; other decision points are appended
/// to their step's description as advisory text.
pub fn derive_plan(task: &StructuredTask, m: &Methodology) -> Plan {
    let entities: BTreeSet<String> = task.entities.keys().cloned().collect();
    let mut declared = entities.clone();
    for s in &m.process_steps {
        declared.extend(s.produces.iter().cloned());
    }

    let mut base: Vec<ProcStep> = m
        .process_steps
        .iter()
        .enumerate()
        .map(|(i, s)| ProcStep {
            step_id: format!("s{}", i + 1),
            kind: StepKind::Execute,
            title: s.title.clone(),
            description: s.description.clone(),
            required_keys: s.required_data.clone(),
            output_keys: s.produces.clone(),
            source: s.source.unwrap_or_default(),
            binding: s.binding.clone().unwrap_or_default(),
            branch: None,
            loop_spec: None,
        })
        .collect();

    let mut guards: Vec<Guard> = Vec::new();
    for (n, dp) in m.decision_points.iter().enumerate() {
        let compiled = dp.condition.as_ref().and_then(|c| {
            let expr = Expr::parse(c).ok()?;
            let keys = expr.required_keys();
            if !keys.iter().all(|k| declared.contains(k)) {
                return None;
            }
            // the condition can only run once its keys exist
            let ready = keys_available_after(m, &entities, &keys)?;
            let after = match ready {
                Some(r) if r > dp.after_step => Some(r),
                _ => Some(dp.after_step),
            };
            Some(Guard {
                after,
                step: guard_step(
                    format!("d{}", n + 1),
                    format!("Decision: {}", dp.logic),
                    dp.logic.clone(),
                    c.clone(),
                    keys,
                ),
            })
        });
        match compiled {
            Some(g) => guards.push(g),
            None => {
                if let Some(target) = base.get_mut(dp.after_step) {
                    target.description = format!("{} (decision: {})", target.description, dp.logic);
                }
            }
        }
    }
    for (n, rule) in m.rules.iter().enumerate() {
        let Ok(expr) = Expr::parse(rule) else {
            continue;
        };
        let keys = expr.required_keys();
        if keys.is_empty() || !keys.iter().all(|k| declared.contains(k)) {
            continue;
        }
        if let Some(after) = keys_available_after(m, &entities, &keys) {
            guards.push(Guard {
                after,
                step: guard_step(
                    format!("r{}", n + 1),
                    format!("Rule: {rule}"),
                    rule.clone(),
                    rule.clone(),
                    keys,
                ),
            });
        }
    }
    // outermost guard first: earlier position, then declaration order
    guards.sort_by_key(|g| g.after.map(|a| a as i64).unwrap_or(-1));

    let steps = nest(base, &guards, 0);
    let result_keys = m
        .process_steps
        .iter()
        .rev()
        .find(|s| !s.produces.is_empty())
        .map(|s| s.produces.clone())
        .unwrap_or_default();
    Plan {
        plan_id: DRAFT_ID.into(),
        task_id: DRAFT_ID.into(),
        methodology_id: m.methodology_id.clone(),
        result_keys,
        steps,
    }
}

/// Builds the step list for process steps `offset..`, wrapping the tail after
/// each guard position into that guard's `then` arm.
fn nest(mut remaining: Vec<ProcStep>, guards: &[Guard], offset: usize) -> Vec<ProcStep> {
    let Some((first, rest)) = guards.split_first() else {
        return remaining;
    };
    let split = first
        .after
        .map(|a| a + 1)
        .unwrap_or(0)
        .saturating_sub(offset)
        .min(remaining.len());
    let tail = remaining.split_off(split);
    let mut guard = first.step.clone();
    let new_offset = offset + split;
    guard.branch.as_mut().expect("guard is a branch").then_steps = nest(tail, rest, new_offset);
    remaining.push(guard);
    remaining
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanningError {
    #[error("planning failed: {0}")]
    Failed(String),
    #[error("planning capability unavailable: {0}")]
    Unavailable(String),
}

fn planning_payload(task: &StructuredTask, m: &Methodology) -> Value {
    json!({
        "task": {
            "intent": task.intent,
            "entities": task.entities,
            "constraints": task.constraints,
            "raw_text": task.raw_text,
        },
        "methodology": m.planning_view(),
    })
}

/// Plan generation against a reasoner backend.
pub async fn generate_plan(
    task: &StructuredTask,
    methodology: Option<&Methodology>,
    reasoner: &dyn Reasoner,
    budget: usize,
) -> Result<(Plan, PlanOrigin), PlanningError> {
    let m = methodology.ok_or_else(|| {
        PlanningError::Failed(format!("no methodology for intent `{}`", task.intent))
    })?;
    let seeds: Vec<String> = task.entities.keys().cloned().collect();
    let finish = |mut plan: Plan| {
        plan.plan_id = format!("plan-{}", uuid::Uuid::new_v4());
        plan.task_id = task.task_id.clone();
        plan.methodology_id = m.methodology_id.clone();
        plan
    };
    let req = ReasonerRequest {
        kind: ReasonerKind::GeneratePlan,
        payload: planning_payload(task, m),
        budget,
    };
    let fallback_reason = match reasoner.complete(&req).await {
        Ok(resp) => match parse_reasoner_plan(&resp.text) {
            Ok(plan) => {
                let plan = finish(plan);
                match validate_plan(&plan, &seeds) {
                    Ok(()) => return Ok((plan, PlanOrigin::Reasoner)),
                    Err(vs) => format!(
                        "reasoner plan rejected: {}",
                        vs.iter()
                            .map(ToString::to_string)
                            .collect::<Vec<_>>()
                            .join("; ")
                    ),
                }
            }
            Err(e) => e.to_string(),
        },
        // deterministic backends must not silently fall through
        Err(e @ (ReasonerError::ScriptMiss { .. } | ReasonerError::BadPayload(_))) => {
            return Err(PlanningError::Failed(e.to_string()))
        }
        Err(e) => e.to_string(),
    };
    tracing::warn!(reason = %fallback_reason, "falling back to methodology-derived plan");
    let plan = finish(derive_plan(task, m));
    validate_plan(&plan, &seeds).map_err(|vs| {
        PlanningError::Failed(format!(
            "{fallback_reason}; fallback plan invalid: {}",
            vs.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        ))
    })?;
    Ok((plan, PlanOrigin::Fallback))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanOrigin {
    Reasoner,
    Fallback,
}

/// The planning capability: fetches the methodology and generates the plan.
#[derive(Debug, Clone)]
pub struct Planner {
    methodologies: Arc<dyn MethodologyPort>,
    reasoner: Arc<dyn Reasoner>,
    budget: usize,
    events: Recorder,
}

impl Planner {
    pub fn new(
        methodologies: Arc<dyn MethodologyPort>,
        reasoner: Arc<dyn Reasoner>,
        budget: usize,
        events: Recorder,
    ) -> Self {
        Self {
            methodologies,
            reasoner,
            budget,
            events,
        }
    }

    pub async fn plan(
        &self,
        task: &StructuredTask,
        methodology_id: &str,
    ) -> Result<Plan, PlanningError> {
        let m = self
            .methodologies
            .fetch(methodology_id)
            .await
            .map_err(|e| match e {
                PortError::Unavailable(msg) => PlanningError::Unavailable(msg),
                other => PlanningError::Failed(other.to_string()),
            })?;
        let (plan, _) =
            generate_plan(task, m.as_ref(), self.reasoner.as_ref(), self.budget).await?;
        self.events.record(
            "planning",
            "generate_plan",
            format!(
                "{}-step plan: {}",
                plan.steps.len(),
                plan.steps
                    .iter()
                    .map(|s| s.title.as_str())
                    .collect::<Vec<_>>()
                    .join(" | ")
            ),
            [task.task_id.clone(), plan.plan_id.clone()],
        );
        Ok(plan)
    }
}

#[async_trait]
impl PlanningPort for Planner {
    async fn plan(
        &self,
        task: &StructuredTask,
        methodology_id: &str,
    ) -> Result<Plan, PlanningError> {
        Planner::plan(self, task, methodology_id).await
    }
}

/// Multiset of titles, used to check a derived plan against its methodology.
pub fn title_multiset(titles: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in titles {
        *out.entry(t).or_insert(0) += 1;
    }
    out
}
