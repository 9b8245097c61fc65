//! Workflow engine: one instance per structured task. Obtains a plan, runs its
//! execute / branch / loop steps in order against the context store, and
//! reports the outcome to reception.
//!
//! Every step transition is written to the key-value store before the engine
//! moves on, so a restarted engine resumes an instance without repeating
//! steps that already succeeded.

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::binding::{render, Template, INDEX_KEY, ITEM_KEY};
use crate::canon::canonical_json;
use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::expr::{eval_condition, ExprError};
use crate::kv::{self, KvError, SharedKv};
use crate::planning::{Plan, PlanningError, ProcStep, StepKind, StepSource};
use crate::ports::{
    DiscoverError, DiscoveryPort, MethodologyPort, PlanningPort, PortError, ProfilePort,
    ResultSink, ToolInvoker, WorkflowPort,
};
use crate::profile::user_namespace;
use crate::registry::{ContextKey, DiscoveryQuery, ParamBinding, ToolDescriptor};
use crate::services::{InvokeRequest, InvokeStatus};
use crate::task::{StructuredTask, TaskResult, TaskStatus};

const KV_NAMESPACE: &str = "workflow";

/// Namespace consulted when the user's own profile lacks a key.
pub const SYSTEM_NAMESPACE: &str = "system";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Planning,
    Running,
    Completed,
    Failed,
    NeedsTool,
}

impl InstanceStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            InstanceStatus::Completed | InstanceStatus::Failed | InstanceStatus::NeedsTool
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceStatus::Planning => "planning",
            InstanceStatus::Running => "running",
            InstanceStatus::Completed => "completed",
            InstanceStatus::Failed => "failed",
            InstanceStatus::NeedsTool => "needs_tool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Pending,
    Succeeded,
    Failed,
    Skipped,
    NoTool,
}

impl StepOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            StepOutcome::Pending => "pending",
            StepOutcome::Succeeded => "succeeded",
            StepOutcome::Failed => "failed",
            StepOutcome::Skipped => "skipped",
            StepOutcome::NoTool => "no_tool",
        }
    }
}

/// One executed (or skipped) step. `step_ref` is the step's path in the plan:
/// `s2` at top level, `d1/then/s3` inside a branch arm and `l1#0/s4` in the
/// first iteration of a loop body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub step_index: usize,
    pub step_ref: String,
    pub title: String,
    pub attempt: u32,
    pub outcome: StepOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_used: Option<String>,
    #[serde(default)]
    pub inputs: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

impl StepState {
    /// True for states recorded inside a loop body, whose outputs went to the
    /// loop overlay rather than the instance context.
    pub fn in_loop_body(&self) -> bool {
        self.step_ref.contains('#')
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowInstance {
    pub instance_id: String,
    pub task: StructuredTask,
    pub plan: Option<Plan>,
    /// Short-term memory: task entities plus every step's outputs.
    pub context: Map<String, Value>,
    pub step_states: Vec<StepState>,
    pub status: InstanceStatus,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<InstanceError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<TaskResult>,
    #[serde(default)]
    pub reported: bool,
}

impl WorkflowInstance {
    pub fn initial_context(task: &StructuredTask) -> Map<String, Value> {
        task.entities
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect()
    }

    /// Rebuilds the context by folding the outputs of the succeeded states
    /// that wrote to it, in order.
    pub fn replay_context(&self) -> Map<String, Value> {
        let mut ctx = Self::initial_context(&self.task);
        for s in &self.step_states {
            if s.outcome == StepOutcome::Succeeded && !s.in_loop_body() {
                if let Some(out) = &s.outputs {
                    ctx.extend(out.clone());
                }
            }
        }
        ctx
    }

    pub fn state(&self, step_ref: &str) -> Option<&StepState> {
        self.step_states.iter().find(|s| s.step_ref == step_ref)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowConfig {
    pub step_timeout_ms: u64,
    /// Extra attempts after a failed tool invocation.
    pub tool_retries: u32,
    pub delivery_attempts: u32,
    pub delivery_backoff_ms: u64,
    /// Test hook: stop the run, as if the process died, once this many steps
    /// have succeeded in the current run.
    #[serde(skip)]
    pub halt_after_steps: Option<usize>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            step_timeout_ms: 30_000,
            tool_retries: 1,
            delivery_attempts: 3,
            delivery_backoff_ms: 50,
            halt_after_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorkflowError {
    #[error("planning failed for instance {instance_id}: {reason}")]
    PlanningFailed { instance_id: String, reason: String },
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("instance `{0}` is already running")]
    AlreadyRunning(String),
    #[error("instance `{0}` has not finished")]
    NotTerminal(String),
    #[error("engine halted by test hook")]
    Halted,
    #[error("storage: {0}")]
    Storage(String),
}

impl WorkflowError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkflowError::PlanningFailed { .. } => "PlanningFailed",
            WorkflowError::UnknownInstance(_) => "UnknownInstance",
            WorkflowError::AlreadyRunning(_) => "AlreadyRunning",
            WorkflowError::NotTerminal(_) => "NotTerminal",
            WorkflowError::Halted => "Halted",
            WorkflowError::Storage(_) => "StorageError",
        }
    }
}

impl From<KvError> for WorkflowError {
    fn from(e: KvError) -> Self {
        WorkflowError::Storage(e.to_string())
    }
}

/// The capabilities the engine calls.
#[derive(Debug, Clone)]
pub struct WorkflowDeps {
    pub methodologies: Arc<dyn MethodologyPort>,
    pub planner: Arc<dyn PlanningPort>,
    pub profiles: Arc<dyn ProfilePort>,
    pub discovery: Arc<dyn DiscoveryPort>,
    pub invoker: Arc<dyn ToolInvoker>,
}

#[derive(Debug)]
pub struct WorkflowEngine {
    me: Weak<WorkflowEngine>,
    config: WorkflowConfig,
    deps: WorkflowDeps,
    kv: SharedKv,
    clock: SharedClock,
    events: Recorder,
    sink: RwLock<Option<Arc<dyn ResultSink>>>,
    instances: RwLock<BTreeMap<String, WorkflowInstance>>,
    active: Mutex<BTreeSet<String>>,
}

/// Why a step did not succeed.
#[derive(Debug, Clone)]
struct StepFail {
    code: &'static str,
    message: String,
    no_tool: bool,
    tool: Option<String>,
}

impl StepFail {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            no_tool: false,
            tool: None,
        }
    }

    fn missing(key: &str) -> Self {
        Self::new(
            "MissingInput",
            format!("required context key `{key}` is absent"),
        )
    }
}

struct ExecOk {
    tool_used: Option<String>,
    inputs: Map<String, Value>,
    outputs: Map<String, Value>,
    retries: u32,
}

enum Flow {
    Continue,
    Stop(InstanceStatus),
    Crash,
}

type BoxFut<'a, T> = Pin<Box<dyn Future<Output = T> + Send + 'a>>;

impl WorkflowEngine {
    pub fn open(
        config: WorkflowConfig,
        deps: WorkflowDeps,
        kv: SharedKv,
        clock: SharedClock,
        events: Recorder,
    ) -> Result<Arc<Self>, WorkflowError> {
        let instances = kv::scan_json::<WorkflowInstance>(kv.as_ref(), KV_NAMESPACE)?
            .into_iter()
            .map(|(_, i)| (i.instance_id.clone(), i))
            .collect();
        Ok(Arc::new_cyclic(|me| Self {
            me: me.clone(),
            config,
            deps,
            kv,
            clock,
            events,
            sink: RwLock::new(None),
            instances: RwLock::new(instances),
            active: Mutex::new(BTreeSet::new()),
        }))
    }

    pub fn connect_sink(&self, sink: Arc<dyn ResultSink>) {
        *self.sink.write() = Some(sink);
    }

    pub fn config(&self) -> &WorkflowConfig {
        &self.config
    }

    pub fn get_instance(&self, id: &str) -> Option<WorkflowInstance> {
        self.instances.read().get(id).cloned()
    }

    pub fn list_instances(&self) -> Vec<WorkflowInstance> {
        self.instances.read().values().cloned().collect()
    }

    fn persist(&self, inst: &WorkflowInstance) -> Result<(), WorkflowError> {
        kv::put_json(self.kv.as_ref(), KV_NAMESPACE, &inst.instance_id, inst)?;
        self.instances
            .write()
            .insert(inst.instance_id.clone(), inst.clone());
        Ok(())
    }

    fn load(&self, id: &str) -> Result<WorkflowInstance, WorkflowError> {
        self.get_instance(id)
            .ok_or_else(|| WorkflowError::UnknownInstance(id.to_string()))
    }

    /// Persists a new instance, matches a methodology and obtains a plan.
    /// On planning failure the instance is kept with status failed.
    pub async fn create_instance(&self, task: &StructuredTask) -> Result<String, WorkflowError> {
        let now = self.clock.now();
        let mut inst = WorkflowInstance {
            instance_id: uuid::Uuid::new_v4().to_string(),
            task: task.clone(),
            plan: None,
            context: WorkflowInstance::initial_context(task),
            step_states: Vec::new(),
            status: InstanceStatus::Planning,
            created_at: now,
            finished_at: None,
            error: None,
            result: None,
            reported: false,
        };
        self.persist(&inst)?;
        self.events.record(
            "workflow",
            "create_instance",
            format!("instance for intent `{}`", task.intent),
            [task.task_id.clone(), inst.instance_id.clone()],
        );
        match self.obtain_plan(task).await {
            Ok(plan) => {
                inst.plan = Some(plan);
                self.persist(&inst)?;
                Ok(inst.instance_id)
            }
            Err(reason) => {
                inst.status = InstanceStatus::Failed;
                inst.finished_at = Some(self.clock.now());
                inst.error = Some(InstanceError {
                    code: "PlanningFailed".into(),
                    message: reason.clone(),
                    step_ref: None,
                });
                self.persist(&inst)?;
                self.events.record(
                    "workflow",
                    "finish",
                    format!("instance failed: {reason}"),
                    [inst.instance_id.clone()],
                );
                Err(WorkflowError::PlanningFailed {
                    instance_id: inst.instance_id,
                    reason,
                })
            }
        }
    }

    async fn obtain_plan(&self, task: &StructuredTask) -> Result<Plan, String> {
        let m = self
            .deps
            .methodologies
            .match_task(task)
            .await
            .map_err(|e| format!("methodology lookup failed: {e}"))?
            .ok_or_else(|| format!("no methodology matches intent `{}`", task.intent))?;
        self.deps
            .planner
            .plan(task, &m.methodology_id)
            .await
            .map_err(|e| match e {
                PlanningError::Failed(msg) | PlanningError::Unavailable(msg) => msg,
            })
    }

    /// Runs an instance to a terminal status, resuming after any succeeded
    /// steps, then reports the result.
    pub async fn run_instance(&self, id: &str) -> Result<InstanceStatus, WorkflowError> {
        if !self.active.lock().insert(id.to_string()) {
            return Err(WorkflowError::AlreadyRunning(id.to_string()));
        }
        let out = self.run_locked(id).await;
        self.active.lock().remove(id);
        let status = out?;
        self.report_result(id).await?;
        Ok(status)
    }

    async fn run_locked(&self, id: &str) -> Result<InstanceStatus, WorkflowError> {
        let mut inst = self.load(id)?;
        if inst.status.is_terminal() {
            return Ok(inst.status);
        }
        let Some(plan) = inst.plan.clone() else {
            // interrupted before a plan was stored
            inst.status = InstanceStatus::Failed;
            inst.finished_at = Some(self.clock.now());
            inst.error = Some(InstanceError {
                code: "PlanningFailed".into(),
                message: "instance has no plan".into(),
                step_ref: None,
            });
            self.persist(&inst)?;
            return Ok(inst.status);
        };
        let resumed = inst.status == InstanceStatus::Running;
        inst.status = InstanceStatus::Running;
        // the persisted context may predate the last transition
        inst.context = inst.replay_context();
        self.persist(&inst)?;
        self.events.record(
            "workflow",
            if resumed {
                "resume_instance"
            } else {
                "run_instance"
            },
            format!(
                "{} plan steps{}",
                plan.steps.len(),
                if resumed {
                    format!(
                        ", {} already succeeded",
                        inst.step_states
                            .iter()
                            .filter(|s| s.outcome == StepOutcome::Succeeded)
                            .count()
                    )
                } else {
                    String::new()
                }
            ),
            [inst.instance_id.clone()],
        );
        let mut run = Run {
            engine: self,
            inst,
            overlays: Vec::new(),
            succeeded_this_run: 0,
        };
        let flow = run.walk(&plan.steps, String::new()).await?;
        let mut inst = run.inst;
        let status = match flow {
            Flow::Crash => return Err(WorkflowError::Halted),
            Flow::Continue => InstanceStatus::Completed,
            Flow::Stop(s) => s,
        };
        inst.status = status;
        inst.finished_at = Some(self.clock.now());
        self.persist(&inst)?;
        self.events.record(
            "workflow",
            "finish",
            format!(
                "instance {} after {} step states",
                status.as_str(),
                inst.step_states.len()
            ),
            [inst.instance_id.clone()],
        );
        Ok(status)
    }

    /// Runs every instance that is not terminal, e.g. after a restart.
    pub async fn resume_all(&self) -> Vec<(String, Result<InstanceStatus, WorkflowError>)> {
        let pending: Vec<String> = self
            .list_instances()
            .into_iter()
            .filter(|i| !i.status.is_terminal() || !i.reported)
            .map(|i| i.instance_id)
            .collect();
        let mut out = Vec::new();
        for id in pending {
            let r = self.run_instance(&id).await;
            out.push((id, r));
        }
        out
    }

    /// Assembles the result of a terminal instance and delivers it to
    /// reception once. Delivery failures are retried a bounded number of
    /// times; the result stays available on the instance either way.
    pub async fn report_result(&self, id: &str) -> Result<TaskResult, WorkflowError> {
        let mut inst = self.load(id)?;
        if !inst.status.is_terminal() {
            return Err(WorkflowError::NotTerminal(id.to_string()));
        }
        let result = match &inst.result {
            Some(r) => r.clone(),
            None => {
                let r = assemble_result(&inst);
                inst.result = Some(r.clone());
                self.persist(&inst)?;
                r
            }
        };
        if inst.reported {
            return Ok(result);
        }
        let sink = self.sink.read().clone();
        let Some(sink) = sink else { return Ok(result) };
        let attempts = self.config.delivery_attempts.max(1);
        for attempt in 0..attempts {
            if attempt > 0 {
                tokio::time::sleep(Duration::from_millis(
                    self.config.delivery_backoff_ms << (attempt - 1),
                ))
                .await;
            }
            match sink.deliver(&result).await {
                Ok(()) => {
                    // Recorded first so an observer of `reported` sees the event too.
                    self.events.record(
                        "workflow",
                        "report_result",
                        format!("{}: {}", result.status.as_str(), result.summary),
                        [result.task_id.clone(), id.to_string()],
                    );
                    inst.reported = true;
                    self.persist(&inst)?;
                    return Ok(result);
                }
                Err(e) => tracing::warn!(instance = id, attempt, "result delivery failed: {e}"),
            }
        }
        tracing::error!(
            instance = id,
            "DeliveryFailed: giving up after {attempts} attempts"
        );
        self.events.record(
            "workflow",
            "delivery_failed",
            format!("result not delivered after {attempts} attempts"),
            [id.to_string()],
        );
        Ok(result)
    }

    async fn run_in_background(self: Arc<Self>, id: String) {
        match self.run_instance(&id).await {
            Ok(_) => {}
            Err(WorkflowError::Halted) => tracing::warn!(instance = %id, "run halted"),
            Err(e) => tracing::error!(instance = %id, "run failed: {e}"),
        }
    }
}

#[async_trait]
impl WorkflowPort for WorkflowEngine {
    async fn start(&self, task: &StructuredTask) -> Result<String, PortError> {
        let me = self
            .me
            .upgrade()
            .ok_or_else(|| PortError::Unavailable("workflow engine is shutting down".into()))?;
        match self.create_instance(task).await {
            Ok(id) => {
                tokio::spawn(me.run_in_background(id.clone()));
                Ok(id)
            }
            Err(WorkflowError::PlanningFailed { instance_id, .. }) => {
                let id = instance_id.clone();
                tokio::spawn(async move {
                    if let Err(e) = me.report_result(&id).await {
                        tracing::error!(instance = %id, "cannot report planning failure: {e}");
                    }
                });
                Ok(instance_id)
            }
            Err(e) => Err(PortError::Rejected {
                code: e.code().into(),
                message: e.to_string(),
            }),
        }
    }
}

struct Run<'e> {
    engine: &'e WorkflowEngine,
    inst: WorkflowInstance,
    /// One overlay per enclosing loop; body steps write to the innermost.
    overlays: Vec<Map<String, Value>>,
    succeeded_this_run: usize,
}

impl Run<'_> {
    fn view(&self) -> Map<String, Value> {
        let mut v = self.inst.context.clone();
        for o in &self.overlays {
            v.extend(o.clone());
        }
        v
    }

    fn write(&mut self, outputs: &Map<String, Value>) {
        match self.overlays.last_mut() {
            Some(top) => top.extend(outputs.clone()),
            None => self.inst.context.extend(outputs.clone()),
        }
    }

    fn position(&self, step_ref: &str) -> Option<usize> {
        self.inst
            .step_states
            .iter()
            .position(|s| s.step_ref == step_ref)
    }

    /// Records the step as pending (write-ahead) and returns its slot.
    fn begin(&mut self, step_ref: &str, step: &ProcStep) -> Result<usize, WorkflowError> {
        let now = self.engine.clock.now();
        let idx = match self.position(step_ref) {
            Some(i) => {
                let s = &mut self.inst.step_states[i];
                s.attempt += 1;
                s.outcome = StepOutcome::Pending;
                s.started_at = Some(now);
                s.error = None;
                s.error_code = None;
                i
            }
            None => {
                let i = self.inst.step_states.len();
                self.inst.step_states.push(StepState {
                    step_index: i,
                    step_ref: step_ref.to_string(),
                    title: step.title.clone(),
                    attempt: 1,
                    outcome: StepOutcome::Pending,
                    tool_used: None,
                    inputs: Map::new(),
                    outputs: None,
                    error: None,
                    error_code: None,
                    started_at: Some(now),
                    finished_at: None,
                });
                i
            }
        };
        self.engine.persist(&self.inst)?;
        Ok(idx)
    }

    fn succeed(
        &mut self,
        idx: usize,
        tool_used: Option<String>,
        inputs: Map<String, Value>,
        outputs: Map<String, Value>,
        note: &str,
    ) -> Result<bool, WorkflowError> {
        let now = self.engine.clock.now();
        let s = &mut self.inst.step_states[idx];
        s.outcome = StepOutcome::Succeeded;
        s.tool_used = tool_used;
        s.inputs = inputs;
        s.outputs = Some(outputs);
        s.finished_at = Some(now);
        let summary = format!("{} \"{}\" succeeded{note}", s.step_ref, s.title);
        self.engine.persist(&self.inst)?;
        self.engine
            .events
            .record("workflow", "step", summary, [self.inst.instance_id.clone()]);
        self.succeeded_this_run += 1;
        Ok(self
            .engine
            .config
            .halt_after_steps
            .is_some_and(|n| self.succeeded_this_run >= n))
    }

    fn fail(
        &mut self,
        idx: usize,
        inputs: Map<String, Value>,
        f: StepFail,
    ) -> Result<Flow, WorkflowError> {
        let now = self.engine.clock.now();
        let s = &mut self.inst.step_states[idx];
        s.outcome = if f.no_tool {
            StepOutcome::NoTool
        } else {
            StepOutcome::Failed
        };
        s.tool_used = f.tool.clone();
        s.inputs = inputs;
        s.error = Some(f.message.clone());
        s.error_code = Some(f.code.to_string());
        s.finished_at = Some(now);
        let summary = format!(
            "{} \"{}\" {}: {}",
            s.step_ref,
            s.title,
            s.outcome.as_str(),
            f.message
        );
        let step_ref = s.step_ref.clone();
        if self.inst.error.is_none() {
            self.inst.error = Some(InstanceError {
                code: f.code.to_string(),
                message: f.message.clone(),
                step_ref: Some(step_ref),
            });
        }
        self.engine.persist(&self.inst)?;
        self.engine
            .events
            .record("workflow", "step", summary, [self.inst.instance_id.clone()]);
        Ok(Flow::Stop(if f.no_tool {
            InstanceStatus::NeedsTool
        } else {
            InstanceStatus::Failed
        }))
    }

    fn mark_skipped(&mut self, steps: &[ProcStep], prefix: &str) -> Result<(), WorkflowError> {
        for step in steps {
            let step_ref = format!("{prefix}{}", step.step_id);
            if self.position(&step_ref).is_some() {
                continue;
            }
            let i = self.inst.step_states.len();
            self.inst.step_states.push(StepState {
                step_index: i,
                step_ref,
                title: step.title.clone(),
                attempt: 1,
                outcome: StepOutcome::Skipped,
                tool_used: None,
                inputs: Map::new(),
                outputs: None,
                error: None,
                error_code: None,
                started_at: None,
                finished_at: None,
            });
        }
        self.engine.persist(&self.inst)
    }

    fn walk<'a>(
        &'a mut self,
        steps: &'a [ProcStep],
        prefix: String,
    ) -> BoxFut<'a, Result<Flow, WorkflowError>> {
        Box::pin(async move {
            for step in steps {
                let step_ref = format!("{prefix}{}", step.step_id);
                let flow = match step.kind {
                    StepKind::Execute => self.execute(step, &step_ref).await?,
                    StepKind::Branch => self.branch(step, &step_ref).await?,
                    StepKind::Loop => self.looping(step, &step_ref).await?,
                };
                if !matches!(flow, Flow::Continue) {
                    return Ok(flow);
                }
            }
            Ok(Flow::Continue)
        })
    }

    fn done_state(&self, step_ref: &str) -> Option<StepState> {
        self.inst
            .state(step_ref)
            .filter(|s| s.outcome == StepOutcome::Succeeded)
            .cloned()
    }

    fn missing_required(&self, step: &ProcStep, view: &Map<String, Value>) -> Option<StepFail> {
        step.required_keys
            .iter()
            .find(|k| !view.contains_key(k.as_str()))
            .map(|k| StepFail::missing(k))
    }

    async fn execute(&mut self, step: &ProcStep, step_ref: &str) -> Result<Flow, WorkflowError> {
        if let Some(done) = self.done_state(step_ref) {
            self.write(&done.outputs.unwrap_or_default());
            return Ok(Flow::Continue);
        }
        let idx = self.begin(step_ref, step)?;
        let view = self.view();
        if let Some(f) = self.missing_required(step, &view) {
            return self.fail(idx, Map::new(), f);
        }
        let timeout = Duration::from_millis(self.engine.config.step_timeout_ms);
        let work = exec_step(
            self.engine,
            &self.inst.task,
            &self.inst.instance_id,
            step,
            &view,
        );
        let res = match tokio::time::timeout(timeout, work).await {
            Ok(r) => r,
            Err(_) => Err(StepFail::new(
                "StepTimeout",
                format!("step exceeded its {} ms budget", timeout.as_millis()),
            )),
        };
        match res {
            Ok(ok) => {
                self.inst.step_states[idx].attempt += ok.retries;
                self.write(&ok.outputs);
                let note = match &ok.tool_used {
                    Some(t) => format!(" via {t} -> {}", step.output_keys.join(", ")),
                    None => format!(
                        " ({}) -> {}",
                        source_label(step.source),
                        step.output_keys.join(", ")
                    ),
                };
                let crash = self.succeed(idx, ok.tool_used, ok.inputs, ok.outputs, &note)?;
                Ok(if crash { Flow::Crash } else { Flow::Continue })
            }
            Err(f) => self.fail(idx, Map::new(), f),
        }
    }

    async fn branch(&mut self, step: &ProcStep, step_ref: &str) -> Result<Flow, WorkflowError> {
        let spec = step
            .branch
            .as_ref()
            .expect("branch step carries a branch spec");
        let taken = match self.done_state(step_ref) {
            Some(done) => done
                .inputs
                .get("value")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            None => {
                let idx = self.begin(step_ref, step)?;
                let view = self.view();
                if let Some(f) = self.missing_required(step, &view) {
                    return self.fail(idx, Map::new(), f);
                }
                let value = match eval_condition(&spec.condition, &view) {
                    Ok(v) => v,
                    Err(e) => {
                        return self.fail(
                            idx,
                            Map::new(),
                            StepFail::new(
                                "ConditionEvalError",
                                format!("`{}`: {e}", spec.condition),
                            ),
                        )
                    }
                };
                let (skipped_label, skipped) = if value {
                    ("else", &spec.else_steps)
                } else {
                    ("then", &spec.then_steps)
                };
                self.mark_skipped(skipped, &format!("{step_ref}/{skipped_label}/"))?;
                let mut inputs = Map::new();
                inputs.insert("condition".into(), json!(spec.condition));
                inputs.insert("value".into(), json!(value));
                let note = format!(" (condition {})", value);
                if self.succeed(idx, None, inputs, Map::new(), &note)? {
                    return Ok(Flow::Crash);
                }
                value
            }
        };
        let (label, arm) = if taken {
            ("then", &spec.then_steps)
        } else {
            ("else", &spec.else_steps)
        };
        self.walk(arm, format!("{step_ref}/{label}/")).await
    }

    async fn looping(&mut self, step: &ProcStep, step_ref: &str) -> Result<Flow, WorkflowError> {
        if let Some(done) = self.done_state(step_ref) {
            self.write(&done.outputs.unwrap_or_default());
            return Ok(Flow::Continue);
        }
        let spec = step
            .loop_spec
            .as_ref()
            .expect("loop step carries a loop spec");
        let idx = self.begin(step_ref, step)?;
        let view = self.view();
        if let Some(f) = self.missing_required(step, &view) {
            return self.fail(idx, Map::new(), f);
        }
        let items: Option<Vec<Value>> = match &spec.over_key {
            Some(key) => match view.get(key) {
                None => return self.fail(idx, Map::new(), StepFail::missing(key)),
                Some(Value::Array(items)) => Some(items.clone()),
                Some(other) => {
                    return self.fail(
                        idx,
                        Map::new(),
                        StepFail::new(
                            "ConditionEvalError",
                            format!(
                                "loop over `{key}` needs a list, found {}",
                                crate::expr::type_name(other)
                            ),
                        ),
                    )
                }
            },
            None => None,
        };
        let max = spec.max_iterations.map(|m| m as usize);
        if let (Some(items), Some(max)) = (&items, max) {
            if items.len() > max {
                return self.fail(
                    idx,
                    Map::new(),
                    StepFail::new(
                        "LoopBoundExceeded",
                        format!("{} items exceed the bound of {max} iterations", items.len()),
                    ),
                );
            }
        }
        let mut collected: Map<String, Value> = spec
            .exported_keys
            .iter()
            .map(|k| (k.clone(), Value::Array(Vec::new())))
            .collect();
        self.overlays.push(Map::new());
        let mut iterations = 0usize;
        loop {
            let top = self.overlays.last_mut().expect("pushed above");
            top.insert(INDEX_KEY.into(), json!(iterations));
            match &items {
                Some(items) => {
                    let Some(item) = items.get(iterations) else {
                        break;
                    };
                    top.insert(ITEM_KEY.into(), item.clone());
                }
                None => {
                    let cond = spec.condition.as_deref().unwrap_or("false");
                    let go = match eval_condition(cond, &self.view()) {
                        Ok(b) => b,
                        Err(e) => {
                            self.overlays.pop();
                            return self.fail(
                                idx,
                                Map::new(),
                                StepFail::new("ConditionEvalError", format!("`{cond}`: {e}")),
                            );
                        }
                    };
                    if !go {
                        break;
                    }
                    if max.is_some_and(|m| iterations >= m) {
                        self.overlays.pop();
                        return self.fail(
                            idx,
                            Map::new(),
                            StepFail::new(
                                "LoopBoundExceeded",
                                format!("condition still holds after {iterations} iterations"),
                            ),
                        );
                    }
                }
            }
            let flow = self
                .walk(&spec.body_steps, format!("{step_ref}#{iterations}/"))
                .await?;
            if !matches!(flow, Flow::Continue) {
                self.overlays.pop();
                if let Flow::Stop(status) = flow {
                    // the loop fails with its body
                    let s = &mut self.inst.step_states[idx];
                    s.outcome = if status == InstanceStatus::NeedsTool {
                        StepOutcome::NoTool
                    } else {
                        StepOutcome::Failed
                    };
                    s.error = Some(format!("iteration {iterations} did not complete"));
                    s.finished_at = Some(self.engine.clock.now());
                    self.engine.persist(&self.inst)?;
                }
                return Ok(flow);
            }
            let top = self.overlays.last().expect("pushed above");
            for (k, list) in collected.iter_mut() {
                if let (Some(v), Value::Array(list)) = (top.get(k), list) {
                    list.push(v.clone());
                }
            }
            iterations += 1;
        }
        self.overlays.pop();
        self.write(&collected);
        let mut inputs = Map::new();
        if let Some(k) = &spec.over_key {
            inputs.insert("over_key".into(), json!(k));
        }
        if let Some(c) = &spec.condition {
            inputs.insert("condition".into(), json!(c));
        }
        inputs.insert("iterations".into(), json!(iterations));
        let note = format!(" ({iterations} iterations)");
        let crash = self.succeed(idx, None, inputs, collected, &note)?;
        Ok(if crash { Flow::Crash } else { Flow::Continue })
    }
}

fn source_label(source: StepSource) -> &'static str {
    match source {
        StepSource::Profile => "profile",
        StepSource::Tool => "tool",
        StepSource::Internal => "internal",
    }
}

async fn exec_step(
    engine: &WorkflowEngine,
    task: &StructuredTask,
    instance_id: &str,
    step: &ProcStep,
    view: &Map<String, Value>,
) -> Result<ExecOk, StepFail> {
    match step.source {
        StepSource::Profile => exec_profile(engine, task, step).await,
        StepSource::Internal => exec_internal(step, view),
        StepSource::Tool => exec_tool(engine, instance_id, step, view).await,
    }
}

async fn exec_profile(
    engine: &WorkflowEngine,
    task: &StructuredTask,
    step: &ProcStep,
) -> Result<ExecOk, StepFail> {
    let user_ns = user_namespace(&task.user_id);
    let mut outputs = Map::new();
    let mut sources = Map::new();
    for key in &step.output_keys {
        let mut found = None;
        for ns in [user_ns.as_str(), SYSTEM_NAMESPACE] {
            let v = engine
                .deps
                .profiles
                .lookup(ns, key)
                .await
                .map_err(|e| StepFail::new("ProfileUnavailable", e.to_string()))?;
            if let Some(v) = v {
                found = Some((ns.to_string(), v));
                break;
            }
        }
        let (ns, v) = found.ok_or_else(|| {
            StepFail::new(
                "MissingInput",
                format!(
                    "profile key `{key}` is set neither for {user_ns} nor in {SYSTEM_NAMESPACE}"
                ),
            )
        })?;
        sources.insert(key.clone(), json!(ns));
        outputs.insert(key.clone(), v);
    }
    let mut inputs = Map::new();
    inputs.insert("profile".into(), Value::Object(sources));
    Ok(ExecOk {
        tool_used: None,
        inputs,
        outputs,
        retries: 0,
    })
}

fn bind_fail(e: crate::binding::BindError) -> StepFail {
    match e.missing_key() {
        Some(k) => StepFail::new("MissingInput", format!("{e} (context key `{k}` is absent)")),
        None => StepFail::new("BindingError", e.to_string()),
    }
}

fn exec_internal(step: &ProcStep, view: &Map<String, Value>) -> Result<ExecOk, StepFail> {
    let mut outputs = Map::new();
    for key in &step.output_keys {
        let template = step.binding.get(key).ok_or_else(|| {
            StepFail::new("BindingError", format!("no binding for output `{key}`"))
        })?;
        outputs.insert(key.clone(), render(key, template, view).map_err(bind_fail)?);
    }
    Ok(ExecOk {
        tool_used: None,
        inputs: Map::new(),
        outputs,
        retries: 0,
    })
}

/// Values for the tool's params: explicit template entries first, then the
/// context keys discovery bound. Template entries the tool does not declare
/// are dropped.
fn build_params(
    tool: &ToolDescriptor,
    bound: &BTreeMap<String, ParamBinding>,
    template: &Template,
    scope: &Map<String, Value>,
) -> Result<Map<String, Value>, StepFail> {
    let mut params = Map::new();
    for p in &tool.params {
        let value = match template.params.get(&p.name) {
            Some(t) => Some(render(&p.name, t, scope).map_err(bind_fail)?),
            None => match bound.get(&p.name) {
                Some(ParamBinding::FromContext(key)) => scope.get(key).cloned(),
                _ => None,
            },
        };
        match value {
            Some(v) => {
                params.insert(p.name.clone(), v);
            }
            None if p.required => {
                return Err(StepFail::new(
                    "MissingInput",
                    format!(
                        "required parameter `{}` of {} has no value in context",
                        p.name, tool.tool_id
                    ),
                ))
            }
            None => {}
        }
    }
    Ok(params)
}

async fn invoke_with_retry(
    engine: &WorkflowEngine,
    instance_id: &str,
    tool: &ToolDescriptor,
    params: Map<String, Value>,
) -> Result<(Map<String, Value>, u32), StepFail> {
    let attempts = 1 + engine.config.tool_retries;
    let mut last = String::new();
    for attempt in 0..attempts {
        let req = InvokeRequest {
            invocation_id: uuid::Uuid::new_v4().to_string(),
            params: params.clone(),
        };
        let outcome = match engine.deps.invoker.invoke(&tool.endpoint, &req).await {
            Ok(resp) => match (resp.status, resp.result) {
                (InvokeStatus::Ok, Some(Value::Object(result))) => Ok(result),
                (InvokeStatus::Ok, _) => Err("reply carries no result object".to_string()),
                (InvokeStatus::Error, _) => Err(resp
                    .error_message
                    .unwrap_or_else(|| "tool reported an error".into())),
            },
            Err(e) => Err(e.to_string()),
        };
        let params_text = canonical_json(&params);
        match outcome {
            Ok(result) => {
                engine.events.record(
                    "workflow",
                    "invoke_tool",
                    format!("{} {params_text} -> ok", tool.tool_id),
                    [instance_id.to_string(), req.invocation_id],
                );
                return Ok((result, attempt));
            }
            Err(e) => {
                engine.events.record(
                    "workflow",
                    "invoke_tool",
                    format!("{} {params_text} -> error: {e}", tool.tool_id),
                    [instance_id.to_string(), req.invocation_id],
                );
                last = e;
            }
        }
    }
    Err(StepFail {
        code: "ToolInvocationError",
        message: format!("{} failed after {attempts} attempts: {last}", tool.tool_id),
        no_tool: false,
        tool: Some(tool.tool_id.clone()),
    })
}

/// Maps a tool reply onto the step's output keys: a field named like the key
/// wins; a single output key takes the only field, or the whole reply.
fn map_outputs(
    output_keys: &[String],
    result: &Map<String, Value>,
    tool_id: &str,
) -> Result<Map<String, Value>, StepFail> {
    let mut out = Map::new();
    for key in output_keys {
        let v = match result.get(key) {
            Some(v) => v.clone(),
            None if output_keys.len() == 1 && result.len() == 1 => {
                result.values().next().cloned().expect("one field")
            }
            None if output_keys.len() == 1 => Value::Object(result.clone()),
            None => {
                return Err(StepFail::new(
                    "ToolInvocationError",
                    format!("reply of {tool_id} lacks output `{key}`"),
                ))
            }
        };
        out.insert(key.clone(), v);
    }
    Ok(out)
}

async fn exec_tool(
    engine: &WorkflowEngine,
    instance_id: &str,
    step: &ProcStep,
    view: &Map<String, Value>,
) -> Result<ExecOk, StepFail> {
    let template = Template::from_binding(&step.binding)
        .map_err(|e| StepFail::new("BindingError", e.to_string()))?;
    let query = DiscoveryQuery {
        step_description: step.description.clone(),
        context_keys: view.iter().map(|(k, v)| ContextKey::typed(k, v)).collect(),
        required_outputs: step.output_keys.clone(),
    };
    let found = engine
        .deps
        .discovery
        .discover(&query)
        .await
        .map_err(|e| match e {
            DiscoverError::NoToolFound { .. } => StepFail {
                code: "NoToolFound",
                message: e.to_string(),
                no_tool: true,
                tool: None,
            },
            DiscoverError::Unavailable(_) => StepFail::new("DiscoveryUnavailable", e.to_string()),
        })?;
    let tool = &found.tool;
    let with_tool = |mut f: StepFail| {
        f.tool = Some(tool.tool_id.clone());
        f
    };

    let Some(each_key) = &template.each else {
        let params = build_params(tool, &found.bound_params, &template, view).map_err(with_tool)?;
        let (result, retries) =
            invoke_with_retry(engine, instance_id, tool, params.clone()).await?;
        return Ok(ExecOk {
            tool_used: Some(tool.tool_id.clone()),
            inputs: params,
            outputs: map_outputs(&step.output_keys, &result, &tool.tool_id).map_err(with_tool)?,
            retries,
        });
    };

    let items = match view.get(each_key) {
        None => return Err(with_tool(StepFail::missing(each_key))),
        Some(Value::Array(items)) => items.clone(),
        Some(other) => {
            return Err(with_tool(StepFail::new(
                "BindingError",
                format!(
                    "`$each` over `{each_key}` needs a list, found {}",
                    crate::expr::type_name(other)
                ),
            )))
        }
    };
    let mut calls = Vec::new();
    let mut elements = Vec::new();
    let mut retries = 0;
    for (i, item) in items.iter().enumerate() {
        let mut scope = view.clone();
        scope.insert(ITEM_KEY.into(), item.clone());
        scope.insert(INDEX_KEY.into(), json!(i));
        let params =
            build_params(tool, &found.bound_params, &template, &scope).map_err(with_tool)?;
        let (result, r) = invoke_with_retry(engine, instance_id, tool, params.clone()).await?;
        retries = retries.max(r);
        calls.push(Value::Object(params));
        let mut element = match item {
            Value::Object(fields) => fields.clone(),
            other => {
                let mut m = Map::new();
                m.insert(ITEM_KEY.into(), other.clone());
                m
            }
        };
        element.extend(result);
        let keep = match &template.keep_if {
            Some(cond) => eval_condition(cond, &element).map_err(|e: ExprError| {
                with_tool(StepFail::new(
                    "ConditionEvalError",
                    format!("`$keep_if` `{cond}`: {e}"),
                ))
            })?,
            None => true,
        };
        if keep {
            elements.push(Value::Object(element));
        }
    }
    let mut outputs = Map::new();
    match step.output_keys.as_slice() {
        [only] => {
            outputs.insert(only.clone(), Value::Array(elements));
        }
        keys => {
            for key in keys {
                let column = elements
                    .iter()
                    .map(|e| {
                        e.get(key).cloned().ok_or_else(|| {
                            with_tool(StepFail::new(
                                "ToolInvocationError",
                                format!("reply of {} lacks output `{key}`", tool.tool_id),
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                outputs.insert(key.clone(), Value::Array(column));
            }
        }
    }
    let mut inputs = Map::new();
    inputs.insert("$each".into(), json!(each_key));
    inputs.insert("calls".into(), Value::Array(calls));
    Ok(ExecOk {
        tool_used: Some(tool.tool_id.clone()),
        inputs,
        outputs,
        retries,
    })
}

/// Text for one result value: names of named records, plain strings, or
/// canonical JSON.
fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if items.is_empty() => "none".into(),
        Value::Array(items) => items
            .iter()
            .map(|i| match i.get("name").and_then(Value::as_str) {
                Some(name) => name.to_string(),
                None => describe(i),
            })
            .collect::<Vec<_>>()
            .join(", "),
        other => canonical_json(other),
    }
}

pub fn assemble_result(inst: &WorkflowInstance) -> TaskResult {
    let (status, summary, payload) = match inst.status {
        InstanceStatus::Completed => {
            let keys = inst
                .plan
                .as_ref()
                .map(|p| p.result_keys.clone())
                .unwrap_or_default();
            let mut payload = Map::new();
            let mut parts = Vec::new();
            for k in keys {
                let v = inst.context.get(&k).cloned().unwrap_or(Value::Null);
                parts.push(format!("{}: {}", k.replace('_', " "), describe(&v)));
                payload.insert(k, v);
            }
            (
                TaskStatus::Completed,
                parts.join("; "),
                Value::Object(payload),
            )
        }
        InstanceStatus::NeedsTool => {
            let unmet: Vec<Value> = inst
                .step_states
                .iter()
                .filter(|s| s.outcome == StepOutcome::NoTool && !s.in_loop_body())
                .map(|s| {
                    let description = find_step(inst.plan.as_ref(), &s.step_ref)
                        .map(|p| p.description.clone())
                        .unwrap_or_default();
                    json!({"step_ref": s.step_ref, "title": s.title, "description": description})
                })
                .collect();
            let titles: Vec<String> = unmet
                .iter()
                .filter_map(|u| u["title"].as_str().map(|t| format!("\"{t}\"")))
                .collect();
            (
                TaskStatus::NeedsTool,
                format!(
                    "No suitable tool is registered for step {}; the request can be resubmitted once a provider registers one.",
                    titles.join(", ")
                ),
                json!({ "unmet_steps": unmet }),
            )
        }
        _ => {
            let err = inst.error.clone().unwrap_or(InstanceError {
                code: "Failed".into(),
                message: "instance failed".into(),
                step_ref: None,
            });
            (
                TaskStatus::Failed,
                err.message.clone(),
                serde_json::to_value(&err).unwrap_or(Value::Null),
            )
        }
    };
    TaskResult {
        task_id: inst.task.task_id.clone(),
        status,
        summary,
        payload,
        trace_ref: inst.instance_id.clone(),
    }
}

/// The plan step a `step_ref` points at.
pub fn find_step<'p>(plan: Option<&'p Plan>, step_ref: &str) -> Option<&'p ProcStep> {
    let id = step_ref.rsplit('/').next()?;
    fn walk<'p>(steps: &'p [ProcStep], id: &str) -> Option<&'p ProcStep> {
        steps.iter().find_map(|s| {
            if s.step_id == id {
                Some(s)
            } else {
                s.children()
                    .into_iter()
                    .find_map(|c| walk(std::slice::from_ref(c), id))
            }
        })
    }
    walk(&plan?.steps, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MockClock;
    use crate::kv::{FileKv, MemoryKv};
    use crate::methodology::Methodology;
    use crate::planning::{validate_plan, BranchSpec, LoopSpec};
    use crate::ports::InvokeError;
    use crate::registry::{Alternative, DiscoveryResult};
    use crate::services::InvokeResponse;
    use std::sync::atomic::{AtomicU64, Ordering};

    /// Discovery by exact description; invocation by a per-tool function.
    #[derive(Debug, Default)]
    struct Tools {
        by_description: BTreeMap<String, ToolDescriptor>,
        calls: Mutex<BTreeMap<String, u64>>,
        failures_left: Mutex<BTreeMap<String, u32>>,
        slow: Mutex<BTreeSet<String>>,
    }

    fn tool(id: &str, params: &[(&str, bool)]) -> ToolDescriptor {
        serde_json::from_value(json!({
            "tool_id": id,
            "name": id,
            "description": id,
            "endpoint": format!("mem://{id}"),
            "params": params.iter().map(|(n, r)| json!({"name": n, "type": "string", "required": r, "description": n})).collect::<Vec<_>>(),
        }))
        .unwrap()
    }

    impl Tools {
        fn with(tools: Vec<(&str, ToolDescriptor)>) -> Arc<Self> {
            Arc::new(Self {
                by_description: tools.into_iter().map(|(d, t)| (d.to_string(), t)).collect(),
                ..Self::default()
            })
        }

        fn count(&self, id: &str) -> u64 {
            self.calls.lock().get(id).copied().unwrap_or(0)
        }
    }

    #[async_trait]
    impl DiscoveryPort for Tools {
        async fn discover(&self, q: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError> {
            let t = self
                .by_description
                .get(&q.step_description)
                .cloned()
                .ok_or_else(|| DiscoverError::NoToolFound {
                    step_description: q.step_description.clone(),
                    best_score: 0.0,
                })?;
            let bound_params = t
                .params
                .iter()
                .map(|p| {
                    let b = if q.context_keys.iter().any(|k| k.name == p.name) {
                        ParamBinding::FromContext(p.name.clone())
                    } else {
                        ParamBinding::Unresolved
                    };
                    (p.name.clone(), b)
                })
                .collect();
            Ok(DiscoveryResult {
                selected: t.tool_id.clone(),
                bound_params,
                score: 1.0,
                alternatives: Vec::<Alternative>::new(),
                tool: t,
            })
        }
    }

    #[async_trait]
    impl ToolInvoker for Tools {
        async fn invoke(
            &self,
            endpoint: &str,
            req: &InvokeRequest,
        ) -> Result<InvokeResponse, InvokeError> {
            let id = endpoint.trim_start_matches("mem://").to_string();
            *self.calls.lock().entry(id.clone()).or_insert(0) += 1;
            if self.slow.lock().contains(&id) {
                tokio::time::sleep(Duration::from_millis(500)).await;
            }
            {
                let mut left = self.failures_left.lock();
                if let Some(n) = left.get_mut(&id).filter(|n| **n > 0) {
                    *n -= 1;
                    return Err(InvokeError::Unreachable("connection reset".into()));
                }
            }
            let result = match id.as_str() {
                "lister" => json!({"items": [{"name": "a"}, {"name": "b"}, {"name": "c"}]}),
                "tagger" => {
                    let name = req.params["name"].as_str().unwrap_or_default().to_string();
                    json!({"tag": if name == "b" { "bad" } else { "good" }})
                }
                _ => json!({"echo": req.params}),
            };
            Ok(InvokeResponse::ok(&req.invocation_id, result))
        }
    }

    #[derive(Debug)]
    struct Fixed(Mutex<Option<Plan>>);

    #[async_trait]
    impl PlanningPort for Fixed {
        async fn plan(&self, task: &StructuredTask, _: &str) -> Result<Plan, PlanningError> {
            let mut p = self
                .0
                .lock()
                .clone()
                .ok_or_else(|| PlanningError::Failed("no plan".into()))?;
            p.task_id = task.task_id.clone();
            Ok(p)
        }
    }

    #[async_trait]
    impl MethodologyPort for Fixed {
        async fn match_task(
            &self,
            task: &StructuredTask,
        ) -> Result<Option<Methodology>, PortError> {
            if task.intent == "unknown" {
                return Ok(None);
            }
            Ok(Some(
                serde_json::from_value(json!({
                    "methodology_id": "m1", "intent": task.intent, "description": "d",
                    "process_steps": [{"title": "t", "description": "d"}]
                }))
                .unwrap(),
            ))
        }
        async fn fetch(&self, _: &str) -> Result<Option<Methodology>, PortError> {
            Ok(None)
        }
        async fn lexicon(&self) -> Result<Vec<crate::methodology::IntentEntry>, PortError> {
            Ok(Vec::new())
        }
    }

    #[derive(Debug, Default)]
    struct Profiles {
        lookups: AtomicU64,
    }

    #[async_trait]
    impl ProfilePort for Profiles {
        async fn lookup(&self, ns: &str, key: &str) -> Result<Option<Value>, PortError> {
            self.lookups.fetch_add(1, Ordering::SeqCst);
            Ok(match (ns, key) {
                ("user:u1", "home") => Some(json!("A1")),
                ("system", "region") => Some(json!("north")),
                _ => None,
            })
        }
    }

    #[derive(Debug, Default)]
    struct Sink {
        delivered: Mutex<Vec<TaskResult>>,
        fail_first: Mutex<u32>,
    }

    #[async_trait]
    impl ResultSink for Sink {
        async fn deliver(&self, r: &TaskResult) -> Result<(), PortError> {
            let mut f = self.fail_first.lock();
            if *f > 0 {
                *f -= 1;
                return Err(PortError::Unavailable("reception down".into()));
            }
            self.delivered.lock().push(r.clone());
            Ok(())
        }
    }

    fn exec(
        id: &str,
        desc: &str,
        source: StepSource,
        req: &[&str],
        out: &[&str],
        binding: Value,
    ) -> ProcStep {
        ProcStep {
            step_id: id.into(),
            kind: StepKind::Execute,
            title: desc.into(),
            description: desc.into(),
            required_keys: req.iter().map(|s| s.to_string()).collect(),
            output_keys: out.iter().map(|s| s.to_string()).collect(),
            source,
            binding: binding.as_object().cloned().unwrap_or_default(),
            branch: None,
            loop_spec: None,
        }
    }

    fn plan(steps: Vec<ProcStep>, result_keys: &[&str]) -> Plan {
        Plan {
            plan_id: "p".into(),
            task_id: "t".into(),
            methodology_id: "m1".into(),
            result_keys: result_keys.iter().map(|s| s.to_string()).collect(),
            steps,
        }
    }

    fn task(intent: &str) -> StructuredTask {
        StructuredTask {
            task_id: "t1".into(),
            request_id: "r1".into(),
            user_id: "u1".into(),
            intent: intent.into(),
            entities: [("party".to_string(), "family".to_string())].into(),
            constraints: vec![],
            raw_text: "x".into(),
        }
    }

    struct Fixture {
        engine: Arc<WorkflowEngine>,
        tools: Arc<Tools>,
        profiles: Arc<Profiles>,
        sink: Arc<Sink>,
    }

    fn fixture_with(p: Plan, config: WorkflowConfig, kv: SharedKv) -> Fixture {
        validate_plan(&p, &["party".to_string()]).expect("test plan is valid");
        let tools = Tools::with(vec![
            ("list things", tool("lister", &[])),
            ("tag a thing", tool("tagger", &[("name", true)])),
            ("echo home", tool("echo", &[("home", true)])),
        ]);
        let fixed = Arc::new(Fixed(Mutex::new(Some(p))));
        let profiles = Arc::new(Profiles::default());
        let engine = WorkflowEngine::open(
            config,
            WorkflowDeps {
                methodologies: fixed.clone(),
                planner: fixed,
                profiles: profiles.clone(),
                discovery: tools.clone(),
                invoker: tools.clone(),
            },
            kv,
            Arc::new(MockClock::at_demo_epoch()),
            Recorder::disabled(),
        )
        .unwrap();
        let sink = Arc::new(Sink::default());
        engine.connect_sink(sink.clone());
        Fixture {
            engine,
            tools,
            profiles,
            sink,
        }
    }

    fn fixture(p: Plan) -> Fixture {
        fixture_with(p, WorkflowConfig::default(), MemoryKv::shared())
    }

    async fn run(f: &Fixture) -> WorkflowInstance {
        let id = f.engine.create_instance(&task("demo")).await.unwrap();
        f.engine.run_instance(&id).await.unwrap();
        f.engine.get_instance(&id).unwrap()
    }

    fn lookup_then_tag() -> Plan {
        plan(
            vec![
                exec(
                    "s1",
                    "profile",
                    StepSource::Profile,
                    &[],
                    &["home", "region"],
                    json!({}),
                ),
                exec(
                    "s2",
                    "echo home",
                    StepSource::Tool,
                    &["home"],
                    &["echoed"],
                    json!({}),
                ),
                exec(
                    "s3",
                    "list things",
                    StepSource::Tool,
                    &[],
                    &["things"],
                    json!({}),
                ),
                exec(
                    "s4",
                    "tag a thing",
                    StepSource::Tool,
                    &["things"],
                    &["kept"],
                    json!({"$each": "things", "name": "{context.item.name}", "$keep_if": "tag = 'good'"}),
                ),
            ],
            &["kept"],
        )
    }

    #[tokio::test]
    async fn runs_profile_tool_and_each_steps() {
        let f = fixture(lookup_then_tag());
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert!(inst
            .step_states
            .iter()
            .all(|s| s.outcome == StepOutcome::Succeeded));
        assert_eq!(inst.context["home"], json!("A1"));
        assert_eq!(inst.context["region"], json!("north"));
        assert_eq!(
            inst.step_states[0].inputs["profile"]["region"],
            json!("system")
        );
        assert_eq!(inst.context["echoed"], json!({"home": "A1"}));
        assert_eq!(
            inst.context["kept"],
            json!([{"name": "a", "tag": "good"}, {"name": "c", "tag": "good"}])
        );
        assert_eq!(f.tools.count("tagger"), 3);
        assert_eq!(inst.context, inst.replay_context());
        let delivered = f.sink.delivered.lock().clone();
        assert_eq!(delivered.len(), 1);
        assert_eq!(delivered[0].summary, "kept: a, c");
        assert_eq!(delivered[0].trace_ref, inst.instance_id);
    }

    #[tokio::test]
    async fn missing_input_fails_with_key() {
        let mut p = lookup_then_tag();
        p.steps[0].output_keys = vec!["home".into(), "office".into()];
        let f = fixture_with(p, WorkflowConfig::default(), MemoryKv::shared());
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::Failed);
        let err = inst.error.unwrap();
        assert_eq!(err.code, "MissingInput");
        assert!(err.message.contains("office"));
        assert_eq!(inst.step_states.len(), 1);
    }

    #[tokio::test]
    async fn no_tool_halts_with_needs_tool() {
        let mut p = lookup_then_tag();
        p.steps.push(exec(
            "s5",
            "forecast weather",
            StepSource::Tool,
            &[],
            &["w"],
            json!({}),
        ));
        p.result_keys = vec!["w".into()];
        let f = fixture(p);
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::NeedsTool);
        assert_eq!(inst.step_states.len(), 5);
        assert_eq!(inst.step_states[4].outcome, StepOutcome::NoTool);
        let r = f.sink.delivered.lock()[0].clone();
        assert_eq!(r.status, TaskStatus::NeedsTool);
        assert_eq!(r.unmet_steps(), vec!["forecast weather".to_string()]);
        assert!(r.summary.contains("\"forecast weather\""));
    }

    #[tokio::test]
    async fn one_retry_then_failure() {
        let f = fixture(lookup_then_tag());
        f.tools.failures_left.lock().insert("lister".into(), 1);
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert_eq!(inst.state("s3").unwrap().attempt, 2);

        let f = fixture(lookup_then_tag());
        f.tools.failures_left.lock().insert("lister".into(), 2);
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::Failed);
        assert_eq!(inst.error.as_ref().unwrap().code, "ToolInvocationError");
        assert_eq!(
            inst.state("s3").unwrap().tool_used.as_deref(),
            Some("lister")
        );
        assert_eq!(f.tools.count("lister"), 2);
    }

    #[tokio::test]
    async fn step_timeout() {
        let config = WorkflowConfig {
            step_timeout_ms: 50,
            ..WorkflowConfig::default()
        };
        let f = fixture_with(lookup_then_tag(), config, MemoryKv::shared());
        f.tools.slow.lock().insert("lister".into());
        let inst = run(&f).await;
        assert_eq!(inst.status, InstanceStatus::Failed);
        assert_eq!(inst.error.unwrap().code, "StepTimeout");
    }

    fn branch_plan(condition: &str) -> Plan {
        let mut p = lookup_then_tag();
        p.steps.truncate(3);
        p.steps.push(ProcStep {
            step_id: "d1".into(),
            kind: StepKind::Branch,
            title: "many?".into(),
            description: "many?".into(),
            required_keys: vec![],
            output_keys: vec!["pick".into()],
            source: StepSource::Internal,
            binding: Map::new(),
            branch: Some(BranchSpec {
                condition: condition.into(),
                then_steps: vec![exec(
                    "b1",
                    "then",
                    StepSource::Internal,
                    &[],
                    &["pick"],
                    json!({"pick": "many"}),
                )],
                else_steps: vec![exec(
                    "b2",
                    "else",
                    StepSource::Internal,
                    &[],
                    &["pick"],
                    json!({"pick": "few"}),
                )],
            }),
            loop_spec: None,
        });
        p.result_keys = vec!["pick".into()];
        p
    }

    #[tokio::test]
    async fn branch_picks_one_arm_and_skips_the_other() {
        for (cond, pick, skipped) in [
            ("len(things) > 0", "many", "d1/else/b2"),
            ("len(things) > 5", "few", "d1/then/b1"),
        ] {
            let inst = run(&fixture(branch_plan(cond))).await;
            assert_eq!(inst.status, InstanceStatus::Completed);
            assert_eq!(inst.context["pick"], json!(pick));
            assert_eq!(inst.state(skipped).unwrap().outcome, StepOutcome::Skipped);
            let non_skipped_arms = inst
                .step_states
                .iter()
                .filter(|s| s.step_ref.starts_with("d1/") && s.outcome != StepOutcome::Skipped)
                .count();
            assert_eq!(non_skipped_arms, 1);
            assert_eq!(inst.context, inst.replay_context());
        }
    }

    #[tokio::test]
    async fn condition_on_wrong_type_fails() {
        let inst = run(&fixture(branch_plan("things > 1"))).await;
        assert_eq!(inst.status, InstanceStatus::Failed);
        assert_eq!(inst.error.unwrap().code, "ConditionEvalError");
    }

    fn loop_plan(spec: LoopSpec) -> Plan {
        let mut p = lookup_then_tag();
        p.steps.truncate(3);
        p.steps.push(ProcStep {
            step_id: "l1".into(),
            kind: StepKind::Loop,
            title: "each".into(),
            description: "each".into(),
            required_keys: vec![],
            output_keys: spec.exported_keys.clone(),
            source: StepSource::Internal,
            binding: Map::new(),
            branch: None,
            loop_spec: Some(spec),
        });
        p.result_keys = vec!["label".into()];
        p
    }

    #[tokio::test]
    async fn for_each_loop_collects_exports_and_drops_overlay() {
        let spec = LoopSpec {
            over_key: Some("things".into()),
            condition: None,
            max_iterations: None,
            exported_keys: vec!["label".into()],
            body_steps: vec![
                exec(
                    "t1",
                    "tmp",
                    StepSource::Internal,
                    &[],
                    &["tmp"],
                    json!({"tmp": "{context.item.name}"}),
                ),
                exec(
                    "t2",
                    "label",
                    StepSource::Internal,
                    &["tmp"],
                    &["label"],
                    json!({"label": "#{context.index} {context.tmp}"}),
                ),
            ],
        };
        let inst = run(&fixture(loop_plan(spec))).await;
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert_eq!(inst.context["label"], json!(["#0 a", "#1 b", "#2 c"]));
        assert!(!inst.context.contains_key("tmp"));
        assert!(!inst.context.contains_key("item"));
        assert_eq!(inst.state("l1").unwrap().inputs["iterations"], json!(3));
        assert_eq!(inst.context, inst.replay_context());
    }

    #[tokio::test]
    async fn while_loop_hits_bound() {
        let spec = LoopSpec {
            over_key: None,
            condition: Some("index >= 0".into()),
            max_iterations: Some(10),
            exported_keys: vec!["label".into()],
            body_steps: vec![exec(
                "t1",
                "label",
                StepSource::Internal,
                &[],
                &["label"],
                json!({"label": "x"}),
            )],
        };
        let inst = run(&fixture(loop_plan(spec))).await;
        assert_eq!(inst.status, InstanceStatus::Failed);
        assert_eq!(inst.error.unwrap().code, "LoopBoundExceeded");
        let iterations = inst
            .step_states
            .iter()
            .filter(|s| s.step_ref.starts_with("l1#"))
            .count();
        assert_eq!(iterations, 10);
    }

    #[tokio::test]
    async fn while_loop_stops_on_condition() {
        let spec = LoopSpec {
            over_key: None,
            condition: Some("index < 4".into()),
            max_iterations: Some(10),
            exported_keys: vec!["label".into()],
            body_steps: vec![exec(
                "t1",
                "label",
                StepSource::Internal,
                &[],
                &["label"],
                json!({"label": "{context.index}"}),
            )],
        };
        let inst = run(&fixture(loop_plan(spec))).await;
        assert_eq!(inst.status, InstanceStatus::Completed);
        assert_eq!(inst.context["label"], json!([0, 1, 2, 3]));
    }

    #[tokio::test]
    async fn planning_failure_keeps_failed_instance() {
        let f = fixture(lookup_then_tag());
        let err = f
            .engine
            .create_instance(&task("unknown"))
            .await
            .unwrap_err();
        let WorkflowError::PlanningFailed { instance_id, .. } = err else {
            panic!("{err:?}")
        };
        let inst = f.engine.get_instance(&instance_id).unwrap();
        assert_eq!(inst.status, InstanceStatus::Failed);
        let r = f.engine.report_result(&instance_id).await.unwrap();
        assert_eq!(r.status, TaskStatus::Failed);
        assert!(r.summary.contains("no methodology"));
    }

    #[tokio::test]
    async fn crash_and_resume_skips_succeeded_steps() {
        let dir = tempfile::tempdir().unwrap();
        let kv = || -> SharedKv { Arc::new(FileKv::open(dir.path()).unwrap()) };
        let config = WorkflowConfig {
            halt_after_steps: Some(2),
            ..WorkflowConfig::default()
        };
        let first = fixture_with(lookup_then_tag(), config, kv());
        let id = first.engine.create_instance(&task("demo")).await.unwrap();
        assert_eq!(
            first.engine.run_instance(&id).await,
            Err(WorkflowError::Halted)
        );
        assert_eq!(first.profiles.lookups.load(Ordering::SeqCst), 3);
        assert_eq!(first.tools.count("echo"), 1);
        assert!(first.sink.delivered.lock().is_empty());
        drop(first);

        let second = fixture_with(lookup_then_tag(), WorkflowConfig::default(), kv());
        assert_eq!(
            second.engine.get_instance(&id).unwrap().status,
            InstanceStatus::Running
        );
        let resumed = second.engine.resume_all().await;
        assert_eq!(resumed, vec![(id.clone(), Ok(InstanceStatus::Completed))]);
        assert_eq!(second.profiles.lookups.load(Ordering::SeqCst), 0);
        assert_eq!(second.tools.count("echo"), 0);
        assert_eq!(second.tools.count("lister"), 1);
        let inst = second.engine.get_instance(&id).unwrap();
        assert!(inst.step_states.iter().all(|s| s.attempt == 1));
        assert_eq!(second.sink.delivered.lock().len(), 1);
    }

    #[tokio::test]
    async fn delivery_retries_then_reports_once() {
        let f = fixture(lookup_then_tag());
        *f.sink.fail_first.lock() = 2;
        let inst = run(&f).await;
        assert!(inst.reported);
        f.engine.report_result(&inst.instance_id).await.unwrap();
        assert_eq!(f.sink.delivered.lock().len(), 1);

        let f = fixture(lookup_then_tag());
        *f.sink.fail_first.lock() = 10;
        let inst = run(&f).await;
        assert!(!inst.reported);
        assert!(inst.result.is_some());
    }

    #[tokio::test]
    async fn concurrent_instances_do_not_share_context() {
        let f = fixture(lookup_then_tag());
        let ids: Vec<String> = futures_join(&f.engine, 8).await;
        for id in ids {
            let inst = f.engine.get_instance(&id).unwrap();
            assert_eq!(inst.status, InstanceStatus::Completed);
            assert_eq!(inst.context, inst.replay_context());
        }
        assert_eq!(f.tools.count("tagger"), 24);
    }

    async fn futures_join(engine: &Arc<WorkflowEngine>, n: usize) -> Vec<String> {
        let mut handles = Vec::new();
        for _ in 0..n {
            let e = Arc::clone(engine);
            handles.push(tokio::spawn(async move {
                let id = e.create_instance(&task("demo")).await.unwrap();
                e.run_instance(&id).await.unwrap();
                id
            }));
        }
        let mut ids = Vec::new();
        for h in handles {
            ids.push(h.await.unwrap());
        }
        ids
    }

    #[tokio::test]
    async fn rerun_of_terminal_instance_is_idempotent() {
        let f = fixture(lookup_then_tag());
        let inst = run(&f).await;
        let again = f.engine.run_instance(&inst.instance_id).await.unwrap();
        assert_eq!(again, InstanceStatus::Completed);
        assert_eq!(f.tools.count("lister"), 1);
    }
}
