//! Generated plans: valid ones must run without a missing input, mutated
//! ones must be rejected by validation.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use serde_json::{json, Map, Value};

use capmesh::clock::MockClock;
use capmesh::events::Recorder;
use capmesh::kv::MemoryKv;
use capmesh::methodology::{IntentEntry, Methodology};
use capmesh::planning::{
    validate_plan, BranchSpec, LoopSpec, Plan, PlanningError, ProcStep, StepKind, StepSource,
};
use capmesh::ports::{
    DiscoverError, DiscoveryPort, InvokeError, MethodologyPort, PlanningPort, PortError,
    ProfilePort, ToolInvoker,
};
use capmesh::registry::{DiscoveryQuery, DiscoveryResult, ToolDescriptor, ToolState};
use capmesh::services::{InvokeRequest, InvokeResponse};
use capmesh::task::StructuredTask;
use capmesh::workflow::{
    InstanceStatus, StepOutcome, WorkflowConfig, WorkflowDeps, WorkflowEngine,
};

use super::{ctx, runtime, Outcome};

const SEED_KEY: &str = "party";
const PROFILE_KEYS: [&str; 2] = ["home", "region"];
const ECHO_BASE: &str = "http://echo.test/";

#[derive(Debug, Clone)]
pub enum Gen {
    Internal {
        reads: Vec<u8>,
        literal: bool,
    },
    Tool {
        reads: Vec<u8>,
        outs: u8,
    },
    Profile {
        key: u8,
    },
    Branch {
        cond: u8,
        pick: u8,
        then_steps: Vec<Gen>,
        else_steps: Vec<Gen>,
    },
    Loop {
        body: Vec<Gen>,
        export: bool,
    },
}

fn gen() -> impl Strategy<Value = Gen> {
    let leaf = prop_oneof![
        (prop::collection::vec(any::<u8>(), 0..3), any::<bool>())
            .prop_map(|(reads, literal)| Gen::Internal { reads, literal }),
        (prop::collection::vec(any::<u8>(), 0..3), 1u8..3)
            .prop_map(|(reads, outs)| Gen::Tool { reads, outs }),
        any::<u8>().prop_map(|key| Gen::Profile { key }),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            3 => inner.clone(),
            1 => (0u8..5, any::<u8>(), prop::collection::vec(inner.clone(), 0..3), prop::collection::vec(inner.clone(), 0..3))
                .prop_map(|(cond, pick, then_steps, else_steps)| Gen::Branch { cond, pick, then_steps, else_steps }),
            1 => (prop::collection::vec(inner, 1..3), any::<bool>()).prop_map(|(body, export)| Gen::Loop { body, export }),
        ]
    })
}

pub fn plan_strategy() -> impl Strategy<Value = Plan> {
    prop::collection::vec(gen(), 1..6).prop_map(|gens| Builder::default().plan(&gens))
}

#[derive(Default)]
struct Builder {
    steps: usize,
    keys: usize,
}

fn pick(avail: &BTreeSet<String>, sel: u8) -> Option<String> {
    let keys: Vec<&String> = avail.iter().collect();
    (!keys.is_empty()).then(|| keys[usize::from(sel) % keys.len()].clone())
}

fn step(id: String, kind: StepKind, source: StepSource) -> ProcStep {
    let mut s = ProcStep::execute(&id, &format!("generated {id}"), source);
    s.kind = kind;
    s
}

impl Builder {
    fn id(&mut self) -> String {
        self.steps += 1;
        format!("g{}", self.steps)
    }

    fn key(&mut self, prefix: &str) -> String {
        self.keys += 1;
        format!("{prefix}{}", self.keys)
    }

    fn plan(mut self, gens: &[Gen]) -> Plan {
        let seeds: BTreeSet<String> = [SEED_KEY.to_string()].into();
        let mut avail = seeds.clone();
        let steps = self.steps(gens, &mut avail);
        let result_keys = avail
            .difference(&seeds)
            .last()
            .into_iter()
            .cloned()
            .collect();
        Plan {
            plan_id: "generated".into(),
            task_id: "t".into(),
            methodology_id: "m".into(),
            result_keys,
            steps,
        }
    }

    fn steps(&mut self, gens: &[Gen], avail: &mut BTreeSet<String>) -> Vec<ProcStep> {
        let mut out = Vec::new();
        for g in gens {
            self.one(g, avail, &mut out);
        }
        out
    }

    fn reads(reads: &[u8], avail: &BTreeSet<String>) -> Vec<String> {
        let mut out: Vec<String> = reads.iter().filter_map(|r| pick(avail, *r)).collect();
        out.sort();
        out.dedup();
        out
    }

    fn one(&mut self, g: &Gen, avail: &mut BTreeSet<String>, out: &mut Vec<ProcStep>) {
        match g {
            Gen::Internal { reads, literal } => {
                let mut s = step(self.id(), StepKind::Execute, StepSource::Internal);
                let key = self.key("k");
                s.required_keys = Self::reads(reads, avail);
                let value = match s.required_keys.first() {
                    Some(k) if !literal => json!(format!("{{context.{k}}}")),
                    _ => json!(format!("literal {key}")),
                };
                s.binding.insert(key.clone(), value);
                s.output_keys = vec![key.clone()];
                avail.insert(key);
                out.push(s);
            }
            Gen::Tool { reads, outs } => {
                let mut s = step(self.id(), StepKind::Execute, StepSource::Tool);
                s.required_keys = Self::reads(reads, avail);
                if let Some(k) = s.required_keys.first() {
                    s.binding
                        .insert("query".into(), json!(format!("about {{context.{k}}}")));
                }
                s.output_keys = (0..*outs).map(|_| self.key("k")).collect();
                avail.extend(s.output_keys.iter().cloned());
                out.push(s);
            }
            Gen::Profile { key } => {
                let mut s = step(self.id(), StepKind::Execute, StepSource::Profile);
                let k = PROFILE_KEYS[usize::from(*key) % PROFILE_KEYS.len()].to_string();
                s.output_keys = vec![k.clone()];
                avail.insert(k);
                out.push(s);
            }
            Gen::Branch {
                cond,
                pick: sel,
                then_steps,
                else_steps,
            } => {
                let id = self.id();
                let condition = match cond {
                    0 => "true".to_string(),
                    1 => "false".to_string(),
                    2 => format!(
                        "has({})",
                        pick(avail, *sel).unwrap_or_else(|| "absent".into())
                    ),
                    3 => "not has(absent)".to_string(),
                    _ => format!("has(absent) or has({SEED_KEY})"),
                };
                let mut then_avail = avail.clone();
                let then_steps = self.steps(then_steps, &mut then_avail);
                let mut else_avail = avail.clone();
                let else_steps = self.steps(else_steps, &mut else_avail);
                let mut s = step(id, StepKind::Branch, StepSource::Internal);
                s.branch = Some(BranchSpec {
                    condition,
                    then_steps,
                    else_steps,
                });
                avail.extend(then_avail.intersection(&else_avail).cloned());
                out.push(s);
            }
            Gen::Loop { body, export } => {
                let list = self.key("l");
                let mut source = step(self.id(), StepKind::Execute, StepSource::Internal);
                source.binding.insert(list.clone(), json!(["a", "b", "c"]));
                source.output_keys = vec![list.clone()];
                avail.insert(list.clone());
                out.push(source);

                let id = self.id();
                let mut scope = avail.clone();
                scope.insert("item".into());
                scope.insert("index".into());
                let before = scope.clone();
                let body_steps = self.steps(body, &mut scope);
                let exported: Vec<String> = if *export {
                    scope.difference(&before).take(1).cloned().collect()
                } else {
                    Vec::new()
                };
                let mut s = step(id, StepKind::Loop, StepSource::Internal);
                s.output_keys = exported.clone();
                s.loop_spec = Some(LoopSpec {
                    over_key: Some(list),
                    condition: None,
                    max_iterations: None,
                    exported_keys: exported.clone(),
                    body_steps,
                });
                avail.extend(exported);
                out.push(s);
            }
        }
    }
}

/// Discovery always offers a parameterless tool whose endpoint names the
/// outputs it will echo back.
#[derive(Debug)]
struct EchoTools;

#[async_trait]
impl DiscoveryPort for EchoTools {
    async fn discover(&self, q: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError> {
        let tool = ToolDescriptor {
            tool_id: "echo".into(),
            name: "echo".into(),
            description: "echoes its outputs".into(),
            tags: Vec::new(),
            endpoint: format!("{ECHO_BASE}{}", q.required_outputs.join(",")),
            params: Vec::new(),
            output_schema: Vec::new(),
            broker_id: "b".into(),
            state: ToolState::Available,
            last_heartbeat_at: None,
            registered_at: None,
            version: 1,
        };
        Ok(DiscoveryResult {
            selected: "echo".into(),
            bound_params: BTreeMap::new(),
            score: 1.0,
            alternatives: Vec::new(),
            tool,
        })
    }
}

#[async_trait]
impl ToolInvoker for EchoTools {
    async fn invoke(
        &self,
        endpoint: &str,
        req: &InvokeRequest,
    ) -> Result<InvokeResponse, InvokeError> {
        let keys = endpoint.strip_prefix(ECHO_BASE).unwrap_or_default();
        let result: Map<String, Value> = keys
            .split(',')
            .filter(|k| !k.is_empty())
            .map(|k| (k.to_string(), json!(format!("{k} value"))))
            .collect();
        Ok(InvokeResponse::ok(
            &req.invocation_id,
            Value::Object(result),
        ))
    }
}

#[derive(Debug)]
struct AnswersEverything;

#[async_trait]
impl ProfilePort for AnswersEverything {
    async fn lookup(&self, namespace: &str, key: &str) -> Result<Option<Value>, PortError> {
        Ok(Some(json!(format!("{namespace}/{key}"))))
    }
}

#[derive(Debug)]
struct FixedPlan(Mutex<Plan>);

#[async_trait]
impl PlanningPort for FixedPlan {
    async fn plan(&self, task: &StructuredTask, _: &str) -> Result<Plan, PlanningError> {
        let mut p = self.0.lock().clone();
        p.task_id = task.task_id.clone();
        Ok(p)
    }
}

#[async_trait]
impl MethodologyPort for FixedPlan {
    async fn match_task(&self, task: &StructuredTask) -> Result<Option<Methodology>, PortError> {
        let m = serde_json::from_value(json!({
            "methodology_id": "m", "intent": task.intent, "description": "generated",
            "process_steps": [{"title": "t", "description": "d"}]
        }))
        .map_err(|e| PortError::Unavailable(e.to_string()))?;
        Ok(Some(m))
    }
    async fn fetch(&self, _: &str) -> Result<Option<Methodology>, PortError> {
        Ok(None)
    }
    async fn lexicon(&self) -> Result<Vec<IntentEntry>, PortError> {
        Ok(Vec::new())
    }
}

fn task() -> StructuredTask {
    StructuredTask {
        task_id: "t".into(),
        request_id: "r".into(),
        user_id: "u1".into(),
        intent: "generated".into(),
        entities: [(SEED_KEY.to_string(), "family".to_string())].into(),
        constraints: Vec::new(),
        raw_text: "generated".into(),
    }
}

/// Runs `plan` to completion; the error names the first failed step.
pub async fn run_plan(plan: Plan) -> Result<usize, String> {
    let fixed = Arc::new(FixedPlan(Mutex::new(plan)));
    let engine = ctx(
        WorkflowEngine::open(
            WorkflowConfig::default(),
            WorkflowDeps {
                methodologies: fixed.clone(),
                planner: fixed,
                profiles: Arc::new(AnswersEverything),
                discovery: Arc::new(EchoTools),
                invoker: Arc::new(EchoTools),
            },
            MemoryKv::shared(),
            Arc::new(MockClock::at_demo_epoch()),
            Recorder::disabled(),
        ),
        "engine",
    )?;
    let id = ctx(engine.create_instance(&task()).await, "create instance")?;
    let status = ctx(engine.run_instance(&id).await, "run")?;
    let inst = engine.get_instance(&id).ok_or("instance vanished")?;
    if let Some(s) = inst
        .step_states
        .iter()
        .find(|s| s.error_code.as_deref() == Some("MissingInput"))
    {
        return Err(format!("MissingInput at {}: {:?}", s.step_ref, s.error));
    }
    if status != InstanceStatus::Completed {
        let failed = inst
            .step_states
            .iter()
            .find(|s| s.outcome == StepOutcome::Failed);
        return Err(format!("status {status:?}; failed step {failed:?}"));
    }
    Ok(inst.step_states.len())
}

pub const MUTATIONS: [&str; 9] = [
    "ghost required key",
    "duplicate step id",
    "empty plan",
    "unproduced result key",
    "unknown binding root",
    "kind mismatch",
    "empty loop body",
    "bad condition",
    "read before produced",
];

/// Index paths of every step, depth first; children are numbered then-arm,
/// else-arm, loop body.
fn paths(steps: &[ProcStep], prefix: &[usize], out: &mut Vec<Vec<usize>>) {
    for (i, s) in steps.iter().enumerate() {
        let mut p = prefix.to_vec();
        p.push(i);
        out.push(p.clone());
        let kids: Vec<ProcStep> = s.children().into_iter().cloned().collect();
        paths(&kids, &p, out);
    }
}

fn step_at<'a>(steps: &'a mut [ProcStep], path: &[usize]) -> &'a mut ProcStep {
    let s = &mut steps[path[0]];
    if path.len() == 1 {
        return s;
    }
    let i = path[1];
    let rest = &path[1..];
    let kids = if let Some(b) = s.branch.as_mut() {
        if i < b.then_steps.len() {
            return step_at(&mut b.then_steps, rest);
        }
        let mut shifted = rest.to_vec();
        shifted[0] -= b.then_steps.len();
        return step_at(&mut b.else_steps, &shifted);
    } else {
        &mut s
            .loop_spec
            .as_mut()
            .expect("only branches and loops have children")
            .body_steps
    };
    step_at(kids, rest)
}

/// Applies mutation `kind` to a valid plan; `sel` picks the target step.
pub fn mutate(mut plan: Plan, kind: usize, sel: usize) -> Plan {
    let mut all = Vec::new();
    paths(&plan.steps, &[], &mut all);
    let target = all[sel % all.len()].clone();
    match kind {
        0 => step_at(&mut plan.steps, &target)
            .required_keys
            .push("ghost_key".into()),
        1 => {
            if all.len() < 2 {
                let copy = plan.steps[0].clone();
                plan.steps.push(copy);
            } else {
                let other = all[(sel + 1 + sel / all.len()) % all.len()].clone();
                let (a, b) = if other == target {
                    (all[0].clone(), all[1].clone())
                } else {
                    (target, other)
                };
                let id = step_at(&mut plan.steps, &a).step_id.clone();
                step_at(&mut plan.steps, &b).step_id = id;
            }
        }
        2 => plan.steps.clear(),
        3 => plan.result_keys.push("never_produced".into()),
        4 => {
            let exec = all
                .iter()
                .cycle()
                .skip(sel % all.len())
                .take(all.len())
                .find(|p| step_at(&mut plan.steps, p).kind == StepKind::Execute)
                .cloned()
                .unwrap_or(target);
            step_at(&mut plan.steps, &exec)
                .binding
                .insert("ghost_param".into(), json!("{context.ghost_root}"));
        }
        5 => {
            let s = step_at(&mut plan.steps, &target);
            s.kind = match s.kind {
                StepKind::Execute => StepKind::Loop,
                StepKind::Branch => StepKind::Execute,
                StepKind::Loop => StepKind::Branch,
            };
        }
        6 => {
            let mut s = step("empty_loop".into(), StepKind::Loop, StepSource::Internal);
            s.loop_spec = Some(LoopSpec {
                over_key: None,
                condition: Some("true".into()),
                max_iterations: Some(1),
                exported_keys: Vec::new(),
                body_steps: Vec::new(),
            });
            plan.steps.push(s);
        }
        7 => {
            let mut s = step("bad_branch".into(), StepKind::Branch, StepSource::Internal);
            s.branch = Some(BranchSpec {
                condition: "has( and or".into(),
                then_steps: Vec::new(),
                else_steps: Vec::new(),
            });
            plan.steps.push(s);
        }
        _ => {
            // nothing but the task entities exists before the first step
            let produced = all
                .iter()
                .flat_map(|p| step_at(&mut plan.steps, p).output_keys.clone())
                .find(|k| k != SEED_KEY)
                .unwrap_or_else(|| "ghost_key".into());
            let mut s = step("early_reader".into(), StepKind::Execute, StepSource::Tool);
            s.required_keys = vec![produced];
            plan.steps.insert(0, s);
        }
    }
    plan
}

pub fn criterion_6(cases: u32) -> Outcome {
    let rt = runtime();
    let seeds = vec![SEED_KEY.to_string()];
    let (states, valid_runs) = (Cell::new(0usize), Cell::new(0u32));
    let mut runner = TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let result = runner.run(&plan_strategy(), |plan| {
        if let Err(v) = validate_plan(&plan, &seeds) {
            return Err(TestCaseError::fail(format!(
                "generator produced an invalid plan: {v:?}"
            )));
        }
        let n = rt.block_on(run_plan(plan)).map_err(TestCaseError::fail)?;
        states.set(states.get() + n);
        valid_runs.set(valid_runs.get() + 1);
        Ok(())
    });
    ctx(result, "valid plan failed")?;

    let per_kind = RefCell::new(vec![0u32; MUTATIONS.len()]);
    let mut runner = TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let result = runner.run(
        &(plan_strategy(), 0..MUTATIONS.len(), 0usize..10_000),
        |(plan, kind, sel)| {
            let mutated = mutate(plan, kind, sel);
            prop_assert!(
                validate_plan(&mutated, &seeds).is_err(),
                "{} accepted: {}",
                MUTATIONS[kind],
                mutated.to_canonical_json()
            );
            per_kind.borrow_mut()[kind] += 1;
            Ok(())
        },
    );
    ctx(result, "mutated plan accepted")?;
    let kinds = per_kind.into_inner();
    let breakdown: Vec<String> = MUTATIONS
        .iter()
        .zip(&kinds)
        .map(|(m, n)| format!("{m} {n}"))
        .collect();
    Ok(format!(
        "{} valid plans ran to completion ({} step states, no MissingInput); {} mutated plans rejected ({})",
        valid_runs.get(),
        states.get(),
        kinds.iter().sum::<u32>(),
        breakdown.join(", ")
    ))
}
