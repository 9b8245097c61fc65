//! The demo scenarios, backend parity and crash recovery.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use capmesh::clock::{Clock, MockClock};
use capmesh::config::Config;
use capmesh::planning::Plan;
use capmesh::reasoner::Backend;
use capmesh::registry::ToolState;
use capmesh::scenario::{compare, shipped_golden, Harness, DEMO_USER, TRAVEL_QUERY};
use capmesh::services::{DemoData, ToolHost};
use capmesh::stack::{SeedBundle, Stack, StackOptions};
use capmesh::task::{TaskStatus, UserRequest};
use capmesh::workflow::{InstanceStatus, StepOutcome, WorkflowError, WorkflowInstance};

use super::http::{top_level, HttpDemo};
use super::oracle::{adverse_cities, names, nearby_cities};
use super::{ctx, ensure, Outcome};

pub const WEATHER_TITLE: &str = "Excluding cities with adverse weather during the travel period";
const HOME: &str = "A1";
const RADIUS_KM: f64 = 200.0;

fn top_states(inst: &WorkflowInstance) -> Vec<(String, Option<StepOutcome>, Option<String>)> {
    inst.plan
        .as_ref()
        .map(|p| {
            p.steps
                .iter()
                .map(|s| {
                    let st = inst.state(&s.step_id);
                    (
                        s.title.clone(),
                        st.map(|x| x.outcome),
                        st.and_then(|x| x.tool_used.clone()),
                    )
                })
                .collect()
        })
        .unwrap_or_default()
}

pub async fn criterion_1() -> Outcome {
    let mut h = ctx(
        Harness::demo(Config::shipped(), StackOptions::default()).await,
        "harness",
    )?;
    let run = ctx(h.run(1).await, "scenario 1")?;
    let steps = top_states(&run.instance);
    ensure(steps.len() == 3, || format!("{} plan steps", steps.len()))?;
    ensure(
        steps.iter().all(|s| s.1 == Some(StepOutcome::Succeeded)),
        || format!("steps {steps:?}"),
    )?;
    let first = run
        .instance
        .state(&run.instance.plan.as_ref().unwrap().steps[0].step_id)
        .unwrap();
    ensure(
        first
            .outputs
            .as_ref()
            .is_some_and(|o| o.contains_key("home_address"))
            && first.tool_used.is_none(),
        || format!("first step is not the home_address profile lookup: {first:?}"),
    )?;
    let tools: Vec<Option<String>> = steps.iter().map(|s| s.2.clone()).collect();
    let want_tools = [
        None,
        Some("nearby-city-finder".to_string()),
        Some("attraction-lookup".to_string()),
    ];
    ensure(tools == want_tools, || format!("tools {tools:?}"))?;
    let expected = nearby_cities(HOME, RADIUS_KM);
    let result = &run.transcript.final_result;
    let got = names(&result.payload["recommendations"]);
    ensure(result.status == TaskStatus::Completed, || {
        format!("status {:?}", result.status)
    })?;
    ensure(got == expected, || {
        format!("cities {got:?}, expected {expected:?}")
    })?;
    ctx(
        compare(&run.transcript.normalized(), shipped_golden(1).unwrap()),
        "golden",
    )?;
    ensure(run.elapsed < Duration::from_secs(10), || {
        format!("took {:?}", run.elapsed)
    })?;
    Ok(format!(
        "3 steps succeeded (profile, nearby-city-finder, attraction-lookup); cities {} match the fixtures; golden matches; {} ms",
        got.join(", "),
        run.elapsed.as_millis()
    ))
}

/// Scenario 1 and 2 over HTTP, returning the stack for scenario 3.
async fn through_scenario_2() -> Result<(HttpDemo, String), String> {
    let demo = HttpDemo::boot().await?;
    let (first, _) = demo.ask().await?;
    ensure(first["status"] == "completed", || {
        format!("scenario 1: {first}")
    })?;
    let edit = demo.insert_weather_step().await?;
    let (result, inst) = demo.ask().await?;
    let steps = top_level(&inst);
    ensure(result["status"] == "needs_tool", || {
        format!("status {}", result["status"])
    })?;
    ensure(inst["status"] == "needs_tool", || {
        format!("instance status {}", inst["status"])
    })?;
    ensure(steps.len() == 4, || format!("{} plan steps", steps.len()))?;
    let outcomes: Vec<&str> = steps
        .iter()
        .map(|(_, st)| st["outcome"].as_str().unwrap_or("none"))
        .collect();
    ensure(
        outcomes == ["succeeded", "succeeded", "succeeded", "no_tool"],
        || format!("outcomes {outcomes:?}"),
    )?;
    ensure(steps[3].0["title"] == WEATHER_TITLE, || {
        format!("4th step {}", steps[3].0["title"])
    })?;
    Ok((
        demo,
        format!(
            "methodology v{} via POST /methodologies/{{id}}/steps; 4-step plan, step 4 no_tool, status needs_tool",
            edit["version"]
        ),
    ))
}

pub async fn criterion_2() -> Outcome {
    let (demo, detail) = through_scenario_2().await?;
    demo.shutdown().await;
    Ok(detail)
}

pub async fn criterion_3() -> Outcome {
    let (demo, _) = through_scenario_2().await?;
    let out = async {
        demo.register_weather_tool().await?;
        let (result, inst) = demo.ask().await?;
        let steps = top_level(&inst);
        ensure(result["status"] == "completed", || format!("status {}", result["status"]))?;
        ensure(steps.len() == 4, || format!("{} plan steps", steps.len()))?;
        ensure(steps.iter().all(|(_, st)| st["outcome"] == "succeeded"), || "not all steps succeeded".into())?;
        ensure(steps[3].1["tool_used"] == "weather-forecast", || format!("step 4 tool {}", steps[3].1["tool_used"]))?;
        let candidates = nearby_cities(HOME, RADIUS_KM);
        let adverse = adverse_cities();
        let expected: Vec<String> = candidates.iter().filter(|c| !adverse.contains(*c)).cloned().collect();
        let got = names(&result["payload"]["suitable_cities"]);
        ensure(got == expected, || format!("cities {got:?}, expected {expected:?}"))?;
        let excluded: BTreeSet<&String> = candidates.iter().filter(|c| !got.contains(c)).collect();
        ensure(excluded.len() == 1 && excluded.contains(&"C2".to_string()), || {
            format!("excluded {excluded:?}")
        })?;
        Ok(format!(
            "weather tool registered via POST /services; 4 steps succeeded; result {} excludes exactly C2",
            got.join(", ")
        ))
    }
    .await;
    demo.shutdown().await;
    out
}

type Selections = Vec<(Plan, Vec<(String, Option<String>)>)>;

async fn selections(backend: Backend) -> Result<Selections, String> {
    let mut config = Config::shipped();
    config.reasoner.backend = backend;
    let mut h = ctx(
        Harness::demo(config, StackOptions::default()).await,
        "harness",
    )?;
    let mut out = Vec::new();
    for n in 1..=3 {
        let run = ctx(h.run(n).await, &format!("scenario {n}"))?;
        let plan = run.instance.plan.clone().ok_or("no plan")?.without_ids();
        let tools = run
            .instance
            .step_states
            .iter()
            .map(|s| (s.step_ref.clone(), s.tool_used.clone()))
            .collect();
        out.push((plan, tools));
    }
    Ok(out)
}

pub async fn criterion_7() -> Outcome {
    let scripted = selections(Backend::Scripted).await?;
    let rules = selections(Backend::Rules).await?;
    for (n, (a, b)) in scripted.iter().zip(&rules).enumerate() {
        ensure(a.0 == b.0, || format!("scenario {}: plans differ", n + 1))?;
        ensure(a.1 == b.1, || {
            format!(
                "scenario {}: tool selections differ: {:?} vs {:?}",
                n + 1,
                a.1,
                b.1
            )
        })?;
    }
    let steps: Vec<String> = scripted
        .iter()
        .map(|(p, _)| p.steps.len().to_string())
        .collect();
    Ok(format!(
        "scripted and rules agree on plans ({} steps) and tool selections for scenarios 1-3",
        steps.join("/")
    ))
}

pub async fn criterion_8() -> Outcome {
    let dir = ctx(tempfile::tempdir(), "tempdir")?;
    let clock = MockClock::at_demo_epoch();
    let tools = Arc::new(ToolHost::demo(
        "http://127.0.0.1:7110",
        Arc::new(DemoData::shipped()),
    ));
    let opts = || StackOptions {
        clock: Some(Arc::new(clock.clone())),
        tools: Some(tools.clone()),
        ..StackOptions::default()
    };
    let mut config = Config::shipped();
    config.data_dir = Some(dir.path().to_path_buf());
    config.workflow.halt_after_steps = Some(2);

    let first = ctx(Stack::in_process(config.clone(), opts()), "first stack")?;
    ctx(first.seed(&SeedBundle::demo()).await, "seed")?;
    let req = UserRequest {
        request_id: "crash-request".into(),
        user_id: DEMO_USER.into(),
        text: TRAVEL_QUERY.into(),
        submitted_at: clock.now(),
    };
    let task = ctx(first.reception.structure_request(&req).await, "structure")?;
    let id = ctx(first.workflow.create_instance(&task).await, "create")?;
    let halted = first.workflow.run_instance(&id).await;
    ensure(matches!(halted, Err(WorkflowError::Halted)), || {
        format!("expected a halt, got {halted:?}")
    })?;
    let before = tools.counters();
    let lookups_before = first.profiles.lookup_count();
    ensure(
        before["nearby-cities"] == 1 && before["attractions"] == 0,
        || format!("counters {before:?}"),
    )?;
    drop(first);

    config.workflow.halt_after_steps = None;
    let second = ctx(Stack::in_process(config, opts()), "restarted stack")?;
    let names = ["nearby-city-finder", "attraction-lookup"];
    let mut cycles = 0;
    while !names.iter().all(|n| {
        second
            .registry
            .get(n)
            .is_some_and(|t| t.state == ToolState::Available)
    }) {
        cycles += 1;
        ensure(cycles <= 2, || {
            "tools not re-registered after 2 broker cycles".into()
        })?;
        second.broker.heartbeat_cycle(clock.now()).await;
    }
    let resumed = second.workflow.resume_all().await;
    ensure(resumed.len() == 1 && resumed[0].0 == id, || {
        format!("resumed {resumed:?}")
    })?;
    ensure(
        matches!(resumed[0].1, Ok(InstanceStatus::Completed)),
        || format!("resume {:?}", resumed[0].1),
    )?;
    let after = tools.counters();
    ensure(after["nearby-cities"] == 1, || {
        format!("nearby-cities re-invoked: {after:?}")
    })?;
    ensure(after["attractions"] == 3, || {
        format!("attractions {after:?}")
    })?;
    ensure(second.profiles.lookup_count() == 0, || {
        "profile lookup re-run".into()
    })?;
    let inst = second.workflow.get_instance(&id).ok_or("instance lost")?;
    for s in &inst.plan.as_ref().unwrap().steps[..2] {
        let n = inst
            .step_states
            .iter()
            .filter(|st| st.step_ref == s.step_id)
            .count();
        ensure(n == 1, || format!("{} has {n} states", s.step_id))?;
    }
    Ok(format!(
        "halted after 2 steps (profile lookups {lookups_before}, nearby-cities 1); restart re-registered tools in {cycles} cycle(s); resumed to completed with nearby-cities 1, attractions 3, profile lookups 0"
    ))
}
