//! Discovery against a brute-force reference, and liveness on a mock clock.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use chrono::Duration;
use proptest::prelude::*;
use proptest::sample::{select, subsequence};
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

use capmesh::broker::{BrokerConfig, ToolBroker};
use capmesh::clock::{Clock, MockClock};
use capmesh::events::Recorder;
use capmesh::kv::MemoryKv;
use capmesh::ports::{DiscoverError, HealthProbe, HeartbeatRequest};
use capmesh::registry::{
    ContextKey, DiscoveryQuery, DiscoveryResult, ParamBinding, ParamSpec, ParamType,
    RegistryConfig, ToolDescriptor, ToolRegistry, ToolState,
};

use super::oracle::{stopwords, token_set};
use super::{ctx, ensure, runtime, Outcome};

const WORDS: [&str; 18] = [
    "city",
    "cities",
    "weather",
    "forecast",
    "nearby",
    "find",
    "attractions",
    "family",
    "museum",
    "route",
    "price",
    "storm",
    "home",
    "address",
    "date",
    "name",
    "trip",
    "radius",
];
const FILLERS: [&str; 4] = ["the", "of", "and", "for"];
const OUTPUTS: [&str; 5] = ["cities", "days", "attractions", "price", "route"];
const PARAM_NAMES: [&str; 5] = ["home_address", "city", "date", "radius", "count"];
const CONTEXT_NAMES: [&str; 9] = [
    "home_address",
    "city",
    "date",
    "radius",
    "count",
    "home",
    "city_name",
    "address",
    "trip_date",
];
const TYPES: [ParamType; 5] = [
    ParamType::String,
    ParamType::Number,
    ParamType::Boolean,
    ParamType::List,
    ParamType::Object,
];
/// Seconds since a tool's last heartbeat, around the liveness boundaries.
const SILENCES: [i64; 9] = [0, 5, 15, 20, 21, 25, 30, 31, 45];
const SUSPECT_AFTER_S: i64 = 20;

fn word() -> impl Strategy<Value = String> {
    (
        select(
            WORDS
                .iter()
                .chain(FILLERS.iter())
                .copied()
                .collect::<Vec<_>>(),
        ),
        0u8..4,
    )
        .prop_map(|(w, case)| match case {
            0 => w.to_uppercase(),
            1 => {
                let mut c = w.chars();
                c.next()
                    .map(|f| f.to_uppercase().chain(c).collect())
                    .unwrap_or_default()
            }
            _ => w.to_string(),
        })
}

fn text(len: std::ops::Range<usize>) -> impl Strategy<Value = String> {
    (
        prop::collection::vec(word(), len),
        select(vec![" ", "-", ", ", " / "]),
    )
        .prop_map(|(ws, sep)| ws.join(sep))
}

fn param() -> impl Strategy<Value = ParamSpec> {
    (
        select(PARAM_NAMES.to_vec()),
        select(TYPES.to_vec()),
        any::<bool>(),
        text(0..5),
    )
        .prop_map(|(name, kind, required, description)| ParamSpec {
            name: name.to_string(),
            kind,
            required,
            description,
        })
}

fn spec(name: &str) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        kind: ParamType::List,
        required: true,
        description: String::new(),
    }
}

/// A descriptor and how long it has been silent.
fn tool() -> impl Strategy<Value = (ToolDescriptor, i64)> {
    (
        text(1..7),
        prop::collection::vec(word(), 0..3),
        subsequence(OUTPUTS.to_vec(), 0..3),
        prop::collection::vec(param(), 0..4),
        select(SILENCES.to_vec()),
    )
        .prop_map(|(description, tags, outputs, params, silence)| {
            let mut seen = BTreeSet::new();
            let params = params
                .into_iter()
                .filter(|p| seen.insert(p.name.clone()))
                .collect();
            let desc = ToolDescriptor {
                tool_id: String::new(),
                name: "generated".into(),
                description,
                tags,
                endpoint: "http://tools.test/invoke".into(),
                params,
                output_schema: outputs.into_iter().map(spec).collect(),
                broker_id: String::new(),
                state: ToolState::Available,
                last_heartbeat_at: None,
                registered_at: None,
                version: 0,
            };
            (desc, silence)
        })
}

/// Up to 50 tools with ids assigned in shuffled order.
fn registry() -> impl Strategy<Value = Vec<(ToolDescriptor, i64)>> {
    prop::collection::vec(tool(), 0..=50).prop_flat_map(|tools| {
        let n = tools.len();
        (Just(tools), Just((0..n).collect::<Vec<_>>()).prop_shuffle()).prop_map(
            |(mut tools, ids)| {
                for ((t, _), id) in tools.iter_mut().zip(ids) {
                    t.tool_id = format!("tool-{id:02}");
                }
                tools
            },
        )
    })
}

fn query() -> impl Strategy<Value = DiscoveryQuery> {
    (
        text(0..7),
        subsequence(CONTEXT_NAMES.to_vec(), 0..6),
        prop::collection::vec(prop::option::of(select(TYPES.to_vec())), 6),
        subsequence(OUTPUTS.to_vec(), 0..3),
    )
        .prop_map(|(step_description, keys, kinds, outputs)| DiscoveryQuery {
            step_description,
            context_keys: keys
                .into_iter()
                .zip(kinds)
                .map(|(name, kind)| ContextKey {
                    name: name.to_string(),
                    kind,
                })
                .collect(),
            required_outputs: outputs.into_iter().map(str::to_string).collect(),
        })
}

/// Reference scorer: the weighted sum of token overlap, output coverage and
/// required-parameter coverage.
pub struct Reference {
    stop: BTreeSet<String>,
}

impl Reference {
    pub fn new() -> Self {
        Self { stop: stopwords() }
    }

    fn tokens(&self, text: &str) -> BTreeSet<String> {
        token_set(text, &self.stop)
    }

    pub fn bind(&self, p: &ParamSpec, keys: &[ContextKey]) -> Option<String> {
        let fits = |k: &ContextKey| k.kind.is_none() || k.kind == Some(p.kind);
        if let Some(k) = keys.iter().find(|k| k.name == p.name && fits(k)) {
            return Some(k.name.clone());
        }
        let desc = self.tokens(&p.description);
        let mut best: Option<(usize, &str)> = None;
        for k in keys.iter().filter(|k| fits(k)) {
            let toks = self.tokens(&k.name);
            if toks.is_empty() || !toks.iter().all(|t| desc.contains(t)) {
                continue;
            }
            let better = match best {
                None => true,
                Some((n, name)) => toks.len() > n || (toks.len() == n && k.name.as_str() < name),
            };
            if better {
                best = Some((toks.len(), &k.name));
            }
        }
        best.map(|(_, n)| n.to_string())
    }

    pub fn score(&self, t: &ToolDescriptor, q: &DiscoveryQuery) -> f64 {
        let step = self.tokens(&q.step_description);
        let mut offered = self.tokens(&t.description);
        for tag in &t.tags {
            offered.extend(self.tokens(tag));
        }
        let overlap = if step.is_empty() {
            0.0
        } else {
            step.iter().filter(|s| offered.contains(*s)).count() as f64 / step.len() as f64
        };
        let outputs = if q.required_outputs.is_empty() {
            0.0
        } else {
            let names: BTreeSet<&str> = t.output_schema.iter().map(|s| s.name.as_str()).collect();
            q.required_outputs
                .iter()
                .filter(|o| names.contains(o.as_str()))
                .count() as f64
                / q.required_outputs.len() as f64
        };
        let required: Vec<&ParamSpec> = t.params.iter().filter(|p| p.required).collect();
        let params = if required.is_empty() {
            1.0
        } else {
            required
                .iter()
                .filter(|p| self.bind(p, &q.context_keys).is_some())
                .count() as f64
                / required.len() as f64
        };
        0.6 * overlap + 0.25 * outputs + 0.15 * params
    }

    /// Expected discovery outcome when only `available` tools are live.
    pub fn discover(&self, available: &[&ToolDescriptor], q: &DiscoveryQuery) -> Expected {
        let scored: Vec<(f64, &ToolDescriptor)> =
            available.iter().map(|t| (self.score(t, q), *t)).collect();
        let best = scored.iter().fold(0.0_f64, |m, (s, _)| m.max(*s));
        let mut winners: Vec<(f64, &ToolDescriptor)> =
            scored.into_iter().filter(|(s, _)| *s >= 0.2).collect();
        if winners.is_empty() {
            return Expected::NoTool { best };
        }
        // brute-force argmax, repeated, instead of a sort
        let mut order = Vec::new();
        while !winners.is_empty() {
            let mut top = 0;
            for i in 1..winners.len() {
                let (s, t) = winners[i];
                let (bs, bt) = winners[top];
                if s > bs || (s == bs && t.tool_id < bt.tool_id) {
                    top = i;
                }
            }
            let (s, t) = winners.remove(top);
            order.push((t.tool_id.clone(), s));
        }
        let selected = available
            .iter()
            .find(|t| t.tool_id == order[0].0)
            .expect("selected tool");
        let mut bound = BTreeMap::new();
        for p in &selected.params {
            match self.bind(p, &q.context_keys) {
                Some(k) => {
                    bound.insert(p.name.clone(), ParamBinding::FromContext(k));
                }
                None if p.required => {
                    bound.insert(p.name.clone(), ParamBinding::Unresolved);
                }
                None => {}
            }
        }
        Expected::Found { order, bound }
    }
}

#[derive(Debug, PartialEq)]
pub enum Expected {
    Found {
        order: Vec<(String, f64)>,
        bound: BTreeMap<String, ParamBinding>,
    },
    NoTool {
        best: f64,
    },
}

fn observed(r: Result<DiscoveryResult, DiscoverError>) -> Result<Expected, String> {
    match r {
        Ok(d) => {
            let mut order = vec![(d.selected.clone(), d.score)];
            order.extend(d.alternatives.iter().map(|a| (a.tool_id.clone(), a.score)));
            Ok(Expected::Found {
                order,
                bound: d.bound_params,
            })
        }
        Err(DiscoverError::NoToolFound { best_score, .. }) => {
            Ok(Expected::NoTool { best: best_score })
        }
        Err(e) => Err(e.to_string()),
    }
}

fn silent_registry(tools: &[(ToolDescriptor, i64)]) -> (ToolRegistry, Arc<MockClock>) {
    let clock = Arc::new(MockClock::at_demo_epoch());
    let now = clock.now();
    let registry = ToolRegistry::new(
        RegistryConfig::default(),
        clock.clone(),
        None,
        Recorder::disabled(),
    );
    for (t, silence) in tools {
        clock.set(now - Duration::seconds(*silence));
        registry
            .register_tool(t, "broker-1")
            .expect("generated descriptor is valid");
    }
    clock.set(now);
    (registry, clock)
}

/// Discovery equals the reference argmax over random registries.
pub fn criterion_4(cases: u32) -> Outcome {
    let reference = Reference::new();
    let rt = runtime();
    let (found, none, ties, live) = (
        Cell::new(0u32),
        Cell::new(0u32),
        Cell::new(0u32),
        Cell::new(0u32),
    );
    let mut runner = TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let result = runner.run(&(registry(), query()), |(tools, q)| {
        let (registry, _clock) = silent_registry(&tools);
        let available: Vec<&ToolDescriptor> = tools
            .iter()
            .filter(|(_, s)| *s <= SUSPECT_AFTER_S)
            .map(|(t, _)| t)
            .collect();
        live.set(live.get() + available.len() as u32);
        let expected = reference.discover(&available, &q);
        let actual = rt.block_on(registry.discover(&q));
        let actual = observed(actual).map_err(TestCaseError::fail)?;
        match &expected {
            Expected::Found { order, .. } => {
                found.set(found.get() + 1);
                if order.len() > 1 && order[0].1 == order[1].1 {
                    ties.set(ties.get() + 1);
                }
            }
            Expected::NoTool { .. } => none.set(none.get() + 1),
        }
        prop_assert_eq!(actual, expected);
        Ok(())
    });
    ctx(result, "discovery differs from the reference")?;
    Ok(format!(
        "{cases} registries ({} live tools): {} selections equal the reference, {} of them tied on top score; {} NoToolFound",
        live.get(),
        found.get(),
        ties.get(),
        none.get()
    ))
}

#[derive(Debug)]
pub struct AlwaysUp;

#[async_trait]
impl HealthProbe for AlwaysUp {
    async fn probe(&self, _url: &str) -> bool {
        true
    }
}

pub fn weather_tool(id: &str) -> ToolDescriptor {
    ToolDescriptor {
        tool_id: id.to_string(),
        name: id.to_string(),
        description: "weather forecast for a city".into(),
        tags: vec!["weather".into()],
        endpoint: format!("http://tools.test/{id}"),
        params: Vec::new(),
        output_schema: Vec::new(),
        broker_id: String::new(),
        state: ToolState::Available,
        last_heartbeat_at: None,
        registered_at: None,
        version: 0,
    }
}

pub fn weather_query() -> DiscoveryQuery {
    DiscoveryQuery {
        step_description: "weather forecast".into(),
        context_keys: Vec::new(),
        required_outputs: Vec::new(),
    }
}

/// Suspect strictly within (20, 30] seconds of silence, unavailable after.
pub async fn liveness_windows() -> Outcome {
    let clock = Arc::new(MockClock::at_demo_epoch());
    let t0 = clock.now();
    let registry = ToolRegistry::new(
        RegistryConfig::default(),
        clock.clone(),
        None,
        Recorder::disabled(),
    );
    ctx(registry.register_tool(&weather_tool("w"), "b"), "register")?;
    let checkpoints = [
        (10_000, ToolState::Available),
        (20_000, ToolState::Available),
        (20_001, ToolState::Suspect),
        (25_000, ToolState::Suspect),
        (30_000, ToolState::Suspect),
        (30_001, ToolState::Unavailable),
    ];
    for (ms, want) in checkpoints {
        clock.set(t0 + Duration::milliseconds(ms));
        let found = registry.discover(&weather_query()).await;
        let state = registry.get("w").map(|t| t.state);
        ensure(state == Some(want), || {
            format!("at {ms} ms silent: state {state:?}, expected {want:?}")
        })?;
        ensure(found.is_ok() == (want == ToolState::Available), || {
            format!("at {ms} ms silent: discovery returned {found:?} for a {want:?} tool")
        })?;
    }
    Ok("available at 20.000 s, suspect at 20.001 s and 30.000 s, unavailable at 30.001 s".into())
}

/// An evicted tool is back in discovery within two broker cycles.
pub async fn eviction_recovery() -> Outcome {
    let clock = Arc::new(MockClock::at_demo_epoch());
    let registry = Arc::new(ToolRegistry::new(
        RegistryConfig::default(),
        clock.clone(),
        None,
        Recorder::disabled(),
    ));
    let broker = ctx(
        ToolBroker::open(
            BrokerConfig::default(),
            MemoryKv::shared(),
            registry.clone(),
            Arc::new(AlwaysUp),
            clock.clone(),
            Recorder::disabled(),
        ),
        "broker",
    )?;
    let desc = weather_tool("w");
    ctx(
        broker
            .add_service(desc.clone(), "http://tools.test/w/health")
            .await,
        "add service",
    )?;
    ctx(broker.register_managed("w").await, "register")?;
    clock.advance_secs(31);
    registry.sweep_stale(clock.now());
    let evicted = registry.get("w").map(|t| t.state);
    ensure(evicted == Some(ToolState::Unavailable), || {
        format!("not evicted: {evicted:?}")
    })?;
    for cycle in 1..=2 {
        broker.heartbeat_cycle(clock.now()).await;
        if registry.discover(&weather_query()).await.is_ok() {
            return Ok(format!(
                "evicted tool discoverable again after {cycle} broker cycle(s)"
            ));
        }
    }
    Err("evicted tool not back after 2 broker cycles".into())
}

#[derive(Debug, Clone)]
enum Op {
    Advance(i64),
    Heartbeat { beats: u8, rejoin: u8 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0i64..40).prop_map(Op::Advance),
        (any::<u8>(), any::<u8>()).prop_map(|(beats, rejoin)| Op::Heartbeat { beats, rejoin }),
    ]
}

/// Random heartbeats and clock jumps never expose a tool that is not available.
pub fn never_returns_unavailable(cases: u32) -> Outcome {
    const TOOLS: usize = 4;
    let rt = runtime();
    let discoveries = Cell::new(0u32);
    let mut runner = TestRunner::new(RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let result = runner.run(&prop::collection::vec(op(), 1..40), |ops| {
        let clock = Arc::new(MockClock::at_demo_epoch());
        let registry = ToolRegistry::new(
            RegistryConfig::default(),
            clock.clone(),
            None,
            Recorder::disabled(),
        );
        let ids: Vec<String> = (0..TOOLS).map(|i| format!("w{i}")).collect();
        for id in &ids {
            registry.register_tool(&weather_tool(id), "b").unwrap();
        }
        for op in ops {
            match op {
                Op::Advance(s) => clock.advance_secs(s),
                Op::Heartbeat { beats, rejoin } => {
                    let chosen: Vec<String> = ids
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| beats & (1 << i) != 0)
                        .map(|(_, id)| id.clone())
                        .collect();
                    let ack = registry
                        .heartbeat(&HeartbeatRequest {
                            broker_id: "b".into(),
                            tool_ids: chosen,
                            ts: clock.now(),
                        })
                        .unwrap();
                    for id in ack.reregister {
                        let i: usize = id[1..].parse().unwrap();
                        if rejoin & (1 << i) != 0 {
                            registry.register_tool(&weather_tool(&id), "b").unwrap();
                        }
                    }
                }
            }
            let now = clock.now();
            if let Ok(found) = rt.block_on(registry.discover(&weather_query())) {
                discoveries.set(discoveries.get() + 1);
                let returned = std::iter::once(found.selected.clone())
                    .chain(found.alternatives.iter().map(|a| a.tool_id.clone()));
                for id in returned {
                    let t = registry.get(&id).expect("returned tool exists");
                    prop_assert_eq!(
                        t.state,
                        ToolState::Available,
                        "{} returned while {:?}",
                        id,
                        t.state
                    );
                    let silent = now - t.last_heartbeat_at.unwrap();
                    prop_assert!(
                        silent <= Duration::seconds(SUSPECT_AFTER_S),
                        "{} silent for {}",
                        id,
                        silent
                    );
                }
            }
        }
        Ok(())
    });
    ctx(result, "discovery returned a non-available tool")?;
    Ok(format!(
        "{cases} random histories, {} discoveries returned only available tools",
        discoveries.get()
    ))
}

pub async fn criterion_5() -> Outcome {
    let windows = liveness_windows().await?;
    let recovery = eviction_recovery().await?;
    let never = tokio::task::spawn_blocking(|| never_returns_unavailable(300))
        .await
        .map_err(|e| e.to_string())??;
    Ok(format!("{windows}; {recovery}; {never}"))
}
