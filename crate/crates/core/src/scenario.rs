//! Replays the three demo scenarios against a stack and renders each as a
//! transcript that can be compared with a golden file.
//!
//! Scenario 1 answers the travel query with the seeded methodology. Scenario 2
//! inserts the weather step and resubmits, which halts with `needs_tool`.
//! Scenario 3 registers the weather tool and resubmits once more. Each
//! scenario builds on the state the previous one left behind.

use std::sync::Arc;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, MockClock};
use crate::config::Config;
use crate::events::Event;
use crate::methodology::ProcessStep;
use crate::reasoner::{Reasoner, RecordingReasoner, Script};
use crate::registry::ToolDescriptor;
use crate::services::resolve_endpoint;
use crate::stack::{SeedBundle, Stack, StackOptions};
use crate::task::TaskResult;
use crate::workflow::WorkflowInstance;

pub const DEMO_USER: &str = "u1";
pub const TRAVEL_QUERY: &str =
    "I want to go to a nearby city with my family this vacation, can you help me find some suitable cities?";
pub const TRAVEL_METHODOLOGY: &str = "travel-nearby";
pub const WEATHER_EXPERT: &str = "expert-1";

/// Budget for one scenario to reach a terminal result.
pub const RESULT_TIMEOUT: Duration = Duration::from_secs(10);

const WEATHER_STEP: &str = include_str!("../fixtures/scenarios/weather-step.json");
const WEATHER_TOOL: &str = include_str!("../fixtures/scenarios/weather-tool.json");

const GOLDEN: [&str; 3] = [
    include_str!("../fixtures/golden/scenario1.json"),
    include_str!("../fixtures/golden/scenario2.json"),
    include_str!("../fixtures/golden/scenario3.json"),
];

/// The shipped golden transcript of scenario `n`.
pub fn shipped_golden(n: u8) -> Option<&'static str> {
    GOLDEN.get(usize::from(n).checked_sub(1)?).copied()
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0}; expected 1, 2 or 3")]
    Unknown(u8),
    #[error("scenario {requested} cannot run after scenario {done} on the same stack")]
    OutOfOrder { requested: u8, done: u8 },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("no result within {}s for task {task_id}", RESULT_TIMEOUT.as_secs())]
    Timeout { task_id: String },
    #[error("ScenarioFailed: transcript diverges from golden at line {line}\n  expected: {expected}\n  actual:   {actual}")]
    Diverged {
        line: usize,
        expected: String,
        actual: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub actor: String,
    pub action: String,
    pub summary: String,
    #[serde(default)]
    pub refs: Vec<String>,
}

impl From<Event> for TranscriptEvent {
    fn from(e: Event) -> Self {
        Self {
            actor: e.actor,
            action: e.action,
            summary: e.summary,
            refs: e.refs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTranscript {
    pub scenario: u8,
    pub events: Vec<TranscriptEvent>,
    #[serde(rename = "final")]
    pub final_result: TaskResult,
}

impl ScenarioTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcripts serialize") + "\n"
    }

    pub fn normalized(&self) -> String {
        normalize(&self.to_json())
    }
}

/// Everything one scenario run produced.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub transcript: ScenarioTranscript,
    pub instance: WorkflowInstance,
    pub elapsed: Duration,
}

fn uuid_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}")
            .unwrap()
    })
}

fn timestamp_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})").unwrap()
    })
}

/// Replaces uuids with `<id:N>`, numbered by first appearance, and RFC 3339
/// timestamps with `<ts>`.
pub fn normalize(text: &str) -> String {
    let mut seen: Vec<String> = Vec::new();
    let ids = uuid_re().replace_all(text, |c: &regex::Captures| {
        let id = c[0].to_ascii_lowercase();
        let n = match seen.iter().position(|s| *s == id) {
            Some(i) => i + 1,
            None => {
                seen.push(id);
                seen.len()
            }
        };
        format!("<id:{n}>")
    });
    timestamp_re().replace_all(&ids, "<ts>").into_owned()
}

/// First differing line between two normalized transcripts.
pub fn compare(actual: &str, golden: &str) -> Result<(), ScenarioError> {
    let (a, g): (Vec<&str>, Vec<&str>) = (actual.lines().collect(), golden.lines().collect());
    for i in 0..a.len().max(g.len()) {
        let (x, y) = (a.get(i).copied(), g.get(i).copied());
        if x != y {
            return Err(ScenarioError::Diverged {
                line: i + 1,
                expected: y.unwrap_or("<end of golden>").to_string(),
                actual: x.unwrap_or("<end of transcript>").to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct StepInsert {
    position: usize,
    step: ProcessStep,
}

/// A seeded stack plus the scenarios it has already been through.
#[derive(Debug)]
pub struct Harness {
    pub stack: Stack,
    pub clock: MockClock,
    done: u8,
}

impl Harness {
    /// In-process stack on a mock clock, seeded with the demo fixtures.
    pub async fn demo(config: Config, opts: StackOptions) -> Result<Harness, ScenarioError> {
        let clock = MockClock::at_demo_epoch();
        let opts = StackOptions {
            clock: Some(Arc::new(clock.clone())),
            ..opts
        };
        let stack =
            Stack::in_process(config, opts).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        Self::seeded(stack, clock).await
    }

    /// Seeds the demo fixtures into `stack`, whose clock must be `clock`.
    pub async fn seeded(stack: Stack, clock: MockClock) -> Result<Harness, ScenarioError> {
        stack
            .seed(&SeedBundle::demo())
            .await
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        stack.events.drain();
        Ok(Harness {
            stack,
            clock,
            done: 0,
        })
    }

    pub fn completed(&self) -> u8 {
        self.done
    }

    /// Runs scenario `n`, first running silently any earlier scenario it builds on.
    pub async fn run(&mut self, n: u8) -> Result<ScenarioRun, ScenarioError> {
        if !(1..=3).contains(&n) {
            return Err(ScenarioError::Unknown(n));
        }
        if n <= self.done {
            return Err(ScenarioError::OutOfOrder {
                requested: n,
                done: self.done,
            });
        }
        while self.done + 1 < n {
            let k = self.done + 1;
            self.run_one(k).await?;
        }
        self.run_one(n).await
    }

    async fn run_one(&mut self, n: u8) -> Result<ScenarioRun, ScenarioError> {
        self.stack.events.drain();
        let started = Instant::now();
        match n {
            1 => {}
            2 => self.insert_weather_step()?,
            _ => self.register_weather_tool().await?,
        }
        let task_id = self
            .stack
            .submit(DEMO_USER, TRAVEL_QUERY)
            .await
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let result = self
            .stack
            .wait_result(&task_id, RESULT_TIMEOUT)
            .await
            .ok_or_else(|| ScenarioError::Timeout {
                task_id: task_id.clone(),
            })?;
        let instance = self.settled_instance(&task_id).await?;
        let elapsed = started.elapsed();
        self.done = n;
        Ok(ScenarioRun {
            transcript: ScenarioTranscript {
                scenario: n,
                events: self
                    .stack
                    .events
                    .drain()
                    .into_iter()
                    .map(Into::into)
                    .collect(),
                final_result: result,
            },
            instance,
            elapsed,
        })
    }

    /// Waits until the engine has marked the result as reported, so its last
    /// event is part of the transcript.
    async fn settled_instance(&self, task_id: &str) -> Result<WorkflowInstance, ScenarioError> {
        let deadline = Instant::now() + RESULT_TIMEOUT;
        loop {
            let inst = self
                .stack
                .reception
                .instance_of(task_id)
                .and_then(|id| self.stack.workflow.get_instance(&id));
            match inst {
                Some(i) if i.reported => return Ok(i),
                _ if Instant::now() >= deadline => {
                    return Err(ScenarioError::Timeout {
                        task_id: task_id.to_string(),
                    })
                }
                _ => tokio::time::sleep(Duration::from_millis(5)).await,
            }
        }
    }

    fn insert_weather_step(&self) -> Result<(), ScenarioError> {
        let edit: StepInsert =
            serde_json::from_str(WEATHER_STEP).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let current = self
            .stack
            .methodologies
            .get(TRAVEL_METHODOLOGY)
            .ok_or_else(|| {
                ScenarioError::Setup(format!("methodology `{TRAVEL_METHODOLOGY}` is not seeded"))
            })?;
        self.stack
            .methodologies
            .insert_step(
                TRAVEL_METHODOLOGY,
                edit.position,
                edit.step,
                WEATHER_EXPERT,
                Some(current.version),
            )
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        Ok(())
    }

    async fn register_weather_tool(&self) -> Result<(), ScenarioError> {
        let mut desc: ToolDescriptor =
            serde_json::from_str(WEATHER_TOOL).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        resolve_endpoint(&mut desc, &self.stack.tools_base());
        let probe = format!("{}/health", desc.endpoint);
        let broker = &self.stack.broker;
        let setup = |e: crate::broker::BrokerError| ScenarioError::Setup(e.to_string());
        broker
            .add_service(desc.clone(), &probe)
            .await
            .map_err(setup)?;
        broker
            .register_managed(&desc.tool_id)
            .await
            .map_err(setup)?;
        let report = broker.heartbeat_cycle(self.clock.now()).await;
        if let Some(e) = report.error {
            return Err(ScenarioError::Setup(format!("heartbeat failed: {e}")));
        }
        Ok(())
    }
}

/// Runs scenarios 1 to 3 in one stack under the rule backend, recording every
/// reasoner exchange. The result is the script the scripted backend replays.
pub async fn record_demo_script() -> Result<Script, ScenarioError> {
    let recorder = Arc::new(RecordingReasoner::default());
    let opts = StackOptions {
        reasoner: Some(recorder.clone() as Arc<dyn Reasoner>),
        ..StackOptions::default()
    };
    let mut harness = Harness::demo(Config::shipped(), opts).await?;
    harness.run(3).await?;
    let mut script = recorder.script();
    script
        .entries
        .sort_by(|a, b| (a.kind, &a.payload_hash).cmp(&(b.kind, &b.payload_hash)));
    Ok(script)
}
