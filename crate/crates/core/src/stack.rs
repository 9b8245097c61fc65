//! Assembles the capabilities into a running stack, either wired directly in
//! one process or served over HTTP with every peer reached through a client.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::broker::{BrokerError, ToolBroker};
use crate::clock::{SharedClock, SystemClock};
use crate::config::{Config, ConfigError, SERVICE_NAMES};
use crate::events::Recorder;
use crate::http::client::{
    CallError, Endpoint, HttpTools, MethodologyClient, PlanningClient, ProfileClient,
    ReceptionClient, RegistryClient, WorkflowClient,
};
use crate::http::{segment, server};
use crate::kv::{FileKv, KvError, MemoryKv, SharedKv};
use crate::methodology::{Methodology, MethodologyError, MethodologyStore};
use crate::planning::Planner;
use crate::ports::{HealthProbe, MethodologyPort, RegistryPort, ResultSink, ToolInvoker};
use crate::profile::{ProfileError, ProfileStore};
use crate::reasoner::{build_reasoner, Reasoner, ReasonerError};
use crate::reception::Reception;
use crate::registry::{ToolDescriptor, ToolRegistry};
use crate::services::{resolve_endpoint, DemoData, FixtureError, ToolHost};
use crate::task::TaskResult;
use crate::workflow::{WorkflowDeps, WorkflowEngine, WorkflowError};

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage: {0}")]
    Storage(#[from] KvError),
    #[error("reasoner: {0}")]
    Reasoner(#[from] ReasonerError),
    #[error("fixtures: {0}")]
    Fixtures(#[from] FixtureError),
    #[error("cannot bind {service} on {addr}: {source}")]
    Bind {
        service: String,
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("services not healthy within {timeout_ms} ms: {}", .unhealthy.join(", "))]
    BootTimeout {
        timeout_ms: u64,
        unhealthy: Vec<String>,
    },
    #[error("startup failed: {0}")]
    Startup(String),
}

impl From<MethodologyError> for StackError {
    fn from(e: MethodologyError) -> Self {
        StackError::Startup(e.to_string())
    }
}

impl From<ProfileError> for StackError {
    fn from(e: ProfileError) -> Self {
        StackError::Startup(e.to_string())
    }
}

impl From<BrokerError> for StackError {
    fn from(e: BrokerError) -> Self {
        StackError::Startup(e.to_string())
    }
}

impl From<WorkflowError> for StackError {
    fn from(e: WorkflowError) -> Self {
        StackError::Startup(e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("SeedValidationError: {0}")]
    Validation(String),
    #[error("seeding `{item}` failed: {message}")]
    Rejected { item: String, message: String },
}

/// One profile record of a seed file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSeed {
    pub namespace: String,
    pub key: String,
    pub value: Value,
}

/// Contents of a seed directory: `methodologies/*.json`, `profiles.jsonl`
/// and `tools/*.json`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedBundle {
    pub methodologies: Vec<Methodology>,
    pub profiles: Vec<ProfileSeed>,
    pub tools: Vec<ToolDescriptor>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCounts {
    pub methodologies: usize,
    pub profile_entries: usize,
    pub tool_services: usize,
}

fn invalid(what: impl std::fmt::Display, e: impl std::fmt::Display) -> SeedError {
    SeedError::Validation(format!("{what}: {e}"))
}

fn parse_profiles(name: &str, text: &str) -> Result<Vec<ProfileSeed>, SeedError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| invalid(format!("{name} line {}", i + 1), e))
        })
        .collect()
}

fn json_files(dir: &Path) -> Result<Vec<std::path::PathBuf>, SeedError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| invalid(dir.display(), e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SeedError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| invalid(path.display(), e))
}

impl SeedBundle {
    pub fn from_dir(dir: &Path) -> Result<Self, SeedError> {
        if !dir.is_dir() {
            return Err(SeedError::Validation(format!(
                "seed directory {} does not exist",
                dir.display()
            )));
        }
        let mut bundle = SeedBundle::default();
        for path in json_files(&dir.join("methodologies"))? {
            bundle.methodologies.push(read_json(&path)?);
        }
        let profiles = dir.join("profiles.jsonl");
        if profiles.is_file() {
            let text =
                std::fs::read_to_string(&profiles).map_err(|e| invalid(profiles.display(), e))?;
            bundle.profiles = parse_profiles("profiles.jsonl", &text)?;
        }
        for path in json_files(&dir.join("tools"))? {
            bundle.tools.push(read_json(&path)?);
        }
        bundle.check()?;
        Ok(bundle)
    }

    /// The demo seeds shipped with the crate.
    pub fn demo() -> Self {
        fn parse<T: serde::de::DeserializeOwned>(name: &str, text: &str) -> T {
            serde_json::from_str(text)
                .unwrap_or_else(|e| panic!("shipped seed {name} is invalid: {e}"))
        }
        let bundle = SeedBundle {
            methodologies: vec![parse(
                "travel.json",
                include_str!("../fixtures/demo/methodologies/travel.json"),
            )],
            profiles: parse_profiles(
                "profiles.jsonl",
                include_str!("../fixtures/demo/profiles.jsonl"),
            )
            .expect("shipped profiles are valid"),
            tools: vec![
                parse(
                    "attraction-lookup.json",
                    include_str!("../fixtures/demo/tools/attraction-lookup.json"),
                ),
                parse(
                    "nearby-city-finder.json",
                    include_str!("../fixtures/demo/tools/nearby-city-finder.json"),
                ),
            ],
        };
        bundle.check().expect("shipped seeds validate");
        bundle
    }

    fn check(&self) -> Result<(), SeedError> {
        for m in &self.methodologies {
            let problems = m.violations();
            if !problems.is_empty() {
                return Err(invalid(
                    format!("methodology `{}`", m.methodology_id),
                    problems.join("; "),
                ));
            }
        }
        for t in &self.tools {
            // Relative endpoints are resolved at seed time; check a resolved copy.
            let mut probe = t.clone();
            resolve_endpoint(&mut probe, "http://127.0.0.1");
            let problems = probe.violations();
            if !problems.is_empty() {
                return Err(invalid(
                    format!("tool `{}`", t.tool_id),
                    problems.join("; "),
                ));
            }
        }
        if let Some(p) = self
            .profiles
            .iter()
            .find(|p| p.key.is_empty() || p.namespace.is_empty())
        {
            return Err(invalid(
                "profiles.jsonl",
                format!("empty namespace or key in {p:?}"),
            ));
        }
        Ok(())
    }
}

/// Per-boot overrides, mostly for tests.
#[derive(Debug, Clone, Default)]
pub struct StackOptions {
    pub clock: Option<SharedClock>,
    pub reasoner: Option<Arc<dyn Reasoner>>,
    /// Durable store shared with an earlier stack, to model a restart.
    pub kv: Option<SharedKv>,
    /// Tool services that outlive the stack.
    pub tools: Option<Arc<ToolHost>>,
    pub events: Option<Recorder>,
}

/// Listener tasks and peer URLs of a served stack.
#[derive(Debug)]
struct Served {
    urls: BTreeMap<&'static str, String>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

#[derive(Debug)]
pub struct Stack {
    pub config: Config,
    pub clock: SharedClock,
    pub events: Recorder,
    pub kv: SharedKv,
    pub reasoner: Arc<dyn Reasoner>,
    pub profiles: Arc<ProfileStore>,
    pub methodologies: Arc<MethodologyStore>,
    pub registry: Arc<ToolRegistry>,
    pub planner: Arc<Planner>,
    pub tools: Arc<ToolHost>,
    pub broker: Arc<ToolBroker>,
    pub workflow: Arc<WorkflowEngine>,
    pub reception: Arc<Reception>,
    served: Option<Served>,
}

/// Ports the workflow, planner, broker and reception use to reach their peers.
struct Wiring {
    methodologies: Arc<dyn MethodologyPort>,
    planner_methodologies: Arc<dyn MethodologyPort>,
    planner_port: Option<Arc<dyn crate::ports::PlanningPort>>,
    profiles: Option<Arc<dyn crate::ports::ProfilePort>>,
    discovery: Option<Arc<dyn crate::ports::DiscoveryPort>>,
    registry: Option<Arc<dyn RegistryPort>>,
    invoker: Arc<dyn ToolInvoker>,
    probe: Arc<dyn HealthProbe>,
}

fn open_kv(config: &Config, opts: &StackOptions) -> Result<SharedKv, StackError> {
    Ok(match (&opts.kv, &config.data_dir) {
        (Some(kv), _) => Arc::clone(kv),
        (None, Some(dir)) => Arc::new(FileKv::open(dir)?),
        (None, None) => MemoryKv::shared(),
    })
}

fn demo_data(config: &Config) -> Result<Arc<DemoData>, StackError> {
    Ok(Arc::new(match &config.tools.data_dir {
        Some(dir) => DemoData::from_dir(dir)?,
        None => DemoData::shipped(),
    }))
}

impl Stack {
    /// All capabilities in this process, calling each other directly.
    pub fn in_process(config: Config, opts: StackOptions) -> Result<Stack, StackError> {
        let tools_base = format!("http://{}:{}", config.services.host, config.services.tools);
        let tools = match &opts.tools {
            Some(t) => Arc::clone(t),
            None => Arc::new(ToolHost::demo(&tools_base, demo_data(&config)?)),
        };
        Self::assemble(config, opts, tools, |core| Wiring {
            methodologies: core.methodologies.clone(),
            planner_methodologies: core.methodologies.clone(),
            planner_port: None,
            profiles: None,
            discovery: None,
            registry: None,
            invoker: core.tools.clone(),
            probe: core.tools.clone(),
        })
    }

    fn assemble(
        config: Config,
        opts: StackOptions,
        tools: Arc<ToolHost>,
        wire: impl FnOnce(&Core) -> Wiring,
    ) -> Result<Stack, StackError> {
        let clock: SharedClock = opts.clock.clone().unwrap_or_else(|| Arc::new(SystemClock));
        let events = opts.events.clone().unwrap_or_else(Recorder::enabled);
        let kv = open_kv(&config, &opts)?;
        let reasoner = match &opts.reasoner {
            Some(r) => Arc::clone(r),
            None => build_reasoner(&config.reasoner)?,
        };
        let profiles = Arc::new(ProfileStore::open(
            Arc::clone(&kv),
            Arc::clone(&clock),
            events.clone(),
        )?);
        let methodologies = Arc::new(MethodologyStore::open(
            Arc::clone(&kv),
            Arc::clone(&clock),
            config.methodology.clone(),
            events.clone(),
        )?);
        let registry = Arc::new(ToolRegistry::new(
            config.registry.clone(),
            Arc::clone(&clock),
            Some(Arc::clone(&reasoner)),
            events.clone(),
        ));
        let core = Core {
            methodologies: methodologies.clone(),
            tools: tools.clone(),
        };
        let w = wire(&core);
        let planner = Arc::new(Planner::new(
            w.planner_methodologies,
            Arc::clone(&reasoner),
            config.reasoner.budget,
            events.clone(),
        ));
        let broker = Arc::new(ToolBroker::open(
            config.broker.clone(),
            Arc::clone(&kv),
            w.registry.unwrap_or_else(|| registry.clone()),
            w.probe,
            Arc::clone(&clock),
            events.clone(),
        )?);
        let workflow = WorkflowEngine::open(
            config.workflow.clone(),
            WorkflowDeps {
                methodologies: w.methodologies.clone(),
                planner: w.planner_port.unwrap_or_else(|| planner.clone()),
                profiles: w.profiles.unwrap_or_else(|| profiles.clone()),
                discovery: w.discovery.unwrap_or_else(|| registry.clone()),
                invoker: w.invoker,
            },
            Arc::clone(&kv),
            Arc::clone(&clock),
            events.clone(),
        )?;
        let reception_reasoner = config.reception.use_reasoner.then(|| Arc::clone(&reasoner));
        let reception = Arc::new(Reception::new(
            config.reception.clone(),
            w.methodologies,
            reception_reasoner,
            Arc::clone(&clock),
            events.clone(),
        ));
        workflow.connect_sink(reception.clone());
        reception.connect_workflow(workflow.clone());
        Ok(Stack {
            config,
            clock,
            events,
            kv,
            reasoner,
            profiles,
            methodologies,
            registry,
            planner,
            tools,
            broker,
            workflow,
            reception,
            served: None,
        })
    }

    /// Serves every capability on its configured port; peers talk HTTP.
    /// Returns once all seven services answer their health checks.
    pub async fn serve(config: Config, opts: StackOptions) -> Result<Stack, StackError> {
        let mut listeners = BTreeMap::new();
        let mut urls = BTreeMap::new();
        for name in SERVICE_NAMES.iter().copied().chain(["tools"]) {
            let addr = config.services.addr(name)?;
            let listener = TcpListener::bind(addr)
                .await
                .map_err(|source| StackError::Bind {
                    service: name.to_string(),
                    addr: addr.to_string(),
                    source,
                })?;
            let local = listener
                .local_addr()
                .map_err(|e| StackError::Startup(e.to_string()))?;
            urls.insert(name, format!("http://{local}"));
            listeners.insert(name, listener);
        }
        let client = reqwest::Client::new();
        let ep = |name: &str| Endpoint::new(&urls[name], client.clone());
        let tools = match &opts.tools {
            Some(t) => Arc::clone(t),
            None => Arc::new(ToolHost::demo(&urls["tools"], demo_data(&config)?)),
        };
        let http_tools = Arc::new(HttpTools::new(client.clone()));
        let methodology_client = Arc::new(MethodologyClient(ep("methodology")));
        let mut stack = Self::assemble(config, opts, tools, |_| Wiring {
            methodologies: methodology_client.clone(),
            planner_methodologies: methodology_client.clone(),
            planner_port: Some(Arc::new(PlanningClient(ep("planning")))),
            profiles: Some(Arc::new(ProfileClient(ep("profile")))),
            discovery: Some(Arc::new(RegistryClient(ep("registry")))),
            registry: Some(Arc::new(RegistryClient(ep("registry")))),
            invoker: http_tools.clone(),
            probe: http_tools.clone(),
        })?;
        let sink: Arc<dyn ResultSink> = Arc::new(ReceptionClient(ep("reception")));
        stack.workflow.connect_sink(sink);
        stack
            .reception
            .connect_workflow(Arc::new(WorkflowClient(ep("workflow"))));

        let (shutdown, rx) = watch::channel(false);
        let mut tasks = Vec::new();
        for (name, listener) in listeners {
            let router = match name {
                "reception" => server::reception(stack.reception.clone()),
                "workflow" => server::workflow(stack.workflow.clone()),
                "planning" => server::planning(stack.planner.clone()),
                "methodology" => server::methodology(stack.methodologies.clone()),
                "registry" => server::registry(stack.registry.clone()),
                "broker" => server::broker(stack.broker.clone()),
                "profile" => server::profile(stack.profiles.clone()),
                _ => server::tools(stack.tools.clone()),
            };
            let mut rx = rx.clone();
            tasks.push(tokio::spawn(async move {
                let stop = async move {
                    let _ = rx.wait_for(|s| *s).await;
                };
                if let Err(e) = axum::serve(listener, router)
                    .with_graceful_shutdown(stop)
                    .await
                {
                    tracing::error!(service = name, error = %e, "listener stopped");
                }
            }));
        }
        stack.served = Some(Served {
            urls,
            shutdown,
            tasks,
        });

        let timeout_ms = stack.config.services.boot_timeout_ms;
        let deadline = tokio::time::Instant::now() + Duration::from_millis(timeout_ms);
        loop {
            let unhealthy: Vec<String> = stack
                .health()
                .await
                .into_iter()
                .filter(|(_, ok)| !ok)
                .map(|(n, _)| n.to_string())
                .collect();
            if unhealthy.is_empty() {
                break;
            }
            if tokio::time::Instant::now() >= deadline {
                stack.shutdown().await;
                return Err(StackError::BootTimeout {
                    timeout_ms,
                    unhealthy,
                });
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        stack.spawn_background(rx);
        Ok(stack)
    }

    /// Broker heartbeats, the registry sweeper and resumption of unfinished instances.
    fn spawn_background(&mut self, rx: watch::Receiver<bool>) {
        let Some(served) = self.served.as_mut() else {
            return;
        };
        served
            .tasks
            .push(tokio::spawn(Arc::clone(&self.broker).run(rx.clone())));
        let registry = Arc::clone(&self.registry);
        let clock = Arc::clone(&self.clock);
        let period = Duration::from_secs(self.config.registry.heartbeat_interval_s.max(1) as u64);
        let mut stop = rx;
        served.tasks.push(tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tokio::select! {
                    _ = tick.tick() => { registry.sweep_stale(clock.now()); }
                    _ = stop.wait_for(|s| *s) => break,
                }
            }
        }));
        let workflow = Arc::clone(&self.workflow);
        served.tasks.push(tokio::spawn(async move {
            for (id, outcome) in workflow.resume_all().await {
                if let Err(e) = outcome {
                    tracing::warn!(instance = %id, error = %e, "resume failed");
                }
            }
        }));
    }

    /// Base URL of a served capability.
    pub fn url(&self, service: &str) -> Option<&str> {
        self.served.as_ref()?.urls.get(service).map(String::as_str)
    }

    /// Health of the seven services; in-process stacks are always healthy.
    pub async fn health(&self) -> Vec<(&'static str, bool)> {
        let Some(served) = &self.served else {
            return SERVICE_NAMES.iter().map(|n| (*n, true)).collect();
        };
        let client = reqwest::Client::new();
        let mut out = Vec::new();
        for name in SERVICE_NAMES {
            let url = format!("{}/health", served.urls[name]);
            let ok = matches!(
                client.get(&url).timeout(Duration::from_secs(2)).send().await,
                Ok(r) if r.status().is_success()
            );
            out.push((name, ok));
        }
        out
    }

    /// Base URL the demo tool services are reachable under.
    pub fn tools_base(&self) -> String {
        self.tools.base_url().to_string()
    }

    /// Loads seeds straight into the capabilities. Methodologies already
    /// present are left alone.
    pub async fn seed(&self, bundle: &SeedBundle) -> Result<SeedCounts, SeedError> {
        let mut counts = SeedCounts::default();
        for m in &bundle.methodologies {
            if self.methodologies.get(&m.methodology_id).is_none() {
                self.methodologies
                    .upsert_methodology(m.clone(), "seed")
                    .map_err(|e| rejected(&m.methodology_id, e))?;
            }
            counts.methodologies += 1;
        }
        for p in &bundle.profiles {
            self.profiles
                .put(&p.namespace, &p.key, p.value.clone())
                .map_err(|e| rejected(&p.key, e))?;
            counts.profile_entries += 1;
        }
        for t in &bundle.tools {
            let mut desc = t.clone();
            resolve_endpoint(&mut desc, &self.tools_base());
            let probe = format!("{}/health", desc.endpoint);
            if self.broker.get(&desc.tool_id).is_none() {
                self.broker
                    .add_service(desc, &probe)
                    .await
                    .map_err(|e| rejected(&t.tool_id, e))?;
            }
            self.broker
                .register_managed(&t.tool_id)
                .await
                .map_err(|e| rejected(&t.tool_id, e))?;
            counts.tool_services += 1;
        }
        Ok(counts)
    }

    pub async fn submit(
        &self,
        user_id: &str,
        text: &str,
    ) -> Result<String, crate::reception::ReceptionError> {
        self.reception.submit_request(user_id, text).await
    }

    pub async fn wait_result(&self, task_id: &str, timeout: Duration) -> Option<TaskResult> {
        self.reception
            .wait_result(task_id, timeout)
            .await
            .ok()
            .flatten()
    }

    /// Stops listeners and background loops.
    pub async fn shutdown(&mut self) {
        if let Some(served) = self.served.take() {
            let _ = served.shutdown.send(true);
            for t in served.tasks {
                t.abort();
                let _ = t.await;
            }
        }
    }
}

/// Capabilities the wiring closure may hand out before the rest exists.
struct Core {
    methodologies: Arc<MethodologyStore>,
    tools: Arc<ToolHost>,
}

fn rejected(item: &str, e: impl std::fmt::Display) -> SeedError {
    SeedError::Rejected {
        item: item.to_string(),
        message: e.to_string(),
    }
}

/// Seeds a running stack through its HTTP interfaces. `tools_base` resolves
/// relative tool endpoints.
pub async fn seed_remote(
    urls: &BTreeMap<String, String>,
    tools_base: &str,
    bundle: &SeedBundle,
) -> Result<SeedCounts, SeedError> {
    let client = reqwest::Client::new();
    let ep = |name: &str| {
        urls.get(name)
            .map(|u| Endpoint::new(u, client.clone()))
            .ok_or_else(|| SeedError::Validation(format!("no URL for the {name} service")))
    };
    let (methodology, profile, broker) = (ep("methodology")?, ep("profile")?, ep("broker")?);
    let remote = |item: &str, e: CallError| rejected(item, e);
    let mut counts = SeedCounts::default();
    for m in &bundle.methodologies {
        let path = format!("/methodologies/{}", segment(&m.methodology_id));
        match methodology.get::<Value>(&path).await {
            Ok(_) => {}
            Err(CallError::Status(reqwest::StatusCode::NOT_FOUND, _)) => {
                methodology
                    .post::<_, Value>("/methodologies?expert_id=seed", m)
                    .await
                    .map_err(|e| remote(&m.methodology_id, e))?;
            }
            Err(e) => return Err(remote(&m.methodology_id, e)),
        }
        counts.methodologies += 1;
    }
    for p in &bundle.profiles {
        let path = format!("/profiles/{}/{}", segment(&p.namespace), segment(&p.key));
        profile
            .put::<_, Value>(&path, &p.value)
            .await
            .map_err(|e| remote(&p.key, e))?;
        counts.profile_entries += 1;
    }
    let managed: Vec<Value> = broker
        .get("/services")
        .await
        .map_err(|e| remote("services", e))?;
    for t in &bundle.tools {
        let mut desc = t.clone();
        resolve_endpoint(&mut desc, tools_base);
        let known = managed
            .iter()
            .any(|m| m.pointer("/descriptor/tool_id").and_then(Value::as_str) == Some(&t.tool_id));
        if !known {
            broker
                .post::<_, Value>("/services", &json!({ "descriptor": desc }))
                .await
                .map_err(|e| remote(&t.tool_id, e))?;
        }
        broker
            .post::<_, Value>(
                &format!("/services/{}/register", segment(&t.tool_id)),
                &json!({}),
            )
            .await
            .map_err(|e| remote(&t.tool_id, e))?;
        counts.tool_services += 1;
    }
    Ok(counts)
}

/// URLs of a stack booted from `config`.
pub fn configured_urls(config: &Config) -> BTreeMap<String, String> {
    SERVICE_NAMES
        .iter()
        .copied()
        .chain(["tools"])
        .filter_map(|n| {
            Some((
                n.to_string(),
                format!(
                    "http://{}:{}",
                    config.services.host,
                    config.services.port(n)?
                ),
            ))
        })
        .collect()
}
