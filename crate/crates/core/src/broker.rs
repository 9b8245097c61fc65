//! Tool broker: keeps a durable set of provider services, registers them with
//! the registry on request and keeps them alive with heartbeats.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::events::Recorder;
use crate::kv::{self, KvError, SharedKv};
use crate::ports::{HealthProbe, HeartbeatRequest, RegistryCallError, RegistryPort};
use crate::registry::ToolDescriptor;

const KV_NAMESPACE: &str = "broker";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagedService {
    pub descriptor: ToolDescriptor,
    pub health_probe: String,
    pub last_probe_ok: bool,
    pub registered: bool,
    /// Set when the registry asked for re-registration; cleared once done.
    #[serde(default)]
    pub reregister_pending: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerConfig {
    pub broker_id: String,
    pub heartbeat_interval_s: u64,
    /// Maximum deviation of a heartbeat delay, as a fraction of the interval.
    pub jitter: f64,
    pub probe_timeout_ms: u64,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub register_attempts: u32,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            broker_id: "broker-1".into(),
            heartbeat_interval_s: 10,
            jitter: 0.1,
            probe_timeout_ms: 2000,
            backoff_base_ms: 100,
            backoff_cap_ms: 2000,
            register_attempts: 5,
        }
    }
}

impl BrokerConfig {
    /// Delay before the next heartbeat: the interval shifted by a uniform
    /// jitter of at most `jitter * interval` (capped at 10%).
    pub fn next_delay(&self, rng: &mut impl Rng) -> Duration {
        let interval = Duration::from_secs(self.heartbeat_interval_s).as_secs_f64();
        let j = self.jitter.clamp(0.0, 0.1);
        let factor = if j == 0.0 {
            1.0
        } else {
            1.0 + rng.random_range(-j..=j)
        };
        Duration::from_secs_f64(interval * factor)
    }

    /// Wait before retry `attempt` (0-based): doubling from the base, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.backoff_cap_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BrokerError {
    #[error("invalid service: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("health probe for `{0}` failed")]
    ProbeUnhealthy(String),
    #[error("registry unreachable after {attempts} attempts: {last}")]
    RegistryUnreachable { attempts: u32, last: String },
    #[error("registry rejected `{tool_id}` ({code}): {message}")]
    Rejected {
        tool_id: String,
        code: String,
        message: String,
    },
    #[error("storage: {0}")]
    Storage(String),
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::Validation(_) => "ValidationError",
            BrokerError::UnknownService(_) => "UnknownService",
            BrokerError::ProbeUnhealthy(_) => "ProbeUnhealthy",
            BrokerError::RegistryUnreachable { .. } => "RegistryUnreachable",
            BrokerError::Rejected { .. } => "RegistryRejected",
            BrokerError::Storage(_) => "StorageError",
        }
    }
}

impl From<KvError> for BrokerError {
    fn from(e: KvError) -> Self {
        BrokerError::Storage(e.to_string())
    }
}

/// Outcome of one heartbeat cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleReport {
    pub reregistered: Vec<String>,
    /// Ids sent in the heartbeat; `None` when nothing was sent.
    pub sent: Option<Vec<String>>,
    pub flagged: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct ToolBroker {
    config: BrokerConfig,
    kv: SharedKv,
    registry: Arc<dyn RegistryPort>,
    probe: Arc<dyn HealthProbe>,
    clock: SharedClock,
    events: Recorder,
    managed: RwLock<BTreeMap<String, ManagedService>>,
    /// Serializes mutations of the managed set across awaits.
    ops: tokio::sync::Mutex<()>,
}

impl ToolBroker {
    pub fn open(
        config: BrokerConfig,
        kv: SharedKv,
        registry: Arc<dyn RegistryPort>,
        probe: Arc<dyn HealthProbe>,
        clock: SharedClock,
        events: Recorder,
    ) -> Result<Self, BrokerError> {
        let managed = kv::scan_json::<ManagedService>(kv.as_ref(), KV_NAMESPACE)?
            .into_iter()
            .map(|(_, m)| (m.descriptor.tool_id.clone(), m))
            .collect();
        Ok(Self {
            config,
            kv,
            registry,
            probe,
            clock,
            events,
            managed: RwLock::new(managed),
            ops: tokio::sync::Mutex::new(()),
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn broker_id(&self) -> &str {
        &self.config.broker_id
    }

    fn save(&self, m: &ManagedService) -> Result<(), BrokerError> {
        kv::put_json(self.kv.as_ref(), KV_NAMESPACE, &m.descriptor.tool_id, m)?;
        self.managed
            .write()
            .insert(m.descriptor.tool_id.clone(), m.clone());
        Ok(())
    }

    fn update(
        &self,
        tool_id: &str,
        f: impl FnOnce(&mut ManagedService),
    ) -> Result<ManagedService, BrokerError> {
        let mut m = self
            .get(tool_id)
            .ok_or_else(|| BrokerError::UnknownService(tool_id.to_string()))?;
        f(&mut m);
        self.save(&m)?;
        Ok(m)
    }

    pub fn get(&self, tool_id: &str) -> Option<ManagedService> {
        self.managed.read().get(tool_id).cloned()
    }

    pub fn list(&self) -> Vec<ManagedService> {
        self.managed.read().values().cloned().collect()
    }

    async fn probe(&self, url: &str) -> bool {
        let timeout = Duration::from_millis(self.config.probe_timeout_ms);
        tokio::time::timeout(timeout, self.probe.probe(url))
            .await
            .unwrap_or(false)
    }

    /// Stores a service locally. It is not registered until
    /// [`ToolBroker::register_managed`] is called.
    pub async fn add_service(
        &self,
        desc: ToolDescriptor,
        health_probe: &str,
    ) -> Result<ManagedService, BrokerError> {
        let _guard = self.ops.lock().await;
        let mut problems = desc.violations();
        if url::Url::parse(health_probe).is_err() {
            problems.push(format!("health probe `{health_probe}` is not a valid URL"));
        }
        if self.managed.read().contains_key(&desc.tool_id) {
            problems.push(format!("tool_id `{}` is already managed", desc.tool_id));
        }
        if !problems.is_empty() {
            return Err(BrokerError::Validation(problems));
        }
        let ok = self.probe(health_probe).await;
        let m = ManagedService {
            descriptor: desc,
            health_probe: health_probe.to_string(),
            last_probe_ok: ok,
            registered: false,
            reregister_pending: false,
        };
        self.save(&m)?;
        self.events.record(
            "broker",
            "add_service",
            format!(
                "{} managed (probe {})",
                m.descriptor.tool_id,
                if ok { "ok" } else { "failing" }
            ),
            [],
        );
        Ok(m)
    }

    pub async fn register_managed(&self, tool_id: &str) -> Result<String, BrokerError> {
        let _guard = self.ops.lock().await;
        self.register_locked(tool_id).await
    }

    async fn register_locked(&self, tool_id: &str) -> Result<String, BrokerError> {
        let m = self
            .get(tool_id)
            .ok_or_else(|| BrokerError::UnknownService(tool_id.to_string()))?;
        let ok = self.probe(&m.health_probe).await;
        self.update(tool_id, |m| m.last_probe_ok = ok)?;
        if !ok {
            return Err(BrokerError::ProbeUnhealthy(tool_id.to_string()));
        }
        let attempts = self.config.register_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff(attempt - 1);
                tracing::warn!(
                    tool_id,
                    attempt,
                    ?wait,
                    "registry unreachable, retrying: {last}"
                );
                tokio::time::sleep(wait).await;
            }
            match self
                .registry
                .register_tool(&m.descriptor, &self.config.broker_id)
                .await
            {
                Ok(id) => {
                    self.update(tool_id, |m| {
                        m.registered = true;
                        m.reregister_pending = false;
                    })?;
                    self.events.record(
                        "broker",
                        "register_managed",
                        format!("{tool_id} registered with the registry"),
                        [],
                    );
                    return Ok(id);
                }
                Err(RegistryCallError::Unreachable(e)) => last = e,
                Err(RegistryCallError::Rejected { code, message }) => {
                    return Err(BrokerError::Rejected {
                        tool_id: tool_id.to_string(),
                        code,
                        message,
                    })
                }
            }
        }
        Err(BrokerError::RegistryUnreachable { attempts, last })
    }

    /// Re-registers flagged services, probes the registered ones and sends
    /// one heartbeat naming every probe-healthy registered tool.
    pub async fn heartbeat_cycle(&self, now: DateTime<Utc>) -> CycleReport {
        let _guard = self.ops.lock().await;
        let mut report = CycleReport::default();
        let pending: Vec<String> = self
            .list()
            .into_iter()
            .filter(|m| m.reregister_pending)
            .map(|m| m.descriptor.tool_id)
            .collect();
        for id in pending {
            match self.register_locked(&id).await {
                Ok(_) => report.reregistered.push(id),
                Err(e) => tracing::warn!("re-registration of {id} failed: {e}"),
            }
        }
        let mut healthy = Vec::new();
        for m in self.list().into_iter().filter(|m| m.registered) {
            let ok = self.probe(&m.health_probe).await;
            if ok != m.last_probe_ok {
                if let Err(e) = self.update(&m.descriptor.tool_id, |m| m.last_probe_ok = ok) {
                    tracing::warn!("cannot persist probe result: {e}");
                }
            }
            if ok && !m.reregister_pending {
                healthy.push(m.descriptor.tool_id.clone());
            }
        }
        if healthy.is_empty() {
            return report;
        }
        let req = HeartbeatRequest {
            broker_id: self.config.broker_id.clone(),
            tool_ids: healthy.clone(),
            ts: now,
        };
        report.sent = Some(healthy.clone());
        match self.registry.heartbeat(&req).await {
            Ok(ack) => {
                for id in &ack.reregister {
                    if self.update(id, |m| m.reregister_pending = true).is_ok() {
                        report.flagged.push(id.clone());
                    }
                }
            }
            // A restarted registry has forgotten us and all our tools.
            Err(RegistryCallError::Rejected { code, .. }) if code == "UnknownBroker" => {
                for id in &healthy {
                    if self.update(id, |m| m.reregister_pending = true).is_ok() {
                        report.flagged.push(id.clone());
                    }
                }
            }
            Err(e) => {
                tracing::warn!("heartbeat failed: {e}");
                report.error = Some(e.to_string());
            }
        }
        report
    }

    /// Runs heartbeat cycles until `shutdown` fires.
    pub async fn run(self: Arc<Self>, mut shutdown: tokio::sync::watch::Receiver<bool>) {
        loop {
            let delay = self.config.next_delay(&mut rand::rng());
            tokio::select! {
                _ = tokio::time::sleep(delay) => {}
                _ = shutdown.changed() => return,
            }
            self.heartbeat_cycle(self.clock.now()).await;
        }
    }
}
