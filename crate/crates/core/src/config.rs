//! Stack configuration, read from TOML. Every section and key is optional.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::broker::BrokerConfig;
use crate::methodology::MatchConfig;
use crate::reasoner::ReasonerConfig;
use crate::reception::ReceptionConfig;
use crate::registry::RegistryConfig;
use crate::workflow::WorkflowConfig;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// The service names, in boot order.
pub const SERVICE_NAMES: [&str; 7] = [
    "profile",
    "methodology",
    "registry",
    "planning",
    "broker",
    "workflow",
    "reception",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServicesConfig {
    pub host: String,
    pub reception: u16,
    pub workflow: u16,
    pub planning: u16,
    pub methodology: u16,
    pub registry: u16,
    pub broker: u16,
    pub profile: u16,
    /// Port of the demo tool services.
    pub tools: u16,
    /// Budget for every service to answer its health check after boot.
    pub boot_timeout_ms: u64,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            reception: 7101,
            workflow: 7102,
            planning: 7103,
            methodology: 7104,
            registry: 7105,
            broker: 7106,
            profile: 7107,
            tools: 7110,
            boot_timeout_ms: 10_000,
        }
    }
}

impl ServicesConfig {
    pub fn port(&self, service: &str) -> Option<u16> {
        Some(match service {
            "reception" => self.reception,
            "workflow" => self.workflow,
            "planning" => self.planning,
            "methodology" => self.methodology,
            "registry" => self.registry,
            "broker" => self.broker,
            "profile" => self.profile,
            "tools" => self.tools,
            _ => return None,
        })
    }

    pub fn addr(&self, service: &str) -> Result<SocketAddr, ConfigError> {
        let port = self
            .port(service)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown service `{service}`")))?;
        format!("{}:{port}", self.host)
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("services.host `{}`: {e}", self.host)))
    }

    /// Every port set to 0, so the OS picks free ones.
    pub fn ephemeral() -> Self {
        Self {
            reception: 0,
            workflow: 0,
            planning: 0,
            methodology: 0,
            registry: 0,
            broker: 0,
            profile: 0,
            tools: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsConfig {
    /// Directory with the demo fixture data; the shipped data when unset.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Durable state lives here; everything is in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub services: ServicesConfig,
    pub reasoner: ReasonerConfig,
    pub reception: ReceptionConfig,
    pub methodology: MatchConfig,
    pub workflow: WorkflowConfig,
    pub registry: RegistryConfig,
    pub broker: BrokerConfig,
    pub tools: ToolsConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let mut cfg: Config = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut().filter(|p| p.is_relative()) {
                *inner = base.join(&*inner);
            }
        };
        rebase(&mut cfg.data_dir);
        rebase(&mut cfg.reasoner.script_path);
        rebase(&mut cfg.tools.data_dir);
        Ok(cfg)
    }

    pub fn shipped() -> Config {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped configuration parses")
    }

    fn check(&mut self) -> Result<(), ConfigError> {
        let w = &self.registry.weights;
        if [w.overlap, w.outputs, w.params].iter().any(|x| *x < 0.0) {
            return Err(ConfigError::Invalid(
                "registry.weights must be non-negative".into(),
            ));
        }
        if self.registry.heartbeat_interval_s <= 0 {
            return Err(ConfigError::Invalid(
                "registry.heartbeat_interval_s must be positive".into(),
            ));
        }
        if self.broker.heartbeat_interval_s == 0 {
            return Err(ConfigError::Invalid(
                "broker.heartbeat_interval_s must be positive".into(),
            ));
        }
        if self.workflow.step_timeout_ms == 0 {
            return Err(ConfigError::Invalid(
                "workflow.step_timeout_ms must be positive".into(),
            ));
        }
        Ok(())
    }
}
