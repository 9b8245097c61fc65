//! Interfaces through which one capability calls another.
//!
//! Each trait has an in-process implementation on the capability itself and
//! an HTTP client implementation in [`crate::http::client`].

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::methodology::{IntentEntry, Methodology};
use crate::planning::{Plan, PlanningError};
use crate::registry::{DiscoveryQuery, DiscoveryResult, ToolDescriptor};
use crate::services::{InvokeRequest, InvokeResponse};
use crate::task::{StructuredTask, TaskResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PortError {
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("{code}: {message}")]
    Rejected { code: String, message: String },
}

impl PortError {
    pub fn code(&self) -> &str {
        match self {
            PortError::Unavailable(_) => "Unavailable",
            PortError::Rejected { code, .. } => code,
        }
    }
}

#[async_trait]
pub trait ProfilePort: Send + Sync + std::fmt::Debug {
    async fn lookup(&self, namespace: &str, key: &str) -> Result<Option<Value>, PortError>;
}

#[async_trait]
pub trait MethodologyPort: Send + Sync + std::fmt::Debug {
    async fn match_task(&self, task: &StructuredTask) -> Result<Option<Methodology>, PortError>;
    async fn fetch(&self, id: &str) -> Result<Option<Methodology>, PortError>;
    async fn lexicon(&self) -> Result<Vec<IntentEntry>, PortError>;
}

#[async_trait]
pub trait PlanningPort: Send + Sync + std::fmt::Debug {
    async fn plan(
        &self,
        task: &StructuredTask,
        methodology_id: &str,
    ) -> Result<Plan, PlanningError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiscoverError {
    #[error("no tool found for \"{step_description}\" (best score {best_score:.3})")]
    NoToolFound {
        step_description: String,
        best_score: f64,
    },
    #[error("tool registry unavailable: {0}")]
    Unavailable(String),
}

#[async_trait]
pub trait DiscoveryPort: Send + Sync + std::fmt::Debug {
    async fn discover(&self, query: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvokeError {
    /// The service refused the request (schema violation, unknown entity).
    #[error("tool rejected request ({code}): {message}")]
    Rejected { code: String, message: String },
    #[error("tool unreachable: {0}")]
    Unreachable(String),
    #[error("malformed tool reply: {0}")]
    Malformed(String),
}

#[async_trait]
pub trait ToolInvoker: Send + Sync + std::fmt::Debug {
    async fn invoke(
        &self,
        endpoint: &str,
        req: &InvokeRequest,
    ) -> Result<InvokeResponse, InvokeError>;
}

#[async_trait]
pub trait HealthProbe: Send + Sync + std::fmt::Debug {
    /// True when the probe URL answers 2xx in time.
    async fn probe(&self, url: &str) -> bool;
}

#[async_trait]
pub trait ResultSink: Send + Sync + std::fmt::Debug {
    async fn deliver(&self, result: &TaskResult) -> Result<(), PortError>;
}

#[async_trait]
pub trait WorkflowPort: Send + Sync + std::fmt::Debug {
    /// Creates an instance for the task and starts it in the background.
    async fn start(&self, task: &StructuredTask) -> Result<String, PortError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatRequest {
    pub broker_id: String,
    pub tool_ids: Vec<String>,
    pub ts: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeartbeatAck {
    pub acknowledged: Vec<String>,
    /// Ids the registry does not know (or has evicted); the broker should re-register them.
    pub reregister: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryCallError {
    #[error("registry unreachable: {0}")]
    Unreachable(String),
    #[error("registry rejected call ({code}): {message}")]
    Rejected { code: String, message: String },
}

#[async_trait]
pub trait RegistryPort: Send + Sync + std::fmt::Debug {
    async fn register_tool(
        &self,
        desc: &ToolDescriptor,
        broker_id: &str,
    ) -> Result<String, RegistryCallError>;
    async fn heartbeat(&self, req: &HeartbeatRequest) -> Result<HeartbeatAck, RegistryCallError>;
}
