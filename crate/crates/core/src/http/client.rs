//! reqwest implementations of the port traits.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::{Client, Response, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use super::{segment, ErrorBody};
use crate::methodology::{IntentEntry, Methodology};
use crate::planning::{Plan, PlanningError};
use crate::ports::{
    DiscoverError, DiscoveryPort, HealthProbe, HeartbeatAck, HeartbeatRequest, InvokeError,
    MethodologyPort, PlanningPort, PortError, ProfilePort, RegistryCallError, RegistryPort,
    ResultSink, ToolInvoker, WorkflowPort,
};
use crate::registry::{DiscoveryQuery, DiscoveryResult, ToolDescriptor};
use crate::services::{InvokeRequest, InvokeResponse, InvokeStatus};
use crate::task::{StructuredTask, TaskResult};

/// Probe budget for health checks.
pub const PROBE_TIMEOUT: Duration = Duration::from_secs(2);

/// Base URL plus a shared connection pool.
#[derive(Debug, Clone)]
pub struct Endpoint {
    base: String,
    client: Client,
}

/// Transport failure or a non-2xx answer.
#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    Unreachable(String),
    Status(StatusCode, ErrorBody),
    Malformed(String),
}

impl CallError {
    fn into_port(self) -> PortError {
        match self {
            CallError::Status(_, b) => PortError::Rejected {
                code: b.error_code,
                message: b.message,
            },
            CallError::Unreachable(m) | CallError::Malformed(m) => PortError::Unavailable(m),
        }
    }

    fn is_not_found(&self) -> bool {
        matches!(self, CallError::Status(StatusCode::NOT_FOUND, _))
    }
}

impl std::fmt::Display for CallError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CallError::Unreachable(m) => write!(f, "unreachable: {m}"),
            CallError::Status(s, b) => write!(f, "{s} {}: {}", b.error_code, b.message),
            CallError::Malformed(m) => write!(f, "malformed reply: {m}"),
        }
    }
}

async fn error_body(status: StatusCode, resp: Response) -> ErrorBody {
    let text = resp.text().await.unwrap_or_default();
    serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody {
        error_code: status
            .canonical_reason()
            .unwrap_or("HttpError")
            .replace(' ', ""),
        message: text,
    })
}

impl Endpoint {
    pub fn new(base: &str, client: Client) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            client,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<Response, CallError> {
        let resp = req
            .send()
            .await
            .map_err(|e| CallError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            Ok(resp)
        } else {
            Err(CallError::Status(status, error_body(status, resp).await))
        }
    }

    async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T, CallError> {
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| CallError::Unreachable(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| CallError::Malformed(e.to_string()))
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, CallError> {
        Self::decode(self.send(self.client.get(self.url(path))).await?).await
    }

    pub async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, CallError> {
        Self::decode(
            self.send(self.client.post(self.url(path)).json(body))
                .await?,
        )
        .await
    }

    pub async fn put<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, CallError> {
        Self::decode(
            self.send(self.client.put(self.url(path)).json(body))
                .await?,
        )
        .await
    }

    pub async fn delete<T: DeserializeOwned>(&self, path: &str) -> Result<T, CallError> {
        Self::decode(self.send(self.client.delete(self.url(path))).await?).await
    }
}

/// Profile service client.
#[derive(Debug, Clone)]
pub struct ProfileClient(pub Endpoint);

#[async_trait]
impl ProfilePort for ProfileClient {
    async fn lookup(&self, namespace: &str, key: &str) -> Result<Option<Value>, PortError> {
        let path = format!("/profiles/{}/{}", segment(namespace), segment(key));
        match self.0.get::<Value>(&path).await {
            Ok(mut entry) => Ok(Some(
                entry
                    .get_mut("value")
                    .map(Value::take)
                    .unwrap_or(Value::Null),
            )),
            Err(e) if e.is_not_found() => Ok(None),
            Err(e) => Err(e.into_port()),
        }
    }
}

/// Methodology service client.
#[derive(Debug, Clone)]
pub struct MethodologyClient(pub Endpoint);

#[async_trait]
impl MethodologyPort for MethodologyClient {
    async fn match_task(&self, task: &StructuredTask) -> Result<Option<Methodology>, PortError> {
        self.0
            .post("/methodologies/match", &json!({ "task": task }))
            .await
            .map_err(CallError::into_port)
    }

    async fn fetch(&self, id: &str) -> Result<Option<Methodology>, PortError> {
        match self.0.get(&format!("/methodologies/{}", segment(id))).await {
            Ok(m) => Ok(Some(m)),
            Err(e) if e.is_not_found() => Ok(None),
            Err(e) => Err(e.into_port()),
        }
    }

    async fn lexicon(&self) -> Result<Vec<IntentEntry>, PortError> {
        self.0.get("/intents").await.map_err(CallError::into_port)
    }
}

/// Planning service client.
#[derive(Debug, Clone)]
pub struct PlanningClient(pub Endpoint);

#[async_trait]
impl PlanningPort for PlanningClient {
    async fn plan(
        &self,
        task: &StructuredTask,
        methodology_id: &str,
    ) -> Result<Plan, PlanningError> {
        let body = json!({ "task": task, "methodology_id": methodology_id });
        self.0.post("/plan", &body).await.map_err(|e| match e {
            CallError::Status(StatusCode::UNPROCESSABLE_ENTITY, b) => PlanningError::Failed(
                b.message
                    .strip_prefix("planning failed: ")
                    .unwrap_or(&b.message)
                    .to_string(),
            ),
            other => PlanningError::Unavailable(other.to_string()),
        })
    }
}

/// Tool registry client, for discovery and for brokers.
#[derive(Debug, Clone)]
pub struct RegistryClient(pub Endpoint);

/// Recovers the best score from a NoToolFound message.
fn best_score_of(message: &str) -> f64 {
    message
        .rfind("(best score ")
        .and_then(|i| {
            let rest = &message[i + "(best score ".len()..];
            rest.split(')').next()?.trim().parse().ok()
        })
        .unwrap_or(0.0)
}

fn registry_call_error(e: CallError) -> RegistryCallError {
    match e {
        CallError::Status(s, b) if s.is_client_error() => RegistryCallError::Rejected {
            code: b.error_code,
            message: b.message,
        },
        other => RegistryCallError::Unreachable(other.to_string()),
    }
}

#[async_trait]
impl DiscoveryPort for RegistryClient {
    async fn discover(&self, query: &DiscoveryQuery) -> Result<DiscoveryResult, DiscoverError> {
        self.0.post("/discover", query).await.map_err(|e| match e {
            CallError::Status(StatusCode::NOT_FOUND, b) if b.error_code == "NoToolFound" => {
                DiscoverError::NoToolFound {
                    step_description: query.step_description.clone(),
                    best_score: best_score_of(&b.message),
                }
            }
            other => DiscoverError::Unavailable(other.to_string()),
        })
    }
}

#[async_trait]
impl RegistryPort for RegistryClient {
    async fn register_tool(
        &self,
        desc: &ToolDescriptor,
        broker_id: &str,
    ) -> Result<String, RegistryCallError> {
        let mut desc = desc.clone();
        desc.broker_id = broker_id.to_string();
        let reply: Value = self
            .0
            .post("/tools", &desc)
            .await
            .map_err(registry_call_error)?;
        reply
            .get("tool_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| RegistryCallError::Unreachable("reply lacks tool_id".into()))
    }

    async fn heartbeat(&self, req: &HeartbeatRequest) -> Result<HeartbeatAck, RegistryCallError> {
        self.0
            .post("/heartbeats", req)
            .await
            .map_err(registry_call_error)
    }
}

/// Workflow service client.
#[derive(Debug, Clone)]
pub struct WorkflowClient(pub Endpoint);

#[async_trait]
impl WorkflowPort for WorkflowClient {
    async fn start(&self, task: &StructuredTask) -> Result<String, PortError> {
        let reply: Value = self
            .0
            .post("/instances", &json!({ "task": task }))
            .await
            .map_err(CallError::into_port)?;
        reply
            .get("instance_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| PortError::Unavailable("reply lacks instance_id".into()))
    }
}

/// Reception client; the workflow engine reports results through it.
#[derive(Debug, Clone)]
pub struct ReceptionClient(pub Endpoint);

impl ReceptionClient {
    /// Returns the task id.
    pub async fn submit(&self, user_id: &str, text: &str) -> Result<String, CallError> {
        let reply: Value = self
            .0
            .post("/requests", &json!({ "user_id": user_id, "text": text }))
            .await?;
        reply
            .get("task_id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| CallError::Malformed("reply lacks task_id".into()))
    }

    /// `None` while the task is pending.
    pub async fn status(&self, task_id: &str) -> Result<Option<TaskResult>, CallError> {
        let reply: Value = self.0.get(&format!("/tasks/{}", segment(task_id))).await?;
        if reply.get("status").and_then(Value::as_str) == Some("pending") {
            return Ok(None);
        }
        serde_json::from_value(reply)
            .map(Some)
            .map_err(|e| CallError::Malformed(e.to_string()))
    }

    /// Polls until the result arrives or `timeout` passes.
    pub async fn wait(
        &self,
        task_id: &str,
        timeout: Duration,
    ) -> Result<Option<TaskResult>, CallError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if let Some(r) = self.status(task_id).await? {
                return Ok(Some(r));
            }
            if tokio::time::Instant::now() >= deadline {
                return Ok(None);
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
    }
}

#[async_trait]
impl ResultSink for ReceptionClient {
    async fn deliver(&self, result: &TaskResult) -> Result<(), PortError> {
        self.0
            .post::<_, Value>("/results", result)
            .await
            .map(|_| ())
            .map_err(CallError::into_port)
    }
}

/// Calls tool services at their advertised endpoints.
#[derive(Debug, Clone)]
pub struct HttpTools {
    client: Client,
}

impl HttpTools {
    pub fn new(client: Client) -> Self {
        Self { client }
    }
}

fn rejected_from(resp: &InvokeResponse) -> InvokeError {
    let message = resp.error_message.clone().unwrap_or_default();
    let code = message
        .split_once(':')
        .map(|(c, _)| c.trim().to_string())
        .filter(|c| !c.is_empty() && !c.contains(' '))
        .unwrap_or_else(|| "ToolError".into());
    InvokeError::Rejected { code, message }
}

#[async_trait]
impl ToolInvoker for HttpTools {
    async fn invoke(
        &self,
        endpoint: &str,
        req: &InvokeRequest,
    ) -> Result<InvokeResponse, InvokeError> {
        let url = format!("{}/invoke", endpoint.trim_end_matches('/'));
        let resp = self
            .client
            .post(&url)
            .json(req)
            .send()
            .await
            .map_err(|e| InvokeError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(InvokeError::Unreachable(format!("{url} answered {status}")));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| InvokeError::Unreachable(e.to_string()))?;
        let parsed: InvokeResponse = match serde_json::from_slice(&bytes) {
            Ok(r) => r,
            Err(e) if status.is_success() => return Err(InvokeError::Malformed(e.to_string())),
            Err(_) => {
                let body: ErrorBody = serde_json::from_slice(&bytes)
                    .map_err(|e| InvokeError::Malformed(e.to_string()))?;
                return Err(InvokeError::Rejected {
                    code: body.error_code,
                    message: body.message,
                });
            }
        };
        match parsed.status {
            InvokeStatus::Ok if status.is_success() => Ok(parsed),
            _ => Err(rejected_from(&parsed)),
        }
    }
}

#[async_trait]
impl HealthProbe for HttpTools {
    async fn probe(&self, url: &str) -> bool {
        matches!(
            self.client.get(url).timeout(PROBE_TIMEOUT).send().await,
            Ok(r) if r.status().is_success()
        )
    }
}
