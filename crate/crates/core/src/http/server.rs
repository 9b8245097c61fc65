//! Routers. Every service also answers `GET /health`.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ApiError, Body};
use crate::broker::{BrokerError, ToolBroker};
use crate::methodology::{Methodology, MethodologyError, MethodologyStore, ProcessStep};
use crate::planning::{Planner, PlanningError};
use crate::ports::{DiscoverError, HeartbeatRequest, WorkflowPort};
use crate::profile::{ProfileError, ProfileStore};
use crate::reception::{Reception, ReceptionError, TaskView};
use crate::registry::{DiscoveryQuery, RegistryError, ToolDescriptor, ToolRegistry};
use crate::services::{InvokeRequest, InvokeResponse, ToolHost};
use crate::task::{StructuredTask, TaskResult};
use crate::workflow::WorkflowEngine;

type ApiResult<T> = Result<T, ApiError>;

fn health_route(name: &'static str) -> Router {
    Router::new().route(
        "/health",
        get(move || async move { Json(json!({"service": name, "status": "ok"})) }),
    )
}

fn finish(name: &'static str, router: Router) -> Router {
    router
        .merge(health_route(name))
        .fallback(|| async { ApiError::not_found("UnknownRoute", "no such endpoint") })
}

// ---- reception

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    user_id: String,
    text: String,
}

fn reception_error(e: ReceptionError) -> ApiError {
    let status = match &e {
        ReceptionError::EmptyRequest => StatusCode::BAD_REQUEST,
        ReceptionError::DownstreamUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        ReceptionError::UnknownTask(_) => StatusCode::NOT_FOUND,
    };
    ApiError::new(status, e.code(), e.to_string())
}

pub fn reception(r: Arc<Reception>) -> Router {
    let router = Router::new()
        .route("/requests", post(submit_request))
        .route("/tasks/{id}", get(task_status))
        .route("/results", post(accept_result))
        .with_state(r);
    finish("reception", router)
}

async fn submit_request(
    State(r): State<Arc<Reception>>,
    Body(b): Body<SubmitBody>,
) -> ApiResult<Response> {
    let task_id = r
        .submit_request(&b.user_id, &b.text)
        .await
        .map_err(reception_error)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "task_id": task_id }))).into_response())
}

async fn task_status(
    State(r): State<Arc<Reception>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    Ok(Json(match r.get_status(&id).map_err(reception_error)? {
        TaskView::Pending => json!({"status": "pending", "task_id": id}),
        TaskView::Done(result) => serde_json::to_value(result).expect("results serialize"),
    }))
}

async fn accept_result(
    State(r): State<Arc<Reception>>,
    Body(result): Body<TaskResult>,
) -> ApiResult<Json<Value>> {
    let accepted = r.accept_result(&result).map_err(reception_error)?;
    Ok(Json(json!({ "accepted": accepted })))
}

// ---- workflow

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceBody {
    task: StructuredTask,
}

pub fn workflow(w: Arc<WorkflowEngine>) -> Router {
    let router = Router::new()
        .route("/instances", post(start_instance).get(list_instances))
        .route("/instances/{id}", get(get_instance))
        .with_state(w);
    finish("workflow", router)
}

async fn start_instance(
    State(w): State<Arc<WorkflowEngine>>,
    Body(b): Body<InstanceBody>,
) -> ApiResult<Response> {
    let id = w
        .start(&b.task)
        .await
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.code(), e.to_string()))?;
    Ok((StatusCode::CREATED, Json(json!({ "instance_id": id }))).into_response())
}

async fn list_instances(State(w): State<Arc<WorkflowEngine>>) -> Json<Value> {
    let list: Vec<Value> = w
        .list_instances()
        .into_iter()
        .map(|i| {
            json!({
                "instance_id": i.instance_id,
                "task_id": i.task.task_id,
                "status": i.status,
                "created_at": i.created_at,
                "finished_at": i.finished_at,
            })
        })
        .collect();
    Json(Value::Array(list))
}

async fn get_instance(
    State(w): State<Arc<WorkflowEngine>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let inst = w.get_instance(&id).ok_or_else(|| {
        ApiError::not_found("UnknownInstance", format!("unknown instance `{id}`"))
    })?;
    Ok(Json(
        serde_json::to_value(inst).expect("instances serialize"),
    ))
}

// ---- planning

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanBody {
    task: StructuredTask,
    methodology_id: String,
}

pub fn planning(p: Arc<Planner>) -> Router {
    let router = Router::new().route("/plan", post(make_plan)).with_state(p);
    finish("planning", router)
}

async fn make_plan(
    State(p): State<Arc<Planner>>,
    Body(b): Body<PlanBody>,
) -> ApiResult<Json<Value>> {
    match p.plan(&b.task, &b.methodology_id).await {
        Ok(plan) => Ok(Json(serde_json::to_value(plan).expect("plans serialize"))),
        Err(e @ PlanningError::Failed(_)) => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "PlanningFailed",
            e.to_string(),
        )),
        Err(e @ PlanningError::Unavailable(_)) => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "PlanningUnavailable",
            e.to_string(),
        )),
    }
}

// ---- methodology

fn methodology_error(e: MethodologyError) -> ApiError {
    let status = match &e {
        MethodologyError::Validation(_) | MethodologyError::BadPosition { .. } => {
            StatusCode::BAD_REQUEST
        }
        MethodologyError::UnknownMethodology(_) => StatusCode::NOT_FOUND,
        MethodologyError::VersionConflict { .. } => StatusCode::CONFLICT,
        MethodologyError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    ApiError::new(status, e.code(), e.to_string())
}

#[derive(Debug, Default, Deserialize)]
struct ExpertQuery {
    expert_id: Option<String>,
    version: Option<u64>,
    expected_version: Option<u64>,
}

impl ExpertQuery {
    fn expert(&self) -> &str {
        self.expert_id.as_deref().unwrap_or("expert")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InsertStepBody {
    position: usize,
    step: ProcessStep,
    #[serde(default)]
    expert_id: Option<String>,
    #[serde(default)]
    expected_version: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchBody {
    task: StructuredTask,
}

pub fn methodology(m: Arc<MethodologyStore>) -> Router {
    let router = Router::new()
        .route(
            "/methodologies",
            get(list_methodologies).post(create_methodology),
        )
        .route("/methodologies/match", post(match_methodology))
        .route(
            "/methodologies/{id}",
            get(get_methodology).put(put_methodology),
        )
        .route("/methodologies/{id}/steps", post(insert_step))
        .route("/methodologies/{id}/steps/{position}", delete(delete_step))
        .route("/intents", get(intents))
        .with_state(m);
    finish("methodology", router)
}

async fn list_methodologies(State(m): State<Arc<MethodologyStore>>) -> Json<Vec<Methodology>> {
    Json(m.list())
}

async fn create_methodology(
    State(m): State<Arc<MethodologyStore>>,
    Query(q): Query<ExpertQuery>,
    Body(doc): Body<Methodology>,
) -> ApiResult<Response> {
    let (id, version) = m
        .upsert_methodology(doc, q.expert())
        .map_err(methodology_error)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"methodology_id": id, "version": version})),
    )
        .into_response())
}

async fn get_methodology(
    State(m): State<Arc<MethodologyStore>>,
    Path(id): Path<String>,
    Query(q): Query<ExpertQuery>,
) -> ApiResult<Response> {
    let unknown =
        || ApiError::not_found("UnknownMethodology", format!("unknown methodology `{id}`"));
    match q.version {
        // stored bytes verbatim
        Some(v) => {
            let json = m.get_version_json(&id, v).ok_or_else(unknown)?;
            Ok((
                [(axum::http::header::CONTENT_TYPE, "application/json")],
                json,
            )
                .into_response())
        }
        None => Ok(Json(m.get(&id).ok_or_else(unknown)?).into_response()),
    }
}

async fn put_methodology(
    State(m): State<Arc<MethodologyStore>>,
    Path(id): Path<String>,
    Query(q): Query<ExpertQuery>,
    Body(mut doc): Body<Methodology>,
) -> ApiResult<Json<Value>> {
    if !doc.methodology_id.is_empty() && doc.methodology_id != id {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "ValidationError",
            format!(
                "body id `{}` differs from path id `{id}`",
                doc.methodology_id
            ),
        ));
    }
    doc.methodology_id = id;
    let (id, version) = m
        .upsert_methodology(doc, q.expert())
        .map_err(methodology_error)?;
    Ok(Json(json!({"methodology_id": id, "version": version})))
}

async fn insert_step(
    State(m): State<Arc<MethodologyStore>>,
    Path(id): Path<String>,
    Body(b): Body<InsertStepBody>,
) -> ApiResult<Json<Value>> {
    let expert = b.expert_id.as_deref().unwrap_or("expert");
    let version = m
        .insert_step(&id, b.position, b.step, expert, b.expected_version)
        .map_err(methodology_error)?;
    Ok(Json(json!({"methodology_id": id, "version": version})))
}

async fn delete_step(
    State(m): State<Arc<MethodologyStore>>,
    Path((id, position)): Path<(String, usize)>,
    Query(q): Query<ExpertQuery>,
) -> ApiResult<Json<Value>> {
    let version = m
        .delete_step(&id, position, q.expert(), q.expected_version)
        .map_err(methodology_error)?;
    Ok(Json(json!({"methodology_id": id, "version": version})))
}

async fn match_methodology(
    State(m): State<Arc<MethodologyStore>>,
    Body(b): Body<MatchBody>,
) -> Json<Option<Methodology>> {
    Json(m.match_methodology(&b.task))
}

async fn intents(State(m): State<Arc<MethodologyStore>>) -> Json<Value> {
    Json(serde_json::to_value(m.intent_lexicon()).expect("lexicon serializes"))
}

// ---- registry

fn registry_error(e: RegistryError) -> ApiError {
    let status = match &e {
        RegistryError::Validation(_) => StatusCode::BAD_REQUEST,
        RegistryError::DuplicateToolOtherBroker { .. } => StatusCode::CONFLICT,
        RegistryError::UnknownBroker(_) | RegistryError::UnknownTool(_) => StatusCode::NOT_FOUND,
    };
    ApiError::new(status, e.code(), e.to_string())
}

pub fn registry(r: Arc<ToolRegistry>) -> Router {
    let router = Router::new()
        .route("/tools", post(register_tool).get(list_tools))
        .route("/tools/{id}", get(get_tool).delete(deregister_tool))
        .route("/heartbeats", post(heartbeat))
        .route("/discover", post(discover))
        .with_state(r);
    finish("registry", router)
}

async fn register_tool(
    State(r): State<Arc<ToolRegistry>>,
    Body(desc): Body<ToolDescriptor>,
) -> ApiResult<Response> {
    let broker = desc.broker_id.clone();
    let id = r.register_tool(&desc, &broker).map_err(registry_error)?;
    Ok((StatusCode::CREATED, Json(json!({ "tool_id": id }))).into_response())
}

async fn list_tools(State(r): State<Arc<ToolRegistry>>) -> Json<Vec<ToolDescriptor>> {
    Json(r.list())
}

async fn get_tool(
    State(r): State<Arc<ToolRegistry>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ToolDescriptor>> {
    r.get(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("UnknownTool", format!("unknown tool `{id}`")))
}

async fn deregister_tool(
    State(r): State<Arc<ToolRegistry>>,
    Path(id): Path<String>,
) -> ApiResult<Json<ToolDescriptor>> {
    r.deregister(&id).map(Json).map_err(registry_error)
}

async fn heartbeat(
    State(r): State<Arc<ToolRegistry>>,
    Body(req): Body<HeartbeatRequest>,
) -> ApiResult<Json<Value>> {
    let ack = r.heartbeat(&req).map_err(registry_error)?;
    Ok(Json(serde_json::to_value(ack).expect("acks serialize")))
}

async fn discover(
    State(r): State<Arc<ToolRegistry>>,
    Body(q): Body<DiscoveryQuery>,
) -> ApiResult<Json<Value>> {
    match r.discover(&q).await {
        Ok(found) => Ok(Json(
            serde_json::to_value(found).expect("results serialize"),
        )),
        Err(e @ DiscoverError::NoToolFound { .. }) => {
            Err(ApiError::not_found("NoToolFound", e.to_string()))
        }
        Err(e @ DiscoverError::Unavailable(_)) => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "RegistryUnavailable",
            e.to_string(),
        )),
    }
}

// ---- broker

fn broker_error(e: BrokerError) -> ApiError {
    let status = match &e {
        BrokerError::Validation(_) => StatusCode::BAD_REQUEST,
        BrokerError::UnknownService(_) => StatusCode::NOT_FOUND,
        BrokerError::ProbeUnhealthy(_) | BrokerError::Rejected { .. } => StatusCode::CONFLICT,
        BrokerError::RegistryUnreachable { .. } => StatusCode::BAD_GATEWAY,
        BrokerError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    ApiError::new(status, e.code(), e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddServiceBody {
    descriptor: ToolDescriptor,
    /// Defaults to `{endpoint}/health`.
    #[serde(default)]
    health_probe: Option<String>,
}

pub fn broker(b: Arc<ToolBroker>) -> Router {
    let router = Router::new()
        .route("/services", post(add_service).get(list_services))
        .route("/services/{id}/register", post(register_service))
        .with_state(b);
    finish("broker", router)
}

async fn add_service(
    State(b): State<Arc<ToolBroker>>,
    Body(body): Body<AddServiceBody>,
) -> ApiResult<Response> {
    let probe = body
        .health_probe
        .unwrap_or_else(|| format!("{}/health", body.descriptor.endpoint.trim_end_matches('/')));
    let m = b
        .add_service(body.descriptor, &probe)
        .await
        .map_err(broker_error)?;
    Ok((StatusCode::CREATED, Json(m)).into_response())
}

async fn list_services(State(b): State<Arc<ToolBroker>>) -> Json<Value> {
    Json(serde_json::to_value(b.list()).expect("services serialize"))
}

async fn register_service(
    State(b): State<Arc<ToolBroker>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let tool_id = b.register_managed(&id).await.map_err(broker_error)?;
    Ok(Json(json!({"tool_id": tool_id, "registered": true})))
}

// ---- profile

fn profile_error(e: ProfileError) -> ApiError {
    let status = match &e {
        ProfileError::EmptyKey => StatusCode::BAD_REQUEST,
        ProfileError::ValueTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
        ProfileError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    ApiError::new(status, e.code(), e.to_string())
}

pub fn profile(p: Arc<ProfileStore>) -> Router {
    let router = Router::new()
        .route(
            "/profiles/{namespace}/{key}",
            get(get_profile).put(put_profile).delete(delete_profile),
        )
        .with_state(p);
    finish("profile", router)
}

fn profile_not_found(ns: &str, key: &str) -> ApiError {
    ApiError::not_found("NotFound", format!("no profile entry {ns}/{key}"))
}

async fn get_profile(
    State(p): State<Arc<ProfileStore>>,
    Path((ns, key)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let entry = p
        .entry(&ns, &key)
        .ok_or_else(|| profile_not_found(&ns, &key))?;
    Ok(Json(
        serde_json::to_value(entry).expect("entries serialize"),
    ))
}

async fn put_profile(
    State(p): State<Arc<ProfileStore>>,
    Path((ns, key)): Path<(String, String)>,
    Body(value): Body<Value>,
) -> ApiResult<Json<Value>> {
    let entry = p.put(&ns, &key, value).map_err(profile_error)?;
    Ok(Json(
        serde_json::to_value(entry).expect("entries serialize"),
    ))
}

async fn delete_profile(
    State(p): State<Arc<ProfileStore>>,
    Path((ns, key)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    if p.delete(&ns, &key).map_err(profile_error)? {
        Ok(Json(json!({"deleted": true})))
    } else {
        Err(profile_not_found(&ns, &key))
    }
}

// ---- demo tool services

pub fn tools(host: Arc<ToolHost>) -> Router {
    let router = Router::new()
        .route("/tools/{slug}/invoke", post(invoke_tool))
        .route("/tools/{slug}/health", get(tool_health))
        .route("/tools/{slug}/schema", get(tool_schema))
        .with_state(host);
    finish("tools", router)
}

fn unknown_service(slug: &str) -> ApiError {
    ApiError::not_found("UnknownService", format!("no tool service `{slug}`"))
}

async fn invoke_tool(
    State(host): State<Arc<ToolHost>>,
    Path(slug): Path<String>,
    Body(req): Body<InvokeRequest>,
) -> ApiResult<Response> {
    let service = host.by_slug(&slug).ok_or_else(|| unknown_service(&slug))?;
    if !service.is_healthy() {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "Unavailable",
            format!("{slug} is down"),
        ));
    }
    Ok(match service.call(&req.params) {
        Ok(result) => Json(InvokeResponse::ok(&req.invocation_id, result)).into_response(),
        Err(e) => {
            let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::BAD_REQUEST);
            (status, Json(InvokeResponse::error(&req.invocation_id, &e))).into_response()
        }
    })
}

async fn tool_health(
    State(host): State<Arc<ToolHost>>,
    Path(slug): Path<String>,
) -> ApiResult<Response> {
    let service = host.by_slug(&slug).ok_or_else(|| unknown_service(&slug))?;
    if service.is_healthy() {
        Ok(Json(json!({"service": slug, "status": "ok"})).into_response())
    } else {
        Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "Unavailable",
            format!("{slug} is down"),
        ))
    }
}

async fn tool_schema(
    State(host): State<Arc<ToolHost>>,
    Path(slug): Path<String>,
) -> ApiResult<Json<Value>> {
    let service = host.by_slug(&slug).ok_or_else(|| unknown_service(&slug))?;
    Ok(Json(service.schema()))
}
