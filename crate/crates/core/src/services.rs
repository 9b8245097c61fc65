//! Fixture-backed demo tool services and the common invoke contract.
//!
//! Fixture files hold one JSON record per line:
//!
//! * `addresses.jsonl`: `{address, x_km, y_km}`
//! * `cities.jsonl`: `{name, x_km, y_km}`
//! * `attractions.jsonl`: `{city, attractions: [{name, family_friendly}]}`
//! * `weather.jsonl`: `{city, date, condition}`
//!
//! Coordinates are on a flat grid in kilometres; distance is Euclidean.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::ports::{HealthProbe, InvokeError, ToolInvoker};
use crate::registry::{ParamSpec, ParamType, ToolDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvokeRequest {
    pub invocation_id: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvokeStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvokeResponse {
    pub invocation_id: String,
    pub status: InvokeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

impl InvokeResponse {
    pub fn ok(invocation_id: &str, result: Value) -> Self {
        Self {
            invocation_id: invocation_id.to_string(),
            status: InvokeStatus::Ok,
            result: Some(result),
            error_message: None,
        }
    }

    pub fn error(invocation_id: &str, err: &ServiceError) -> Self {
        Self {
            invocation_id: invocation_id.to_string(),
            status: InvokeStatus::Error,
            result: None,
            error_message: Some(format!("{}: {err}", err.code())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing required parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` must be a {expected}")]
    TypeMismatch {
        name: String,
        expected: &'static str,
    },
    #[error("address `{0}` is not in the fixture")]
    UnknownAddress(String),
    #[error("city `{0}` is not in the fixture")]
    UnknownCity(String),
    #[error("bad date range: {0}")]
    BadDateRange(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownParam(_) => "UnknownParam",
            ServiceError::MissingParam(_) => "MissingParam",
            ServiceError::TypeMismatch { .. } => "TypeMismatch",
            ServiceError::UnknownAddress(_) => "UnknownAddress",
            ServiceError::UnknownCity(_) => "UnknownCity",
            ServiceError::BadDateRange(_) => "BadDateRange",
        }
    }

    /// HTTP status the service answers with.
    pub fn http_status(&self) -> u16 {
        match self {
            ServiceError::UnknownAddress(_) | ServiceError::UnknownCity(_) => 404,
            _ => 400,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {reason}")]
    Record {
        file: String,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddressRecord {
    address: String,
    x_km: f64,
    y_km: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CityRecord {
    name: String,
    x_km: f64,
    y_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attraction {
    pub name: String,
    pub family_friendly: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttractionRecord {
    city: String,
    attractions: Vec<Attraction>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeatherRecord {
    city: String,
    date: NaiveDate,
    condition: String,
}

fn parse_jsonl<T: DeserializeOwned>(file: &str, text: &str) -> Result<Vec<T>, FixtureError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FixtureError::Record {
                file: file.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Everything the demo services answer from.
#[derive(Debug, Clone, Default)]
pub struct DemoData {
    addresses: BTreeMap<String, (f64, f64)>,
    cities: Vec<CityRecord>,
    attractions: BTreeMap<String, Vec<Attraction>>,
    weather: BTreeMap<String, Vec<(NaiveDate, String)>>,
}

const FIXTURE_FILES: [&str; 4] = [
    "addresses.jsonl",
    "cities.jsonl",
    "attractions.jsonl",
    "weather.jsonl",
];

impl DemoData {
    /// The fixture set shipped with the crate.
    pub fn shipped() -> Self {
        Self::parse([
            include_str!("../fixtures/data/addresses.jsonl"),
            include_str!("../fixtures/data/cities.jsonl"),
            include_str!("../fixtures/data/attractions.jsonl"),
            include_str!("../fixtures/data/weather.jsonl"),
        ])
        .expect("shipped fixtures are valid")
    }

    pub fn from_dir(dir: &Path) -> Result<Self, FixtureError> {
        let mut texts = Vec::new();
        for name in FIXTURE_FILES {
            let path = dir.join(name);
            texts.push(
                std::fs::read_to_string(&path).map_err(|source| FixtureError::Io {
                    path: path.display().to_string(),
                    source,
                })?,
            );
        }
        Self::parse([&texts[0], &texts[1], &texts[2], &texts[3]].map(String::as_str))
    }

    fn parse(texts: [&str; 4]) -> Result<Self, FixtureError> {
        let addresses: Vec<AddressRecord> = parse_jsonl(FIXTURE_FILES[0], texts[0])?;
        let cities: Vec<CityRecord> = parse_jsonl(FIXTURE_FILES[1], texts[1])?;
        let attractions: Vec<AttractionRecord> = parse_jsonl(FIXTURE_FILES[2], texts[2])?;
        let weather: Vec<WeatherRecord> = parse_jsonl(FIXTURE_FILES[3], texts[3])?;
        let mut data = DemoData {
            addresses: addresses
                .into_iter()
                .map(|a| (a.address, (a.x_km, a.y_km)))
                .collect(),
            cities,
            attractions: attractions
                .into_iter()
                .map(|a| (a.city, a.attractions))
                .collect(),
            weather: BTreeMap::new(),
        };
        for w in weather {
            data.weather
                .entry(w.city)
                .or_default()
                .push((w.date, w.condition));
        }
        for days in data.weather.values_mut() {
            days.sort();
        }
        Ok(data)
    }

    fn known_city(&self, city: &str) -> bool {
        self.cities.iter().any(|c| c.name == city)
    }

    pub fn nearby_cities(
        &self,
        address: &str,
        max_distance_km: f64,
    ) -> Result<Value, ServiceError> {
        let &(x, y) = self
            .addresses
            .get(address)
            .ok_or_else(|| ServiceError::UnknownAddress(address.to_string()))?;
        let mut found: Vec<(f64, &str)> = self
            .cities
            .iter()
            .map(|c| ((c.x_km - x).hypot(c.y_km - y), c.name.as_str()))
            .filter(|(d, _)| *d <= max_distance_km)
            .collect();
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let cities: Vec<Value> = found
            .into_iter()
            .map(|(d, name)| json!({"name": name, "distance_km": d}))
            .collect();
        Ok(json!({ "cities": cities }))
    }

    pub fn attractions(&self, city: &str) -> Result<Value, ServiceError> {
        if !self.known_city(city) {
            return Err(ServiceError::UnknownCity(city.to_string()));
        }
        let list = self.attractions.get(city).cloned().unwrap_or_default();
        Ok(json!({ "attractions": list }))
    }

    /// Omitted bounds default to the first and last fixture day for the city.
    pub fn weather_forecast(
        &self,
        city: &str,
        date_from: Option<&str>,
        date_to: Option<&str>,
    ) -> Result<Value, ServiceError> {
        if !self.known_city(city) {
            return Err(ServiceError::UnknownCity(city.to_string()));
        }
        let days = self
            .weather
            .get(city)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let parse = |s: &str| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| ServiceError::BadDateRange(format!("`{s}` is not a YYYY-MM-DD date")))
        };
        let from = match date_from {
            Some(s) => Some(parse(s)?),
            None => days.first().map(|d| d.0),
        };
        let to = match date_to {
            Some(s) => Some(parse(s)?),
            None => days.last().map(|d| d.0),
        };
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(ServiceError::BadDateRange(format!("{f} is after {t}")));
            }
        }
        let selected: Vec<Value> = days
            .iter()
            .filter(|(d, _)| from.is_none_or(|f| *d >= f) && to.is_none_or(|t| *d <= t))
            .map(|(d, c)| json!({"date": d.format("%Y-%m-%d").to_string(), "condition": c}))
            .collect();
        Ok(json!({ "days": selected }))
    }
}

/// Which demo operation a service exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoOp {
    NearbyCities,
    Attractions,
    WeatherForecast,
}

impl DemoOp {
    pub const ALL: [DemoOp; 3] = [
        DemoOp::NearbyCities,
        DemoOp::Attractions,
        DemoOp::WeatherForecast,
    ];

    /// Path segment under `/tools/`.
    pub fn slug(self) -> &'static str {
        match self {
            DemoOp::NearbyCities => "nearby-cities",
            DemoOp::Attractions => "attractions",
            DemoOp::WeatherForecast => "weather",
        }
    }

    pub fn params(self) -> Vec<ParamSpec> {
        let p = |name: &str, kind, required| ParamSpec {
            name: name.into(),
            kind,
            required,
            description: String::new(),
        };
        match self {
            DemoOp::NearbyCities => vec![
                p("address", ParamType::String, true),
                p("max_distance_km", ParamType::Number, false),
            ],
            DemoOp::Attractions => vec![p("city", ParamType::String, true)],
            DemoOp::WeatherForecast => vec![
                p("city", ParamType::String, true),
                p("date_from", ParamType::String, false),
                p("date_to", ParamType::String, false),
            ],
        }
    }

    pub fn outputs(self) -> Vec<ParamSpec> {
        let name = match self {
            DemoOp::NearbyCities => "cities",
            DemoOp::Attractions => "attractions",
            DemoOp::WeatherForecast => "days",
        };
        vec![ParamSpec {
            name: name.into(),
            kind: ParamType::List,
            required: true,
            description: String::new(),
        }]
    }
}

pub const DEFAULT_MAX_DISTANCE_KM: f64 = 200.0;

/// Rejects unknown, missing and mistyped parameters.
pub fn check_params(params: &Map<String, Value>, schema: &[ParamSpec]) -> Result<(), ServiceError> {
    for (name, value) in params {
        let spec = schema
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| ServiceError::UnknownParam(name.clone()))?;
        if !spec.kind.accepts(value) {
            return Err(ServiceError::TypeMismatch {
                name: name.clone(),
                expected: spec.kind.as_str(),
            });
        }
    }
    if let Some(missing) = schema
        .iter()
        .find(|s| s.required && !params.contains_key(&s.name))
    {
        return Err(ServiceError::MissingParam(missing.name.clone()));
    }
    Ok(())
}

/// One running demo service with its invocation counter and health switch.
#[derive(Debug)]
pub struct DemoService {
    op: DemoOp,
    data: Arc<DemoData>,
    invocations: AtomicU64,
    healthy: AtomicBool,
}

impl DemoService {
    pub fn new(op: DemoOp, data: Arc<DemoData>) -> Self {
        Self {
            op,
            data,
            invocations: AtomicU64::new(0),
            healthy: AtomicBool::new(true),
        }
    }

    pub fn op(&self) -> DemoOp {
        self.op
    }

    pub fn schema(&self) -> Value {
        json!({"params": self.op.params(), "output_schema": self.op.outputs()})
    }

    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::SeqCst)
    }

    pub fn is_healthy(&self) -> bool {
        self.healthy.load(Ordering::SeqCst)
    }

    pub fn set_healthy(&self, healthy: bool) {
        self.healthy.store(healthy, Ordering::SeqCst);
    }

    pub fn call(&self, params: &Map<String, Value>) -> Result<Value, ServiceError> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        check_params(params, &self.op.params())?;
        let s = |k: &str| params.get(k).and_then(Value::as_str);
        match self.op {
            DemoOp::NearbyCities => self.data.nearby_cities(
                s("address").unwrap_or_default(),
                params
                    .get("max_distance_km")
                    .and_then(Value::as_f64)
                    .unwrap_or(DEFAULT_MAX_DISTANCE_KM),
            ),
            DemoOp::Attractions => self.data.attractions(s("city").unwrap_or_default()),
            DemoOp::WeatherForecast => self.data.weather_forecast(
                s("city").unwrap_or_default(),
                s("date_from"),
                s("date_to"),
            ),
        }
    }

    pub fn invoke(&self, req: &InvokeRequest) -> InvokeResponse {
        match self.call(&req.params) {
            Ok(result) => InvokeResponse::ok(&req.invocation_id, result),
            Err(e) => InvokeResponse::error(&req.invocation_id, &e),
        }
    }
}

/// The three demo services addressed by endpoint URL, for in-process use.
#[derive(Debug)]
pub struct ToolHost {
    base_url: String,
    services: RwLock<BTreeMap<String, Arc<DemoService>>>,
}

impl ToolHost {
    /// Hosts every demo service under `{base_url}/tools/{slug}`.
    pub fn demo(base_url: &str, data: Arc<DemoData>) -> Self {
        let host = Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            services: RwLock::new(BTreeMap::new()),
        };
        for op in DemoOp::ALL {
            host.services.write().insert(
                host.endpoint(op),
                Arc::new(DemoService::new(op, Arc::clone(&data))),
            );
        }
        host
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn endpoint(&self, op: DemoOp) -> String {
        format!("{}/tools/{}", self.base_url, op.slug())
    }

    pub fn service(&self, op: DemoOp) -> Arc<DemoService> {
        let endpoint = self.endpoint(op);
        Arc::clone(&self.services.read()[&endpoint])
    }

    pub fn by_slug(&self, slug: &str) -> Option<Arc<DemoService>> {
        DemoOp::ALL
            .into_iter()
            .find(|op| op.slug() == slug)
            .map(|op| self.service(op))
    }

    fn lookup(&self, endpoint: &str) -> Option<Arc<DemoService>> {
        self.services
            .read()
            .get(endpoint.trim_end_matches('/'))
            .cloned()
    }

    /// Invocation counts keyed by slug.
    pub fn counters(&self) -> BTreeMap<&'static str, u64> {
        DemoOp::ALL
            .into_iter()
            .map(|op| (op.slug(), self.service(op).invocations()))
            .collect()
    }
}

#[async_trait]
impl ToolInvoker for ToolHost {
    async fn invoke(
        &self,
        endpoint: &str,
        req: &InvokeRequest,
    ) -> Result<InvokeResponse, InvokeError> {
        let service = self
            .lookup(endpoint)
            .ok_or_else(|| InvokeError::Unreachable(format!("no service at {endpoint}")))?;
        if !service.is_healthy() {
            return Err(InvokeError::Unreachable(format!("{endpoint} is down")));
        }
        match service.call(&req.params) {
            Ok(result) => Ok(InvokeResponse::ok(&req.invocation_id, result)),
            Err(e) => Err(InvokeError::Rejected {
                code: e.code().into(),
                message: e.to_string(),
            }),
        }
    }
}

#[async_trait]
impl HealthProbe for ToolHost {
    async fn probe(&self, url: &str) -> bool {
        let endpoint = url.trim_end_matches('/').trim_end_matches("/health");
        self.lookup(endpoint).is_some_and(|s| s.is_healthy())
    }
}

/// Fills in a fixture descriptor whose endpoint is a path, resolving it
/// against `base_url`.
pub fn resolve_endpoint(desc: &mut ToolDescriptor, base_url: &str) {
    if desc.endpoint.starts_with('/') {
        desc.endpoint = format!("{}{}", base_url.trim_end_matches('/'), desc.endpoint);
    }
}
