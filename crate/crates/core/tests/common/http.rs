//! A served stack on ephemeral ports, driven only through its HTTP interfaces.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use reqwest::Method;
use serde_json::{json, Value};

use capmesh::config::{Config, ServicesConfig, SERVICE_NAMES};
use capmesh::scenario::{DEMO_USER, TRAVEL_METHODOLOGY, TRAVEL_QUERY, WEATHER_EXPERT};
use capmesh::stack::{seed_remote, SeedBundle, Stack, StackOptions};

use super::oracle::read_text;
use super::{ctx, ensure};

pub struct HttpDemo {
    pub stack: Stack,
    pub urls: BTreeMap<String, String>,
    client: reqwest::Client,
}

/// Status and JSON body of one call.
#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl HttpDemo {
    /// Boots every service on a free port without seeding.
    pub async fn boot_empty() -> Result<HttpDemo, String> {
        let config = Config {
            services: ServicesConfig::ephemeral(),
            ..Config::shipped()
        };
        let stack = ctx(Stack::serve(config, StackOptions::default()).await, "boot")?;
        let urls = SERVICE_NAMES
            .iter()
            .copied()
            .chain(["tools"])
            .map(|n| (n.to_string(), stack.url(n).expect("served url").to_string()))
            .collect();
        Ok(HttpDemo {
            stack,
            urls,
            client: reqwest::Client::new(),
        })
    }

    /// Boots and seeds the demo fixtures over HTTP.
    pub async fn boot() -> Result<HttpDemo, String> {
        let demo = Self::boot_empty().await?;
        ctx(
            seed_remote(&demo.urls, &demo.urls["tools"], &SeedBundle::demo()).await,
            "seed",
        )?;
        Ok(demo)
    }

    pub async fn call(
        &self,
        method: Method,
        service: &str,
        path: &str,
        body: Option<Value>,
    ) -> Reply {
        let url = format!("{}{path}", self.urls[service]);
        let mut req = self.client.request(method.clone(), &url);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req
            .send()
            .await
            .unwrap_or_else(|e| panic!("{method} {url}: {e}"));
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Reply { status, body }
    }

    pub async fn get(&self, service: &str, path: &str) -> Reply {
        self.call(Method::GET, service, path, None).await
    }

    pub async fn post(&self, service: &str, path: &str, body: Value) -> Reply {
        self.call(Method::POST, service, path, Some(body)).await
    }

    pub async fn put(&self, service: &str, path: &str, body: Value) -> Reply {
        self.call(Method::PUT, service, path, Some(body)).await
    }

    pub async fn delete(&self, service: &str, path: &str) -> Reply {
        self.call(Method::DELETE, service, path, None).await
    }

    /// Polls the task until it leaves `pending`.
    pub async fn wait_task(&self, task_id: &str, timeout: Duration) -> Result<Value, String> {
        let deadline = Instant::now() + timeout;
        loop {
            let r = self.get("reception", &format!("/tasks/{task_id}")).await;
            ensure(r.status == 200, || {
                format!("task status {}: {}", r.status, r.body)
            })?;
            if r.body["status"] != "pending" {
                return Ok(r.body);
            }
            if Instant::now() >= deadline {
                return Err(format!("task {task_id} still pending after {timeout:?}"));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
    }

    /// Submits the travel query; returns the task result and its instance.
    pub async fn ask(&self) -> Result<(Value, Value), String> {
        let r = self
            .post(
                "reception",
                "/requests",
                json!({"user_id": DEMO_USER, "text": TRAVEL_QUERY}),
            )
            .await;
        ensure(r.status == 202, || {
            format!("submit answered {}: {}", r.status, r.body)
        })?;
        let task_id = r.body["task_id"].as_str().ok_or("no task_id")?.to_string();
        let result = self.wait_task(&task_id, Duration::from_secs(10)).await?;
        let instance_id = result["trace_ref"].as_str().ok_or("no trace_ref")?;
        let inst = self
            .get("workflow", &format!("/instances/{instance_id}"))
            .await;
        ensure(inst.status == 200, || {
            format!("instance lookup answered {}", inst.status)
        })?;
        Ok((result, inst.body))
    }

    pub async fn insert_weather_step(&self) -> Result<Value, String> {
        let mut edit: Value = ctx(
            serde_json::from_str(&read_text("fixtures/scenarios/weather-step.json")),
            "weather step fixture",
        )?;
        edit["expert_id"] = json!(WEATHER_EXPERT);
        let r = self
            .post(
                "methodology",
                &format!("/methodologies/{TRAVEL_METHODOLOGY}/steps"),
                edit,
            )
            .await;
        ensure(r.status / 100 == 2, || {
            format!("insert step answered {}: {}", r.status, r.body)
        })?;
        Ok(r.body)
    }

    pub async fn register_weather_tool(&self) -> Result<(), String> {
        let mut desc: Value = ctx(
            serde_json::from_str(&read_text("fixtures/scenarios/weather-tool.json")),
            "weather tool fixture",
        )?;
        let path = desc["endpoint"].as_str().unwrap_or_default().to_string();
        desc["endpoint"] = json!(format!("{}{path}", self.urls["tools"]));
        let r = self
            .post("broker", "/services", json!({ "descriptor": desc }))
            .await;
        ensure(r.status == 201, || {
            format!("add service answered {}: {}", r.status, r.body)
        })?;
        let r = self
            .post("broker", "/services/weather-forecast/register", json!({}))
            .await;
        ensure(r.status == 200, || {
            format!("register answered {}: {}", r.status, r.body)
        })?;
        Ok(())
    }

    pub async fn shutdown(mut self) {
        self.stack.shutdown().await;
    }
}

/// Top-level plan steps paired with their recorded state.
pub fn top_level(instance: &Value) -> Vec<(Value, Value)> {
    let steps = instance["plan"]["steps"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let states = instance["step_states"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    steps
        .into_iter()
        .map(|s| {
            let state = states
                .iter()
                .find(|st| st["step_ref"] == s["step_id"])
                .cloned()
                .unwrap_or(Value::Null);
            (s, state)
        })
        .collect()
}
