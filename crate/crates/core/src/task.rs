//! Request, task and result records exchanged between reception and the workflow engine.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const UNKNOWN_INTENT: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRequest {
    pub request_id: String,
    pub user_id: String,
    pub text: String,
    pub submitted_at: DateTime<Utc>,
}

/// Normalized form of a user request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredTask {
    pub task_id: String,
    pub request_id: String,
    /// Owner of the request; profile lookups read the `user:{user_id}` namespace.
    pub user_id: String,
    pub intent: String,
    #[serde(default)]
    pub entities: BTreeMap<String, String>,
    #[serde(default)]
    pub constraints: Vec<String>,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Completed,
    Failed,
    NeedsTool,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Completed => "completed",
            TaskStatus::Failed => "failed",
            TaskStatus::NeedsTool => "needs_tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub status: TaskStatus,
    pub summary: String,
    pub payload: Value,
    pub trace_ref: String,
}

impl TaskResult {
    /// Titles of steps that found no tool, read from a `needs_tool` payload.
    pub fn unmet_steps(&self) -> Vec<String> {
        self.payload
            .get("unmet_steps")
            .and_then(Value::as_array)
            .map(|steps| {
                steps
                    .iter()
                    .filter_map(|s| s.get("title").and_then(Value::as_str).map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    }
}
