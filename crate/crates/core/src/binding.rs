//! Parameter templates attached to plan steps.
//!
//! A template is a JSON object mapping parameter names to values. String
//! values may contain `{context.path}` placeholders; a string consisting of a
//! single placeholder is replaced by the referenced value as-is, otherwise
//! each placeholder is substituted as text. Keys starting with `$` are
//! directives rather than parameters:
//!
//! * `$each`: name of a context list; the tool is invoked once per element
//!   with `item` and `index` exposed in the context.
//! * `$keep_if`: condition evaluated per element over `item`, `index` and the
//!   element's result fields; only elements that satisfy it are kept.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::{Map, Value};

use crate::expr::{resolve_path, ExprError};

pub const EACH: &str = "$each";
pub const KEEP_IF: &str = "$keep_if";

/// Context keys visible to steps that iterate.
pub const ITEM_KEY: &str = "item";
pub const INDEX_KEY: &str = "index";

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\{context\.([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)\}")
            .expect("static regex")
    })
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BindError {
    #[error("binding `{param}`: {source}")]
    Resolve {
        param: String,
        #[source]
        source: ExprError,
    },
    #[error("directive `{0}` must be a string")]
    BadDirective(String),
}

impl BindError {
    /// The context key whose absence caused the failure, if that was the cause.
    pub fn missing_key(&self) -> Option<&str> {
        match self {
            BindError::Resolve {
                source: ExprError::MissingKey(k),
                ..
            } => Some(k.split('.').next().unwrap_or(k)),
            _ => None,
        }
    }
}

/// Splits a template into parameter entries and directives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Template {
    pub params: Map<String, Value>,
    pub each: Option<String>,
    pub keep_if: Option<String>,
}

impl Template {
    pub fn from_binding(binding: &Map<String, Value>) -> Result<Template, BindError> {
        let mut t = Template::default();
        for (k, v) in binding {
            match k.as_str() {
                EACH => t.each = Some(directive_str(k, v)?),
                KEEP_IF => t.keep_if = Some(directive_str(k, v)?),
                _ if k.starts_with('$') => return Err(BindError::BadDirective(k.clone())),
                _ => {
                    t.params.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(t)
    }

    /// Root context keys referenced by parameter placeholders.
    pub fn referenced_roots(&self) -> Vec<String> {
        let mut out = Vec::new();
        for v in self.params.values() {
            collect_paths(v, &mut |path| {
                let root = path.split('.').next().unwrap_or(path).to_string();
                if !out.contains(&root) {
                    out.push(root);
                }
            });
        }
        out
    }
}

fn directive_str(key: &str, v: &Value) -> Result<String, BindError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| BindError::BadDirective(key.to_string()))
}

fn collect_paths(v: &Value, f: &mut impl FnMut(&str)) {
    match v {
        Value::String(s) => {
            for cap in placeholder_re().captures_iter(s) {
                f(cap.get(1).expect("group 1").as_str());
            }
        }
        Value::Array(items) => items.iter().for_each(|i| collect_paths(i, f)),
        Value::Object(map) => map.values().for_each(|i| collect_paths(i, f)),
        _ => {}
    }
}

/// Builds a placeholder referencing a context path.
pub fn placeholder(path: &str) -> String {
    format!("{{context.{path}}}")
}

/// If `s` is exactly one placeholder, returns its path.
pub fn sole_placeholder(s: &str) -> Option<&str> {
    let caps = placeholder_re().captures(s)?;
    let whole = caps.get(0)?;
    (whole.start() == 0 && whole.end() == s.len()).then(|| caps.get(1).expect("group 1").as_str())
}

fn split_path(path: &str) -> Vec<String> {
    path.split('.').map(str::to_string).collect()
}

/// Substitutes placeholders in `value` against `scope`.
pub fn render(param: &str, value: &Value, scope: &Map<String, Value>) -> Result<Value, BindError> {
    let wrap = |source| BindError::Resolve {
        param: param.to_string(),
        source,
    };
    match value {
        Value::String(s) => {
            if let Some(path) = sole_placeholder(s) {
                return resolve_path(scope, &split_path(path)).map_err(wrap);
            }
            let mut out = String::with_capacity(s.len());
            let mut last = 0;
            for cap in placeholder_re().captures_iter(s) {
                let whole = cap.get(0).expect("group 0");
                out.push_str(&s[last..whole.start()]);
                let resolved = resolve_path(scope, &split_path(&cap[1])).map_err(wrap)?;
                match resolved {
                    Value::String(text) => out.push_str(&text),
                    other => out.push_str(&other.to_string()),
                }
                last = whole.end();
            }
            out.push_str(&s[last..]);
            Ok(Value::String(out))
        }
        Value::Array(items) => items
            .iter()
            .map(|i| render(param, i, scope))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array),
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| render(param, v, scope).map(|r| (k.clone(), r)))
            .collect::<Result<Map<_, _>, _>>()
            .map(Value::Object),
        other => Ok(other.clone()),
    }
}
