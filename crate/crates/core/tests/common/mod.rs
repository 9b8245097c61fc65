//! Shared support for the integration tests and the acceptance report.
//!
//! Every `criterion_*` function checks one acceptance criterion and returns a
//! one-line detail on success or the reason it failed.

#![allow(dead_code)]

pub mod discovery;
pub mod http;
pub mod oracle;
pub mod plans;
pub mod scenarios;

pub type Outcome = Result<String, String>;

/// Turns any displayable error into a failure message with context.
pub fn ctx<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Current-thread runtime for the synchronous property checks.
pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}
