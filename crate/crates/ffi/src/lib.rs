//! C ABI over an in-process capmesh stack.
//!
//! Handles are opaque. Every call returns a [`CapmeshStatus`]; on failure the
//! message is available from [`capmesh_last_error_message`] on the same thread.
//! Strings handed out by the library are freed with [`capmesh_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::time::Duration;

use capmesh::config::Config;
use capmesh::ports::DiscoverError;
use capmesh::registry::DiscoveryQuery;
use capmesh::scenario::Harness;
use capmesh::stack::{SeedBundle, Stack, StackOptions};
use tokio::runtime::Runtime;
use tokio::sync::watch;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapmeshStatus {
    Ok = 0,
    /// A null pointer, invalid UTF-8 or malformed JSON argument.
    InvalidArgument = 1,
    /// The named task, directory or scenario does not exist.
    NotFound = 2,
    /// Discovery found no tool scoring above the threshold.
    NoTool = 3,
    /// The task produced no result in time.
    Timeout = 4,
    /// The runtime reported an error; see the last error message.
    Failed = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// A stack, the runtime that drives it and its broker heartbeat loop.
pub struct CapmeshStack {
    runtime: Runtime,
    stack: Stack,
    stop: watch::Sender<bool>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

type Outcome = Result<(), (CapmeshStatus, String)>;

fn fail<T>(
    status: CapmeshStatus,
    msg: impl std::fmt::Display,
) -> Result<T, (CapmeshStatus, String)> {
    Err((status, msg.to_string()))
}

/// Runs `f`, recording its error and turning panics into a status.
fn guard(f: impl FnOnce() -> Outcome) -> CapmeshStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CapmeshStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CapmeshStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CapmeshStatus, String)> {
    if p.is_null() {
        return fail(CapmeshStatus::InvalidArgument, format!("{what} is null"));
    }
    CStr::from_ptr(p).to_str().or_else(|_| {
        fail(
            CapmeshStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn handle<'a>(p: *const CapmeshStack) -> Result<&'a CapmeshStack, (CapmeshStatus, String)> {
    p.as_ref().ok_or_else(|| {
        (
            CapmeshStatus::InvalidArgument,
            "stack handle is null".to_string(),
        )
    })
}

unsafe fn hand_out(out: *mut *mut c_char, s: String) -> Outcome {
    if out.is_null() {
        return fail(CapmeshStatus::InvalidArgument, "output pointer is null");
    }
    let c =
        CString::new(s).or_else(|_| fail(CapmeshStatus::Failed, "output contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

fn runtime() -> Result<Runtime, (CapmeshStatus, String)> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .or_else(|e| fail(CapmeshStatus::Failed, format!("runtime: {e}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn capmesh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn capmesh_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn capmesh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an in-process stack from a TOML configuration, or the shipped one
/// when `config_path` is null.
///
/// # Safety
/// `config_path` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_stack_new(
    config_path: *const c_char,
    out: *mut *mut CapmeshStack,
) -> CapmeshStatus {
    guard(|| {
        if out.is_null() {
            return fail(CapmeshStatus::InvalidArgument, "output pointer is null");
        }
        let config = if config_path.is_null() {
            Config::shipped()
        } else {
            let path = text(config_path, "config_path")?;
            Config::load(Path::new(path)).or_else(|e| fail(CapmeshStatus::InvalidArgument, e))?
        };
        let runtime = runtime()?;
        let stack = runtime
            .block_on(async { Stack::in_process(config, StackOptions::default()) })
            .or_else(|e| fail(CapmeshStatus::Failed, e))?;
        let (stop, rx) = watch::channel(false);
        runtime.spawn(std::sync::Arc::clone(&stack.broker).run(rx));
        *out = Box::into_raw(Box::new(CapmeshStack {
            runtime,
            stack,
            stop,
        }));
        Ok(())
    })
}

/// Stops the stack and releases it. Null is ignored.
///
/// # Safety
/// `stack` comes from [`capmesh_stack_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capmesh_stack_free(stack: *mut CapmeshStack) {
    if stack.is_null() {
        return;
    }
    let _ = catch_unwind(AssertUnwindSafe(|| {
        let s = Box::from_raw(stack);
        let _ = s.stop.send(true);
        let CapmeshStack { runtime, stack, .. } = *s;
        drop(stack);
        runtime.shutdown_timeout(Duration::from_secs(1));
    }));
}

/// Seeds the shipped demo fixtures, or the seed directory at `dir` when it is
/// not null. Writes the item counts as JSON to `out_json` when not null.
///
/// # Safety
/// `stack` is a live handle; `dir` is null or NUL-terminated; `out_json` is
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_seed(
    stack: *const CapmeshStack,
    dir: *const c_char,
    out_json: *mut *mut c_char,
) -> CapmeshStatus {
    guard(|| {
        let h = handle(stack)?;
        let bundle = if dir.is_null() {
            SeedBundle::demo()
        } else {
            let dir = Path::new(text(dir, "dir")?);
            if !dir.is_dir() {
                return fail(
                    CapmeshStatus::NotFound,
                    format!("{} is not a directory", dir.display()),
                );
            }
            SeedBundle::from_dir(dir).or_else(|e| fail(CapmeshStatus::InvalidArgument, e))?
        };
        let counts = h
            .runtime
            .block_on(h.stack.seed(&bundle))
            .or_else(|e| fail(CapmeshStatus::Failed, e))?;
        if out_json.is_null() {
            return Ok(());
        }
        hand_out(
            out_json,
            serde_json::to_string(&counts).expect("counts serialize"),
        )
    })
}

/// Submits a free-text request; writes the new task id to `out_task_id`.
///
/// # Safety
/// `stack` is a live handle; `user_id` and `request` are NUL-terminated;
/// `out_task_id` is writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_submit(
    stack: *const CapmeshStack,
    user_id: *const c_char,
    request: *const c_char,
    out_task_id: *mut *mut c_char,
) -> CapmeshStatus {
    guard(|| {
        let h = handle(stack)?;
        let user = text(user_id, "user_id")?;
        let body = text(request, "request")?;
        let id = h
            .runtime
            .block_on(h.stack.submit(user, body))
            .or_else(|e| match e {
                capmesh::reception::ReceptionError::EmptyRequest => {
                    fail(CapmeshStatus::InvalidArgument, e)
                }
                other => fail(CapmeshStatus::Failed, other),
            })?;
        hand_out(out_task_id, id)
    })
}

/// Waits up to `timeout_ms` for the task result; writes it as JSON.
///
/// # Safety
/// `stack` is a live handle; `task_id` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_wait_result(
    stack: *const CapmeshStack,
    task_id: *const c_char,
    timeout_ms: u64,
    out_json: *mut *mut c_char,
) -> CapmeshStatus {
    guard(|| {
        let h = handle(stack)?;
        let id = text(task_id, "task_id")?;
        let rt = &h.runtime;
        let result = rt
            .block_on(
                h.stack
                    .reception
                    .wait_result(id, Duration::from_millis(timeout_ms)),
            )
            .or_else(|e| fail(CapmeshStatus::NotFound, e))?;
        match result {
            Some(r) => hand_out(
                out_json,
                serde_json::to_string(&r).expect("results serialize"),
            ),
            None => fail(
                CapmeshStatus::Timeout,
                format!("task `{id}` has no result after {timeout_ms} ms"),
            ),
        }
    })
}

/// Runs a discovery query given as JSON; writes the result as JSON.
///
/// # Safety
/// `stack` is a live handle; `query_json` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_discover(
    stack: *const CapmeshStack,
    query_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CapmeshStatus {
    guard(|| {
        let h = handle(stack)?;
        let query: DiscoveryQuery = serde_json::from_str(text(query_json, "query_json")?)
            .or_else(|e| fail(CapmeshStatus::InvalidArgument, format!("query: {e}")))?;
        let found = h
            .runtime
            .block_on(h.stack.registry.discover(&query))
            .or_else(|e| match e {
                DiscoverError::NoToolFound { .. } => fail(CapmeshStatus::NoTool, e),
                other => fail(CapmeshStatus::Failed, other),
            })?;
        hand_out(
            out_json,
            serde_json::to_string(&found).expect("results serialize"),
        )
    })
}

/// Replays demo scenario `n` (1 to 3) on a fresh stack with a mock clock and
/// writes its normalized transcript.
///
/// # Safety
/// `out_transcript` is writable.
#[no_mangle]
pub unsafe extern "C" fn capmesh_run_scenario(
    n: u8,
    out_transcript: *mut *mut c_char,
) -> CapmeshStatus {
    guard(|| {
        if !(1..=3).contains(&n) {
            return fail(CapmeshStatus::NotFound, format!("no scenario {n}"));
        }
        let rt = runtime()?;
        let transcript = rt.block_on(async {
            let mut h = Harness::demo(Config::shipped(), StackOptions::default()).await?;
            h.run(n).await.map(|r| r.transcript.normalized())
        });
        hand_out(
            out_transcript,
            transcript.or_else(|e| fail(CapmeshStatus::Failed, e))?,
        )
    })
}
