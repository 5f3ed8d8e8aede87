//! C ABI over the recommendation engine: opaque handles, UTF-8 JSON strings,
//! and integer status codes. Every entry point is panic-safe; failures leave
//! a thread-local status and message readable via `mr_last_status` /
//! `mr_last_error_message`. Strings returned by this library are owned by
//! the caller and must be released with `mr_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use motiverec_core::pipeline::{build_gateway, Artifacts, BackendChoice, Engine};
use motiverec_core::{validate_config, Error, PipelineConfig};

/// Result discriminant shared by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrStatus {
    MrOk = 0,
    MrInvalidArgument = 1,
    MrNotFound = 2,
    MrIo = 3,
    MrInternal = 4,
}

/// Text/embedding backend selector for `mr_engine_open`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrBackend {
    /// Deterministic in-process backend; no network.
    MrBackendMock = 0,
    /// HTTP backend configured through MOTIVEREC_* environment variables.
    MrBackendHttp = 1,
}

/// Opaque engine handle; create with `mr_engine_open`, release with
/// `mr_engine_close`.
pub struct MrEngine {
    inner: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<(MrStatus, Option<CString>)> =
        const { RefCell::new((MrStatus::MrOk, None)) };
}

fn set_error(status: MrStatus, message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = (status, Some(text)));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = (MrStatus::MrOk, None));
}

fn status_of(err: &Error) -> MrStatus {
    match err {
        Error::UnknownUser(_) => MrStatus::MrNotFound,
        Error::Io { .. } | Error::MissingArtifact { .. } => MrStatus::MrIo,
        Error::Format { .. }
        | Error::Config(_)
        | Error::Invalid(_)
        | Error::MissingColumn { .. }
        | Error::DimensionMismatch { .. } => MrStatus::MrInvalidArgument,
        _ => MrStatus::MrInternal,
    }
}

fn record(err: Error) {
    set_error(status_of(&err), &err.to_string());
}

/// Runs `body` with panics converted into `MrInternal`; `fallback` is the
/// value returned to C on panic.
fn guarded<T>(fallback: T, body: impl FnOnce() -> T) -> T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(value) => value,
        Err(_) => {
            set_error(MrStatus::MrInternal, "internal panic");
            fallback
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(ptr: *const c_char) -> Result<Option<&'a str>, ()> {
    if ptr.is_null() {
        return Ok(None);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Some(s)),
        Err(_) => {
            set_error(MrStatus::MrInvalidArgument, "argument is not valid UTF-8");
            Err(())
        }
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

fn parse_config(json: Option<&str>) -> Result<PipelineConfig, ()> {
    let cfg = match json {
        None => PipelineConfig::default(),
        Some(raw) => match serde_json::from_str(raw) {
            Ok(cfg) => cfg,
            Err(e) => {
                set_error(MrStatus::MrInvalidArgument, &format!("config parse: {e}"));
                return Err(());
            }
        },
    };
    if let Err(e) = validate_config(&cfg) {
        record(e);
        return Err(());
    }
    Ok(cfg)
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn mr_version_string() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Status of the most recent call on this thread.
#[no_mangle]
pub extern "C" fn mr_last_status() -> MrStatus {
    LAST_ERROR.with(|slot| slot.borrow().0)
}

/// Message for the most recent failure on this thread, or null when the last
/// call succeeded. The caller owns the string; release with `mr_string_free`.
#[no_mangle]
pub extern "C" fn mr_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &slot.borrow().1 {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn mr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Validates a JSON pipeline configuration (null means the defaults).
/// Returns `MR_OK` or `MR_INVALID_ARGUMENT` with the message available via
/// `mr_last_error_message`.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mr_config_validate(config_json: *const c_char) -> MrStatus {
    guarded(MrStatus::MrInternal, || {
        clear_error();
        let Ok(json) = (unsafe { opt_str(config_json) }) else {
            return MrStatus::MrInvalidArgument;
        };
        match parse_config(json) {
            Ok(_) => MrStatus::MrOk,
            Err(()) => mr_last_status(),
        }
    })
}

/// Opens an engine over a prepared artifact directory (the ingest, augment,
/// and annotate stages must have run). `config_json` may be null for the
/// default configuration; it must match the configuration the artifacts were
/// built with where dimensions matter. Returns null on failure.
///
/// # Safety
/// `config_json` and `artifacts_dir` must be null or valid NUL-terminated
/// strings; `artifacts_dir` must not be null.
#[no_mangle]
pub unsafe extern "C" fn mr_engine_open(
    config_json: *const c_char,
    artifacts_dir: *const c_char,
    backend: MrBackend,
    seed: u64,
    jobs: u32,
) -> *mut MrEngine {
    guarded(std::ptr::null_mut(), || {
        clear_error();
        let Ok(json) = (unsafe { opt_str(config_json) }) else {
            return std::ptr::null_mut();
        };
        let Ok(Some(dir)) = (unsafe { opt_str(artifacts_dir) }) else {
            set_error(MrStatus::MrInvalidArgument, "artifacts_dir must be a non-null path");
            return std::ptr::null_mut();
        };
        let Ok(cfg) = parse_config(json) else {
            return std::ptr::null_mut();
        };
        let choice = match backend {
            MrBackend::MrBackendMock => BackendChoice::Mock,
            MrBackend::MrBackendHttp => BackendChoice::Http,
        };
        let gateway = match build_gateway(choice, &cfg, seed, jobs.max(1) as usize) {
            Ok(gw) => Arc::new(gw),
            Err(e) => {
                record(e);
                return std::ptr::null_mut();
            }
        };
        match Engine::open(cfg, &Artifacts::new(Path::new(dir)), gateway) {
            Ok(inner) => Box::into_raw(Box::new(MrEngine { inner })),
            Err(e) => {
                record(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Recommends for one user; `query` is an optional explicit request. Returns
/// a JSON recommendation record (ranking, query plan, motive selection, and
/// per-iteration audits) or null on failure — an unknown user sets
/// `MR_NOT_FOUND`.
///
/// # Safety
/// `engine` must be a live handle from `mr_engine_open`; `user_id` must be a
/// valid NUL-terminated string; `query` may be null.
#[no_mangle]
pub unsafe extern "C" fn mr_engine_recommend_json(
    engine: *const MrEngine,
    user_id: *const c_char,
    query: *const c_char,
) -> *mut c_char {
    guarded(std::ptr::null_mut(), || {
        clear_error();
        let Some(engine) = (unsafe { engine.as_ref() }) else {
            set_error(MrStatus::MrInvalidArgument, "engine handle is null");
            return std::ptr::null_mut();
        };
        let Ok(Some(user)) = (unsafe { opt_str(user_id) }) else {
            set_error(MrStatus::MrInvalidArgument, "user_id must be a non-null string");
            return std::ptr::null_mut();
        };
        let Ok(query) = (unsafe { opt_str(query) }) else {
            return std::ptr::null_mut();
        };
        match engine.inner.recommend(user, query) {
            Ok(rec) => match serde_json::to_string(&rec) {
                Ok(json) => into_c_string(json),
                Err(e) => {
                    set_error(MrStatus::MrInternal, &format!("record serialization: {e}"));
                    std::ptr::null_mut()
                }
            },
            Err(e) => {
                record(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Runs batch recommendation over every user and scores it against the test
/// split. Returns the evaluation result as JSON (macro metrics keyed
/// `"recall@10"` style, per-user breakdown, population counts) or null on
/// failure.
///
/// # Safety
/// `engine` must be a live handle from `mr_engine_open`.
#[no_mangle]
pub unsafe extern "C" fn mr_engine_evaluate_json(engine: *const MrEngine) -> *mut c_char {
    guarded(std::ptr::null_mut(), || {
        clear_error();
        let Some(engine) = (unsafe { engine.as_ref() }) else {
            set_error(MrStatus::MrInvalidArgument, "engine handle is null");
            return std::ptr::null_mut();
        };
        let result = engine
            .inner
            .recommend_all()
            .and_then(|(records, _)| engine.inner.evaluate(&records));
        match result {
            Ok(eval) => match serde_json::to_string(&eval) {
                Ok(json) => into_c_string(json),
                Err(e) => {
                    set_error(MrStatus::MrInternal, &format!("result serialization: {e}"));
                    std::ptr::null_mut()
                }
            },
            Err(e) => {
                record(e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Releases an engine handle. Null is a no-op.
///
/// # Safety
/// `engine` must be null or a handle from `mr_engine_open` not yet closed.
#[no_mangle]
pub unsafe extern "C" fn mr_engine_close(engine: *mut MrEngine) {
    guarded((), || {
        if !engine.is_null() {
            drop(unsafe { Box::from_raw(engine) });
        }
    })
}
