//! C ABI for the dflow numerical laboratory.
//!
//! Handles are opaque pointers created and destroyed by this library; every
//! entry point returns a `DflowStatus` and writes results through out
//! pointers. Strings returned through `char **` are owned by the caller and
//! must be released with `dflow_string_free`. On any non-Ok status a
//! human-readable message is retrievable with `dflow_last_error`.
//!
//! The header `include/dflow.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dflow::geometry::{minimize_d, snapshot, FlowSpec};
use dflow::scenario::{build_flow, parse_scenario, run_scenario, run_trace, summary_table};
use dflow::DflowError;

/// Result code of every ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DflowStatus {
    Ok = 0,
    /// A null pointer, malformed UTF-8, or otherwise unusable argument.
    InvalidArgument = 1,
    /// The configuration document did not parse or validate.
    ParseError = 2,
    /// Inputs were structurally fine but outside the mathematical domain.
    DomainError = 3,
    /// A linear solve or iteration failed numerically.
    NumericalError = 4,
    /// A panic or other unexpected failure inside the library.
    InternalError = 5,
}

/// Opaque flow handle (a validated model flow).
pub struct DflowFlow {
    inner: FlowSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = Some(CString::new(cleaned).unwrap());
    });
}

fn status_of(err: &DflowError) -> DflowStatus {
    match err {
        DflowError::Parse(_) => DflowStatus::ParseError,
        DflowError::Domain(_) | DflowError::InvalidFlow(_) | DflowError::Parameter(_) => {
            DflowStatus::DomainError
        }
        DflowError::Numerical(_)
        | DflowError::Infeasible(_)
        | DflowError::InsufficientResolution(_) => DflowStatus::NumericalError,
        _ => DflowStatus::InternalError,
    }
}

/// Run `f` with panics converted to `InternalError`.
fn guarded(f: impl FnOnce() -> DflowStatus) -> DflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in dflow".into());
            set_error(&msg);
            DflowStatus::InternalError
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or null.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, DflowStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(DflowStatus::InvalidArgument);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        DflowStatus::InvalidArgument
    })
}

fn give_string(s: String, out: *mut *mut c_char) -> DflowStatus {
    let cleaned: String = s.chars().filter(|&c| c != '\0').collect();
    let c = CString::new(cleaned).unwrap();
    unsafe { *out = c.into_raw() };
    DflowStatus::Ok
}

/// Message of the most recent error on this thread, or null if none.
/// The returned string is owned by the caller; free with `dflow_string_free`.
#[no_mangle]
pub extern "C" fn dflow_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Release a string returned by this library. Null is allowed.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn dflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Build a flow from the JSON `flow` block of a scenario document, e.g.
/// `{"family":"sphere","dimension":2,"r_sq":"1 - 2*t","interval":[0,0.2]}`.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_flow_from_json(
    json: *const c_char,
    out: *mut *mut DflowFlow,
) -> DflowStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return DflowStatus::InvalidArgument;
        }
        let text = match unsafe { read_str(json) } {
            Ok(t) => t,
            Err(st) => return st,
        };
        let block = match serde_json::from_str(text) {
            Ok(b) => b,
            Err(e) => {
                set_error(&format!("flow block: {e}"));
                return DflowStatus::ParseError;
            }
        };
        match build_flow(&block) {
            Ok(flow) => {
                unsafe { *out = Box::into_raw(Box::new(DflowFlow { inner: flow })) };
                DflowStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a flow handle. Null is allowed.
///
/// # Safety
/// `flow` must have been returned by `dflow_flow_from_json` and not freed.
#[no_mangle]
pub unsafe extern "C" fn dflow_flow_free(flow: *mut DflowFlow) {
    if !flow.is_null() {
        drop(unsafe { Box::from_raw(flow) });
    }
}

/// Manifold dimension of the flow.
///
/// # Safety
/// `flow` must be a live handle; `out` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_flow_dimension(
    flow: *const DflowFlow,
    out: *mut usize,
) -> DflowStatus {
    guarded(|| {
        if flow.is_null() || out.is_null() {
            set_error("null pointer argument");
            return DflowStatus::InvalidArgument;
        }
        unsafe { *out = (*flow).inner.dimension() };
        DflowStatus::Ok
    })
}

/// Time interval of the flow, in its own time convention.
///
/// # Safety
/// `flow` must be a live handle; `lo` and `hi` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_flow_interval(
    flow: *const DflowFlow,
    lo: *mut f64,
    hi: *mut f64,
) -> DflowStatus {
    guarded(|| {
        if flow.is_null() || lo.is_null() || hi.is_null() {
            set_error("null pointer argument");
            return DflowStatus::InvalidArgument;
        }
        let (a, b) = unsafe { (*flow).inner.interval };
        unsafe {
            *lo = a;
            *hi = b;
        }
        DflowStatus::Ok
    })
}

/// Pointwise infimum of the D-form over directions at `(t, x)`. Writes the
/// minimum to `out_min` and whether it is finite to `out_finite`; an
/// unbounded-below form reports `out_finite = false` and `out_min = -inf`.
/// `t` is in the flow's own time convention; `x` is the angular coordinate
/// and ignored on homogeneous flows.
///
/// # Safety
/// `flow` must be a live handle; `out_min` and `out_finite` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_flow_min_d(
    flow: *const DflowFlow,
    t: f64,
    x: f64,
    out_min: *mut f64,
    out_finite: *mut bool,
) -> DflowStatus {
    guarded(|| {
        if flow.is_null() || out_min.is_null() || out_finite.is_null() {
            set_error("null pointer argument");
            return DflowStatus::InvalidArgument;
        }
        let snap = match snapshot(unsafe { &(*flow).inner }, t, x) {
            Ok(s) => s,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let min = minimize_d(&snap);
        unsafe {
            match min.min_value {
                Some(v) => {
                    *out_min = v;
                    *out_finite = true;
                }
                None => {
                    *out_min = f64::NEG_INFINITY;
                    *out_finite = false;
                }
            }
        }
        DflowStatus::Ok
    })
}

/// Run every check of a scenario document. On success writes the reports as
/// a JSON array to `out_reports` (caller-owned) and the batch verdict to
/// `out_exit_code`: 0 all passed, 1 some check failed, 2 passed but some
/// margin was inside tolerance. `parallel` <= 1 runs serially.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out_reports` and
/// `out_exit_code` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_scenario_run(
    config_json: *const c_char,
    parallel: i32,
    out_reports: *mut *mut c_char,
    out_exit_code: *mut i32,
) -> DflowStatus {
    guarded(|| {
        if out_reports.is_null() || out_exit_code.is_null() {
            set_error("null out pointer");
            return DflowStatus::InvalidArgument;
        }
        let text = match unsafe { read_str(config_json) } {
            Ok(t) => t,
            Err(st) => return st,
        };
        let config = match parse_scenario(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let workers = if parallel > 1 {
            Some(parallel as usize)
        } else {
            None
        };
        match run_scenario(&config, workers) {
            Ok(outcome) => {
                let json = serde_json::to_string_pretty(&outcome.reports)
                    .expect("reports serialize");
                unsafe { *out_exit_code = outcome.exit_code };
                give_string(json, out_reports)
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Plain-text summary table for a scenario run (same layout as the CLI).
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string; `out_table` must be
/// non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_scenario_summary(
    config_json: *const c_char,
    out_table: *mut *mut c_char,
) -> DflowStatus {
    guarded(|| {
        if out_table.is_null() {
            set_error("null out pointer");
            return DflowStatus::InvalidArgument;
        }
        let text = match unsafe { read_str(config_json) } {
            Ok(t) => t,
            Err(st) => return st,
        };
        let config = match parse_scenario(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match run_scenario(&config, None) {
            Ok(outcome) => give_string(summary_table(&outcome.reports), out_table),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Trace a monotone functional along the scenario's flow and return
/// `tau,value` CSV. `functional` is one of `"f"`, `"w"`, `"entropy"`.
///
/// # Safety
/// `config_json` and `functional` must be valid NUL-terminated strings;
/// `out_csv` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn dflow_trace_csv(
    config_json: *const c_char,
    functional: *const c_char,
    out_csv: *mut *mut c_char,
) -> DflowStatus {
    guarded(|| {
        if out_csv.is_null() {
            set_error("null out pointer");
            return DflowStatus::InvalidArgument;
        }
        let text = match unsafe { read_str(config_json) } {
            Ok(t) => t,
            Err(st) => return st,
        };
        let which = match unsafe { read_str(functional) } {
            Ok(t) => t,
            Err(st) => return st,
        };
        let kind = match which {
            "f" | "F" => dflow::functionals::FunctionalKind::F,
            "w" | "W" => dflow::functionals::FunctionalKind::W,
            "entropy" => dflow::functionals::FunctionalKind::Entropy,
            other => {
                set_error(&format!(
                    "unknown functional {other:?} (expected f, w, or entropy)"
                ));
                return DflowStatus::InvalidArgument;
            }
        };
        let config = match parse_scenario(text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match run_trace(&config, kind) {
            Ok(trace) => {
                let mut csv = String::from("tau,value\n");
                for (tau, value) in trace.taus.iter().zip(&trace.values) {
                    csv.push_str(&format!("{tau:.12e},{value:.12e}\n"));
                }
                give_string(csv, out_csv)
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
