//! C ABI for the valley-filling simulator.
//!
//! Scenarios and run reports are opaque handles; every call returns a
//! `VfStatus` and leaves a human-readable message for `vf_last_error_message`
//! on failure. All pointers handed out by this library are freed by the
//! matching `vf_*_free` function, strings by `vf_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use libc::c_char;

use vfill::engine::EngineError;
use vfill::metrics::{self, RunReport};
use vfill::scenario::{self, ResolvedScenario, ScenarioConfig, ScenarioError};

/// Result codes of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ValidationError = 4,
    SolverDivergence = 5,
    RuntimeError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_for(err: &ScenarioError) -> VfStatus {
    match err {
        ScenarioError::Io { .. } | ScenarioError::Parse { .. } => VfStatus::ParseError,
        ScenarioError::Validation(_) => VfStatus::ValidationError,
        ScenarioError::Engine(EngineError::NumericalDivergence { .. }) => {
            VfStatus::SolverDivergence
        }
        _ => VfStatus::RuntimeError,
    }
}

/// Opaque handle: a loaded, validated, resolved scenario.
pub struct VfScenario {
    resolved: ResolvedScenario,
}

/// Opaque handle: the report of a finished run.
pub struct VfReport {
    report: RunReport,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, VfStatus> {
    if ptr.is_null() {
        set_error("null string argument".into());
        return Err(VfStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8".into());
        VfStatus::InvalidUtf8
    })
}

fn guard<F: FnOnce() -> VfStatus>(f: F) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic".into());
            VfStatus::RuntimeError
        }
    }
}

fn load_scenario(config: ScenarioConfig, base: &Path) -> Result<VfScenario, VfStatus> {
    let validation = scenario::validate(&config, base);
    if !validation.is_valid() {
        let summary: Vec<String> = validation
            .diagnostics
            .iter()
            .map(|d| format!("[{}] {}", d.code, d.message))
            .collect();
        set_error(summary.join("; "));
        return Err(VfStatus::ValidationError);
    }
    match scenario::resolve(&config, base) {
        Ok(resolved) => Ok(VfScenario { resolved }),
        Err(e) => {
            set_error(e.to_string());
            Err(status_for(&e))
        }
    }
}

/// Loads and validates a scenario file. On success writes a new handle to
/// `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; the
/// returned handle must be released with `vf_scenario_free`.
#[no_mangle]
pub unsafe extern "C" fn vf_scenario_load(
    path: *const c_char,
    out: *mut *mut VfScenario,
) -> VfStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return VfStatus::NullArgument;
        }
        let path = match cstr_arg(path) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        let (config, base) = match ScenarioConfig::load(&path) {
            Ok(loaded) => loaded,
            Err(e) => {
                set_error(e.to_string());
                return status_for(&e);
            }
        };
        match load_scenario(config, &base) {
            Ok(handle) => {
                *out = Box::into_raw(Box::new(handle));
                VfStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Parses a scenario from a JSON string; `base_dir` anchors relative paths.
///
/// # Safety
/// `json` and `base_dir` must be NUL-terminated strings, `out` a valid
/// pointer; the returned handle must be released with `vf_scenario_free`.
#[no_mangle]
pub unsafe extern "C" fn vf_scenario_from_json(
    json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut VfScenario,
) -> VfStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer".into());
            return VfStatus::NullArgument;
        }
        let json = match cstr_arg(json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let base = match cstr_arg(base_dir) {
            Ok(s) => PathBuf::from(s),
            Err(status) => return status,
        };
        let config = match ScenarioConfig::from_json(json) {
            Ok(c) => c,
            Err(e) => {
                set_error(e.to_string());
                return VfStatus::ParseError;
            }
        };
        match load_scenario(config, &base) {
            Ok(handle) => {
                *out = Box::into_raw(Box::new(handle));
                VfStatus::Ok
            }
            Err(status) => status,
        }
    })
}

/// Number of EV agents in the scenario's fleet.
///
/// # Safety
/// `scenario` must be a live handle from a `vf_scenario_*` constructor.
#[no_mangle]
pub unsafe extern "C" fn vf_scenario_agent_count(scenario: *const VfScenario) -> usize {
    if scenario.is_null() {
        return 0;
    }
    (*scenario).resolved.fleet.len()
}

/// Runs a scenario to convergence and writes a new report handle to `out`.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer; the returned
/// report must be released with `vf_report_free`.
#[no_mangle]
pub unsafe extern "C" fn vf_run(
    scenario: *const VfScenario,
    out: *mut *mut VfReport,
) -> VfStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            set_error("null argument".into());
            return VfStatus::NullArgument;
        }
        match scenario::run(&(*scenario).resolved) {
            Ok((report, _outcome)) => {
                *out = Box::into_raw(Box::new(VfReport { report }));
                VfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_for(&e)
            }
        }
    })
}

/// Serializes a report as JSON; the string is owned by the caller and freed
/// with `vf_string_free`.
///
/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_report_to_json(
    report: *const VfReport,
    out: *mut *mut c_char,
) -> VfStatus {
    guard(|| {
        if report.is_null() || out.is_null() {
            set_error("null argument".into());
            return VfStatus::NullArgument;
        }
        let json = (*report).report.to_json();
        match CString::new(json) {
            Ok(c) => {
                *out = c.into_raw();
                VfStatus::Ok
            }
            Err(_) => {
                set_error("report JSON contains interior NUL".into());
                VfStatus::RuntimeError
            }
        }
    })
}

/// 1 when the run stopped by tolerance, 0 at the iteration cap.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_report_converged(report: *const VfReport) -> i32 {
    if report.is_null() {
        return 0;
    }
    i32::from((*report).report.converged)
}

/// Iterations used by the run.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_report_iterations(report: *const VfReport) -> u64 {
    if report.is_null() {
        return 0;
    }
    (*report).report.iterations as u64
}

/// Final objective value.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_report_objective(report: *const VfReport) -> f64 {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.objective
}

/// Smallest reported voltage magnitude, p.u.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vf_report_min_voltage(report: *const VfReport) -> f64 {
    if report.is_null() {
        return f64::NAN;
    }
    (*report).report.min_voltage_pu
}

/// Stealthiness indicator ζ between two runs of the same scenario shape.
///
/// # Safety
/// `a` and `b` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vf_report_zeta(
    a: *const VfReport,
    b: *const VfReport,
    out: *mut f64,
) -> VfStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            set_error("null argument".into());
            return VfStatus::NullArgument;
        }
        match metrics::stealthiness(&(*a).report, &(*b).report) {
            Ok(zeta) => {
                *out = zeta;
                VfStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                VfStatus::RuntimeError
            }
        }
    })
}

/// Last error message of this thread, or NULL when no error was recorded.
/// The string is owned by the caller and freed with `vf_string_free`.
#[no_mangle]
pub extern "C" fn vf_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn vf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Frees a scenario handle.
///
/// # Safety
/// `scenario` must come from a `vf_scenario_*` constructor and not have been
/// freed before.
#[no_mangle]
pub unsafe extern "C" fn vf_scenario_free(scenario: *mut VfScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Frees a report handle.
///
/// # Safety
/// `report` must come from `vf_run` and not have been freed before.
#[no_mangle]
pub unsafe extern "C" fn vf_report_free(report: *mut VfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
