//! C interface to the scenario runner.
//!
//! A `DhSim` handle owns one parsed scenario and, once run, its outcome.
//! Every function returns a `DhStatus`; on failure a message describing the
//! last error on the calling thread is available from `dh_last_error`.
//! Strings handed out by the library are released with `dh_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use disthash::cli::metrics;
use disthash::cli::run::{execute, Outcome};
use disthash::cli::scenario::{parse, Scenario};

#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DhStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// The scenario text failed to parse or validate.
    Scenario = 3,
    /// The simulator refused the scenario while building it.
    Simulation = 4,
    /// The call does not fit the handle's state, e.g. metrics before a run.
    State = 5,
    /// A panic was caught at the boundary; the handle must be freed.
    Panic = 6,
}

/// Opaque simulation handle.
pub struct DhSim {
    scenario: Scenario,
    seed: Option<u64>,
    trace: bool,
    outcome: Option<Outcome>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    // interior NULs would truncate the message; replace them
    let s = msg.into().replace('\0', " ");
    let c = CString::new(s).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DhStatus, msg: impl Into<String>) -> DhStatus {
    set_error(msg);
    status
}

/// Runs `f` and turns a panic into `DhStatus::Panic`.
fn guard(f: impl FnOnce() -> DhStatus) -> DhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(DhStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn utf8<'a>(s: *const c_char) -> Result<&'a str, DhStatus> {
    if s.is_null() {
        return Err(fail(DhStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(DhStatus::InvalidUtf8, format!("invalid UTF-8: {e}")))
}

unsafe fn handle<'a>(sim: *mut DhSim) -> Result<&'a mut DhSim, DhStatus> {
    sim.as_mut().ok_or_else(|| fail(DhStatus::NullArgument, "null handle"))
}

fn give_string(s: String, out: *mut *mut c_char) -> DhStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null first.
            unsafe { *out = c.into_raw() };
            DhStatus::Ok
        }
        Err(_) => fail(DhStatus::State, "output contains a NUL byte"),
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Parses and validates scenario text without creating a handle.
///
/// # Safety
/// `text` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dh_scenario_check(text: *const c_char) -> DhStatus {
    guard(|| {
        let t = tri!(utf8(text));
        match parse(t) {
            Ok(_) => DhStatus::Ok,
            Err(e) => fail(DhStatus::Scenario, e.to_string()),
        }
    })
}

/// Creates a handle from scenario text. On success `*out` receives a handle
/// to release with `dh_sim_free`; on failure it is set to null.
///
/// # Safety
/// `text` must be null or a NUL-terminated string; `out` must be null or
/// point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_new(text: *const c_char, out: *mut *mut DhSim) -> DhStatus {
    guard(|| {
        if out.is_null() {
            return fail(DhStatus::NullArgument, "null output pointer");
        }
        *out = ptr::null_mut();
        let t = tri!(utf8(text));
        let scenario = match parse(t) {
            Ok(s) => s,
            Err(e) => return fail(DhStatus::Scenario, e.to_string()),
        };
        *out = Box::into_raw(Box::new(DhSim {
            scenario,
            seed: None,
            trace: false,
            outcome: None,
        }));
        DhStatus::Ok
    })
}

/// Overrides the scenario's seed for the next run.
///
/// # Safety
/// `sim` must be null or a live handle from `dh_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_set_seed(sim: *mut DhSim, seed: u64) -> DhStatus {
    guard(|| {
        let h = tri!(handle(sim));
        h.seed = Some(seed);
        DhStatus::Ok
    })
}

/// Records the event trace during the next run when `enabled` is nonzero.
///
/// # Safety
/// `sim` must be null or a live handle from `dh_sim_new`.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_set_trace(sim: *mut DhSim, enabled: i32) -> DhStatus {
    guard(|| {
        let h = tri!(handle(sim));
        h.trace = enabled != 0;
        DhStatus::Ok
    })
}

/// Runs the scenario to quiescence. `*violations` receives the number of
/// invariant violations, unexpected losses included. Running again replays
/// from scratch and replaces the previous outcome.
///
/// # Safety
/// `sim` must be null or a live handle; `violations` must be null or
/// point to a writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_run(sim: *mut DhSim, violations: *mut usize) -> DhStatus {
    guard(|| {
        let h = tri!(handle(sim));
        if violations.is_null() {
            return fail(DhStatus::NullArgument, "null output pointer");
        }
        h.outcome = None;
        match execute(&h.scenario, h.seed, h.trace) {
            Ok(o) => {
                *violations = o.violations.len();
                h.outcome = Some(o);
                DhStatus::Ok
            }
            Err(e) => fail(DhStatus::Simulation, e.to_string()),
        }
    })
}

/// Renders the metrics records of the last run into a new string.
///
/// # Safety
/// `sim` must be null or a live handle; `out` must be null or point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_metrics(sim: *mut DhSim, out: *mut *mut c_char) -> DhStatus {
    guard(|| {
        let h = tri!(handle(sim));
        if out.is_null() {
            return fail(DhStatus::NullArgument, "null output pointer");
        }
        let Some(o) = &h.outcome else {
            return fail(DhStatus::State, "metrics requested before a run");
        };
        give_string(metrics::render(o), out)
    })
}

/// Renders the event trace of the last run into a new string. The trace is
/// empty unless tracing was enabled before the run.
///
/// # Safety
/// As for `dh_sim_metrics`.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_trace(sim: *mut DhSim, out: *mut *mut c_char) -> DhStatus {
    guard(|| {
        let h = tri!(handle(sim));
        if out.is_null() {
            return fail(DhStatus::NullArgument, "null output pointer");
        }
        let Some(o) = &h.outcome else {
            return fail(DhStatus::State, "trace requested before a run");
        };
        give_string(o.sim.trace().render(), out)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sim` must be null or a handle from `dh_sim_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_sim_free(sim: *mut DhSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dh_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code; unknown codes are named "unknown".
#[no_mangle]
pub extern "C" fn dh_status_name(status: i32) -> *const c_char {
    let s: &'static CStr = match status {
        0 => c"ok",
        1 => c"null-argument",
        2 => c"invalid-utf8",
        3 => c"scenario",
        4 => c"simulation",
        5 => c"state",
        6 => c"panic",
        _ => c"unknown",
    };
    s.as_ptr()
}
