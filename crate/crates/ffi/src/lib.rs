//! C ABI for the planner.
//!
//! Scenarios and runs cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free`. Every entry point
//! returns an [`NgmpcStatus`]; on failure a description is available from
//! [`ngmpc_last_error`] on the same thread until the next call. Panics are
//! caught and reported as [`NgmpcStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ngmpc::config::ScenarioConfig;
use ngmpc::coordinator::{run_receding_horizon, RunLog};
use ngmpc::safety::{vp_bound, ClearanceMoments};
use ngmpc::validate::RunSummary;
use ngmpc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NgmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Solver = 5,
    Protocol = 6,
    Io = 7,
    Panic = 8,
}

/// A validated scenario.
pub struct NgmpcScenario {
    config: ScenarioConfig,
}

/// A finished (possibly aborted) receding-horizon run.
pub struct NgmpcRun {
    log: RunLog,
}

/// Realised state of one agent.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NgmpcState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub psi: f64,
}

/// Outcome of the clearance bound.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NgmpcBound {
    /// Upper bound on the collision probability; infinite when not applicable.
    pub bound: f64,
    pub applicable: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> NgmpcStatus {
    match e {
        Error::InvalidNoise(_) | Error::Config(_) => NgmpcStatus::Config,
        Error::Numerical { .. } => NgmpcStatus::Numerical,
        Error::Solver(_) => NgmpcStatus::Solver,
        Error::Protocol(_) => NgmpcStatus::Protocol,
        Error::Usage(_) => NgmpcStatus::InvalidArgument,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => NgmpcStatus::Io,
    }
}

struct Fail(NgmpcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any failure or panic in the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NgmpcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NgmpcStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            NgmpcStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(NgmpcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NgmpcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live handle of type `T`.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` must be null or valid for one write.
unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Description of the last failure on this thread, or null. The pointer is
/// valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn ngmpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn ngmpc_status_name(status: NgmpcStatus) -> *const c_char {
    let s: &'static CStr = match status {
        NgmpcStatus::Ok => c"ok",
        NgmpcStatus::NullPointer => c"null pointer",
        NgmpcStatus::InvalidArgument => c"invalid argument",
        NgmpcStatus::Config => c"configuration error",
        NgmpcStatus::Numerical => c"numerical failure",
        NgmpcStatus::Solver => c"solver failure",
        NgmpcStatus::Protocol => c"protocol error",
        NgmpcStatus::Io => c"i/o error",
        NgmpcStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Parses and validates a scenario from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_scenario_from_toml(toml: *const c_char, out: *mut *mut NgmpcScenario) -> NgmpcStatus {
    guard(|| {
        let text = read_str(toml, "toml")?;
        let config = ScenarioConfig::from_toml_str(text)?;
        put(out, Box::into_raw(Box::new(NgmpcScenario { config })))
    })
}

/// Loads one of the scenarios shipped with the library by name.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_scenario_bundled(name: *const c_char, out: *mut *mut NgmpcScenario) -> NgmpcStatus {
    guard(|| {
        let name = read_str(name, "name")?;
        let config = ScenarioConfig::bundled(name)?;
        put(out, Box::into_raw(Box::new(NgmpcScenario { config })))
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_scenario_free(scenario: *mut NgmpcScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// # Safety
/// `scenario` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_scenario_agent_count(scenario: *const NgmpcScenario, out: *mut usize) -> NgmpcStatus {
    guard(|| put(out, handle(scenario, "scenario")?.config.agents.len()))
}

/// Overrides the number of global steps. Zero is rejected.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_scenario_set_steps(scenario: *mut NgmpcScenario, steps: usize) -> NgmpcStatus {
    guard(|| {
        let s = scenario.as_mut().ok_or_else(|| null("scenario"))?;
        if steps == 0 {
            return Err(Fail(NgmpcStatus::InvalidArgument, "steps must be positive".into()));
        }
        s.config.run.steps = steps;
        Ok(())
    })
}

/// Runs the scenario with `seed`. A run that aborts part-way still yields a
/// handle; check [`ngmpc_run_completed`].
///
/// # Safety
/// `scenario` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run(scenario: *const NgmpcScenario, seed: u64, out: *mut *mut NgmpcRun) -> NgmpcStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let log = run_receding_horizon(&s.config, seed)?;
        put(out, Box::into_raw(Box::new(NgmpcRun { log })))
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_free(run: *mut NgmpcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `run` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_completed(run: *const NgmpcRun, out: *mut bool) -> NgmpcStatus {
    guard(|| put(out, handle(run, "run")?.log.completed()))
}

/// Number of executed global steps.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_step_count(run: *const NgmpcRun, out: *mut usize) -> NgmpcStatus {
    guard(|| put(out, handle(run, "run")?.log.steps.len()))
}

/// State of agent `agent` (configuration order) after `step` steps;
/// `step = 0` is the initial state.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_state(
    run: *const NgmpcRun,
    step: usize,
    agent: usize,
    out: *mut NgmpcState,
) -> NgmpcStatus {
    guard(|| {
        let log = &handle(run, "run")?.log;
        let states = match step {
            0 => &log.initial_states,
            k => &log
                .steps
                .get(k - 1)
                .ok_or_else(|| Fail(NgmpcStatus::InvalidArgument, format!("step {k} out of range")))?
                .states_after,
        };
        let s = states
            .get(agent)
            .ok_or_else(|| Fail(NgmpcStatus::InvalidArgument, format!("agent {agent} out of range")))?;
        put(
            out,
            NgmpcState {
                x: s.x,
                y: s.y,
                z: s.z,
                psi: s.psi,
            },
        )
    })
}

/// Smallest distance between expected positions over all pairs and steps;
/// infinite for a single agent.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_min_mean_distance(run: *const NgmpcRun, out: *mut f64) -> NgmpcStatus {
    guard(|| {
        let summary = RunSummary::from_log(&handle(run, "run")?.log)?;
        put(out, summary.min_mean_distance())
    })
}

/// Number of plans replaced by a fallback.
///
/// # Safety
/// `run` must be a live handle; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_fallback_count(run: *const NgmpcRun, out: *mut usize) -> NgmpcStatus {
    guard(|| {
        let summary = RunSummary::from_log(&handle(run, "run")?.log)?;
        put(out, summary.fallbacks)
    })
}

/// Writes the run log as JSON lines to `path`.
///
/// # Safety
/// `run` must be a live handle; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_run_save(run: *const NgmpcRun, path: *const c_char) -> NgmpcStatus {
    guard(|| {
        let log = &handle(run, "run")?.log;
        log.save(Path::new(read_str(path, "path")?))?;
        Ok(())
    })
}

/// Collision-probability bound from the first two moments of the clearance
/// variable.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ngmpc_clearance_bound(e_f: f64, e_f2: f64, out: *mut NgmpcBound) -> NgmpcStatus {
    guard(|| {
        if !e_f.is_finite() || !e_f2.is_finite() {
            return Err(Fail(NgmpcStatus::InvalidArgument, "moments must be finite".into()));
        }
        let r = vp_bound(&ClearanceMoments::new(e_f, e_f2));
        put(
            out,
            NgmpcBound {
                bound: r.bound,
                applicable: r.applicable,
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_their_status() {
        assert_eq!(status_of(&Error::Config("x".into())), NgmpcStatus::Config);
        assert_eq!(status_of(&Error::InvalidNoise("x".into())), NgmpcStatus::Config);
        assert_eq!(status_of(&Error::Solver("x".into())), NgmpcStatus::Solver);
        assert_eq!(status_of(&Error::Protocol("x".into())), NgmpcStatus::Protocol);
        assert_eq!(status_of(&Error::Usage("x".into())), NgmpcStatus::InvalidArgument);
        assert_eq!(status_of(&std::io::Error::other("x").into()), NgmpcStatus::Io);
    }

    #[test]
    fn panics_are_contained() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, NgmpcStatus::Panic);
        let msg = unsafe { CStr::from_ptr(ngmpc_last_error()) }.to_str().unwrap();
        assert_eq!(msg, "panic: boom");
    }
}
