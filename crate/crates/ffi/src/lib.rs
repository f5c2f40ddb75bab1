//! C ABI for the mean-field control solver.
//!
//! Objects cross the boundary as opaque handles created by
//! `mfc_config_parse`, `mfc_run` and `mfc_riccati_solve`, and released by
//! the matching `mfc_*_free`.
//! Every fallible call returns an [`MfcStatus`]; on failure the message is
//! kept per thread and read back with [`mfc_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mfcontrol::config::{parse_config_str, RunConfig};
use mfcontrol::nag::{run, Method, RunReport};
use mfcontrol::prox::ProxSpec;
use mfcontrol::riccati::{solve_cs_riccati, RiccatiSolution};
use mfcontrol::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidArgument = 4,
    /// A solver error: non-finite values, failed solves, blow-up.
    Numerical = 5,
    OutOfRange = 6,
    Io = 7,
    Panic = 8,
}

/// One row of the per-iteration report.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MfcRecord {
    pub m: usize,
    /// Cost estimate `J(phi^m)` at the evaluation seed.
    pub j: f64,
    /// Monte Carlo standard error of `j`.
    pub std_error: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Parsed run configuration.
pub struct MfcConfig(RunConfig);

/// Outcome of a run: iteration records and the final policy.
pub struct MfcReport {
    report: RunReport,
    /// Set when the run stopped early; records hold the completed iterations.
    error: Option<CString>,
}

/// Sampled solution of the flocking Riccati equation.
pub struct MfcRiccati(RiccatiSolution);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MfcStatus {
    match e {
        Error::Config { .. } | Error::UnknownKey { .. } => MfcStatus::Config,
        Error::InvalidArgument(_) | Error::Dimension { .. } | Error::Csv(_) => MfcStatus::InvalidArgument,
        Error::Io { .. } => MfcStatus::Io,
        Error::Iteration { source, .. } => status_of(source),
        _ => MfcStatus::Numerical,
    }
}

fn fail(status: MfcStatus, msg: impl Into<String>) -> MfcStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MfcStatus {
    let s = status_of(&e);
    fail(s, e.to_string())
}

/// Runs `f`, turning panics into [`MfcStatus::Panic`].
fn guard(f: impl FnOnce() -> MfcStatus) -> MfcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(MfcStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, MfcStatus> {
    if s.is_null() {
        return Err(fail(MfcStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(MfcStatus::InvalidUtf8, "string is not valid UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, MfcStatus> {
    p.as_ref().ok_or_else(|| fail(MfcStatus::NullPointer, format!("null {what} handle")))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mfc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn mfc_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses configuration text (`key = value` lines).
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_config_parse(text: *const c_char, out: *mut *mut MfcConfig) -> MfcStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let s = tri!(c_str(text));
        match parse_config_str(s) {
            Ok(cfg) => {
                *out = Box::into_raw(Box::new(MfcConfig(cfg)));
                MfcStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `cfg` must come from [`mfc_config_parse`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfc_config_free(cfg: *mut MfcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Overrides the method: `"fipde"`, `"ipde"` or `"emreg"`.
///
/// # Safety
/// `cfg` must be a live handle; `method` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mfc_config_set_method(cfg: *mut MfcConfig, method: *const c_char) -> MfcStatus {
    guard(|| {
        let name = tri!(c_str(method));
        let Some(cfg) = cfg.as_mut() else {
            return fail(MfcStatus::NullPointer, "null config handle");
        };
        match Method::parse(name) {
            Some(m) => {
                cfg.0.method = m;
                MfcStatus::Ok
            }
            None => fail(MfcStatus::InvalidArgument, format!("unknown method `{name}` (fipde, ipde, emreg)")),
        }
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mfc_config_set_iterations(cfg: *mut MfcConfig, iterations: usize) -> MfcStatus {
    guard(|| match cfg.as_mut() {
        Some(c) => {
            c.0.iterations = iterations;
            MfcStatus::Ok
        }
        None => fail(MfcStatus::NullPointer, "null config handle"),
    })
}

/// Runs the configured method in memory; no files are written.
///
/// When the solver fails mid-run the report of the completed iterations is
/// still returned through `out` together with the error status; query it
/// with [`mfc_report_error`].
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_run(cfg: *const MfcConfig, out: *mut *mut MfcReport) -> MfcStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        let cfg = &tri!(handle(cfg, "config")).0;
        let problem = match cfg.problem.build() {
            Ok(p) => p,
            Err(e) => return from_error(e),
        };
        let solver = match cfg.solver_config() {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        match run(problem.as_ref(), &solver) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(MfcReport { report, error: None }));
                MfcStatus::Ok
            }
            Err(failure) => {
                let msg = failure.error.to_string().replace('\0', " ");
                *out = Box::into_raw(Box::new(MfcReport {
                    report: *failure.report,
                    error: CString::new(msg).ok(),
                }));
                from_error(failure.error)
            }
        }
    })
}

/// # Safety
/// `report` must come from [`mfc_run`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfc_report_free(report: *mut MfcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Number of iteration records (`iterations + 1` for a complete run).
///
/// # Safety
/// `report` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mfc_report_len(report: *const MfcReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.records.len())
}

/// Error message of a run that stopped early, or null. Owned by the report.
///
/// # Safety
/// `report` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mfc_report_error(report: *const MfcReport) -> *const c_char {
    report.as_ref().and_then(|r| r.error.as_ref()).map_or(ptr::null(), |c| c.as_ptr())
}

/// Copies record `m` into `out`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_report_record(report: *const MfcReport, m: usize, out: *mut MfcRecord) -> MfcStatus {
    guard(|| {
        let r = tri!(handle(report, "report"));
        if out.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        match r.report.records.get(m) {
            Some(rec) => {
                *out = MfcRecord {
                    m: rec.m,
                    j: rec.j,
                    std_error: rec.stderr,
                    grad_norm: rec.grad_norm,
                    wall_ms: rec.wall_ms,
                };
                MfcStatus::Ok
            }
            None => fail(
                MfcStatus::OutOfRange,
                format!("record {m} out of range (report has {})", r.report.records.len()),
            ),
        }
    })
}

/// State and control dimensions of the trained policy.
///
/// # Safety
/// `report` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_report_policy_dims(report: *const MfcReport, state_dim: *mut usize, control_dim: *mut usize) -> MfcStatus {
    guard(|| {
        let r = tri!(handle(report, "report"));
        if state_dim.is_null() || control_dim.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        *state_dim = r.report.phi.grid().dim();
        *control_dim = r.report.phi.control_dim();
        MfcStatus::Ok
    })
}

/// Evaluates the final policy `phi(t, x)` by multilinear interpolation.
/// `x` holds `state_dim` values and `out` receives `control_dim` values.
///
/// # Safety
/// `report` must be a live handle; `x` and `out` must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mfc_report_policy_eval(
    report: *const MfcReport,
    t: f64,
    x: *const f64,
    state_dim: usize,
    out: *mut f64,
    control_dim: usize,
) -> MfcStatus {
    guard(|| {
        let r = tri!(handle(report, "report"));
        if x.is_null() || out.is_null() {
            return fail(MfcStatus::NullPointer, "null buffer");
        }
        let phi = &r.report.phi;
        let (d, k) = (phi.grid().dim(), phi.control_dim());
        if state_dim != d || control_dim != k {
            return fail(
                MfcStatus::InvalidArgument,
                format!("policy maps {d} states to {k} controls, got buffers of {state_dim} and {control_dim}"),
            );
        }
        if !(0.0..=phi.grid().horizon()).contains(&t) {
            return fail(MfcStatus::OutOfRange, format!("t = {t} outside [0, {}]", phi.grid().horizon()));
        }
        let xs = std::slice::from_raw_parts(x, d);
        phi.eval(t, xs, std::slice::from_raw_parts_mut(out, k));
        MfcStatus::Ok
    })
}

/// Soft thresholding: `out_i = sign(a_i) max(|a_i| - tau * weight, 0)`.
///
/// # Safety
/// `a` and `out` must hold `len` values (they may alias).
#[no_mangle]
pub unsafe extern "C" fn mfc_prox_l1(tau: f64, weight: f64, a: *const f64, out: *mut f64, len: usize) -> MfcStatus {
    guard(|| {
        if len > 0 && (a.is_null() || out.is_null()) {
            return fail(MfcStatus::NullPointer, "null buffer");
        }
        if !(tau > 0.0) {
            return fail(MfcStatus::InvalidArgument, format!("tau must be positive, got {tau}"));
        }
        let spec = match ProxSpec::l1(weight) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let input = std::slice::from_raw_parts(a, len).to_vec();
        spec.apply(tau, &input, std::slice::from_raw_parts_mut(out, len));
        MfcStatus::Ok
    })
}

/// Projection onto the box `[lo_i, hi_i]`.
///
/// # Safety
/// All buffers must hold `len` values; `a` and `out` may alias.
#[no_mangle]
pub unsafe extern "C" fn mfc_prox_box(lo: *const f64, hi: *const f64, a: *const f64, out: *mut f64, len: usize) -> MfcStatus {
    guard(|| {
        if len > 0 && (lo.is_null() || hi.is_null() || a.is_null() || out.is_null()) {
            return fail(MfcStatus::NullPointer, "null buffer");
        }
        let lo = std::slice::from_raw_parts(lo, len).to_vec();
        let hi = std::slice::from_raw_parts(hi, len).to_vec();
        let spec = match ProxSpec::boxed(lo, hi) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let input = std::slice::from_raw_parts(a, len).to_vec();
        spec.apply(1.0, &input, std::slice::from_raw_parts_mut(out, len));
        MfcStatus::Ok
    })
}

/// Solves the flocking Riccati equation backward from `a(T) = 2`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_riccati_solve(k: f64, gamma1: f64, horizon: f64, dt_ode: f64, out: *mut *mut MfcRiccati) -> MfcStatus {
    guard(|| {
        if out.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        *out = ptr::null_mut();
        match solve_cs_riccati(k, gamma1, horizon, dt_ode) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(MfcRiccati(s)));
                MfcStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `sol` must come from [`mfc_riccati_solve`] (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfc_riccati_free(sol: *mut MfcRiccati) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}

/// Number of stored samples.
///
/// # Safety
/// `sol` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn mfc_riccati_len(sol: *const MfcRiccati) -> usize {
    sol.as_ref().map_or(0, |s| s.0.values.len())
}

/// `a(t)`, linearly interpolated between samples.
///
/// # Safety
/// `sol` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfc_riccati_value(sol: *const MfcRiccati, t: f64, out: *mut f64) -> MfcStatus {
    guard(|| {
        let s = tri!(handle(sol, "Riccati"));
        if out.is_null() {
            return fail(MfcStatus::NullPointer, "null output pointer");
        }
        match s.0.value(t) {
            Ok(v) => {
                *out = v;
                MfcStatus::Ok
            }
            Err(e) => fail(MfcStatus::OutOfRange, e.to_string()),
        }
    })
}

/// Copies up to `cap` samples (forward in time) into `buf`; returns the
/// number written.
///
/// # Safety
/// `sol` must be a live handle or null; `buf` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mfc_riccati_samples(sol: *const MfcRiccati, buf: *mut f64, cap: usize) -> usize {
    match sol.as_ref() {
        Some(s) if !buf.is_null() => {
            let n = cap.min(s.0.values.len());
            ptr::copy_nonoverlapping(s.0.values.as_ptr(), buf, n);
            n
        }
        _ => 0,
    }
}
