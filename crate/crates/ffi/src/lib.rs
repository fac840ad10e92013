//! C ABI for the stalefed simulator.
//!
//! Every function returns a [`StalefedStatus`]; on failure the message is
//! available from [`stalefed_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use stalefed::analysis::{self, BoundInputs};
use stalefed::fedsgd::{self, Problem, Trajectory};
use stalefed::harness::{self, ExperimentSpec, Mode};
use stalefed::staleness;
use stalefed::Error;

/// Status codes. The nonzero values match the CLI exit codes where one exists.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StalefedStatus {
    Ok = 0,
    Other = 1,
    CheckFailed = 2,
    Config = 3,
    Divergence = 4,
    NullPointer = 5,
    Panic = 6,
}

/// A parsed experiment spec.
pub struct StalefedSpec {
    inner: ExperimentSpec,
}

/// The result of one training run.
pub struct StalefedTrace {
    inner: Trajectory,
    grad_norm_sq: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StalefedStatus {
    match e.exit_code() {
        3 => StalefedStatus::Config,
        4 => StalefedStatus::Divergence,
        _ => StalefedStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<StalefedStatus, (StalefedStatus, String)>) -> StalefedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_last_error(msg);
            s
        }
        Err(_) => {
            set_last_error("panic inside stalefed".into());
            StalefedStatus::Panic
        }
    }
}

fn lib(e: Error) -> (StalefedStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StalefedStatus, String) {
    (StalefedStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, (StalefedStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (StalefedStatus::Config, format!("{what} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stalefed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn stalefed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a spec file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stalefed_spec_load(path: *const c_char, out: *mut *mut StalefedSpec) -> StalefedStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = harness::load_spec(path.as_ref()).map_err(lib)?;
        *out = Box::into_raw(Box::new(StalefedSpec { inner }));
        Ok(StalefedStatus::Ok)
    })
}

/// Parses spec text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stalefed_spec_parse(text: *const c_char, out: *mut *mut StalefedSpec) -> StalefedStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = harness::parse_spec(text).map_err(lib)?;
        *out = Box::into_raw(Box::new(StalefedSpec { inner }));
        Ok(StalefedStatus::Ok)
    })
}

/// # Safety
/// `spec` must be null or a handle from `stalefed_spec_load`/`stalefed_spec_parse`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn stalefed_spec_free(spec: *mut StalefedSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Writes `1 - N/K` for the spec.
///
/// # Safety
/// `spec` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stalefed_spec_beta(spec: *const StalefedSpec, out: *mut f64) -> StalefedStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = spec.inner.beta();
        Ok(StalefedStatus::Ok)
    })
}

/// Replaces the output root directory.
///
/// # Safety
/// `spec` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stalefed_spec_set_out(spec: *mut StalefedSpec, dir: *const c_char) -> StalefedStatus {
    guard(|| {
        let spec = spec.as_mut().ok_or_else(|| null("spec"))?;
        spec.inner.out = PathBuf::from(str_arg(dir, "dir")?);
        Ok(StalefedStatus::Ok)
    })
}

/// Runs one training trajectory with the spec's run settings and base seed.
///
/// # Safety
/// `spec` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stalefed_train(spec: *const StalefedSpec, out: *mut *mut StalefedTrace) -> StalefedStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let run = &spec.inner.run;
        let problem = Problem::generate(run.model, &run.data).map_err(lib)?;
        let inner = fedsgd::run_training(&problem, run).map_err(lib)?;
        let grad_norm_sq = inner.records.iter().map(|r| r.grad_norm_sq).collect();
        *out = Box::into_raw(Box::new(StalefedTrace { inner, grad_norm_sq }));
        Ok(StalefedStatus::Ok)
    })
}

/// # Safety
/// `trace` must be null or a handle from `stalefed_train` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_free(trace: *mut StalefedTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of recorded rounds, or 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_len(trace: *const StalefedTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.grad_norm_sq.len())
}

/// Parameter dimension, or 0 for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_dim(trace: *const StalefedTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.inner.final_w.len())
}

/// Step size the run used, or NaN for a null handle.
///
/// # Safety
/// `trace` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_eta(trace: *const StalefedTrace) -> f64 {
    trace.as_ref().map_or(f64::NAN, |t| t.inner.eta)
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<StalefedStatus, (StalefedStatus, String)> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len < src.len() {
        return Err((
            StalefedStatus::Config,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(StalefedStatus::Ok)
}

/// Copies `||grad f(w^t)||^2` for every round into `buf` (at least `stalefed_trace_len` slots).
///
/// # Safety
/// `trace` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_grad_norm_sq(
    trace: *const StalefedTrace,
    buf: *mut f64,
    len: usize,
) -> StalefedStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        copy_out(&t.grad_norm_sq, buf, len)
    })
}

/// Copies the final parameter vector into `buf` (at least `stalefed_trace_dim` slots).
///
/// # Safety
/// `trace` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn stalefed_trace_final_w(trace: *const StalefedTrace, buf: *mut f64, len: usize) -> StalefedStatus {
    guard(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        copy_out(&t.inner.final_w, buf, len)
    })
}

/// `beta^l (1 - beta)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stalefed_geometric_pmf(beta: f64, l: u64, out: *mut f64) -> StalefedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = staleness::geometric_pmf(beta, l).map_err(lib)?;
        Ok(StalefedStatus::Ok)
    })
}

/// Convergence bound on the minimum expected squared gradient norm.
/// `out_valid` receives whether the large-`T` condition holds.
///
/// # Safety
/// `out_bound` and `out_valid` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn stalefed_theorem_bound(
    smoothness: f64,
    f0: f64,
    fstar: f64,
    sigma2: f64,
    mu: f64,
    beta: f64,
    rounds: usize,
    out_bound: *mut f64,
    out_valid: *mut bool,
) -> StalefedStatus {
    guard(|| {
        if out_bound.is_null() || out_valid.is_null() {
            return Err(null("output pointer"));
        }
        let v = analysis::theorem_bound(&BoundInputs {
            smoothness,
            f0,
            fstar,
            sigma2,
            mu,
            beta,
            rounds,
        })
        .map_err(lib)?;
        *out_bound = v.bound;
        *out_valid = v.valid;
        Ok(StalefedStatus::Ok)
    })
}

/// Runs the spec in `mode` (`train`, `staleness`, `lemma1`, `theorem` or
/// `sweep`) and writes outputs under `<out>/<name>`. Returns `CheckFailed`
/// when the run completed but an asserted check did not pass.
///
/// # Safety
/// `spec` must be a live handle and `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stalefed_run(spec: *const StalefedSpec, mode: *const c_char) -> StalefedStatus {
    guard(|| {
        let spec = spec.as_ref().ok_or_else(|| null("spec"))?;
        let mode: Mode = str_arg(mode, "mode")?
            .parse()
            .map_err(|e: String| (StalefedStatus::Config, e))?;
        let code = if mode == Mode::Sweep {
            harness::sweep(&spec.inner).map_err(lib)?.exit_code
        } else if harness::run_experiment(&spec.inner, mode).map_err(lib)?.passed {
            0
        } else {
            2
        };
        match code {
            0 => Ok(StalefedStatus::Ok),
            2 => Err((StalefedStatus::CheckFailed, "an asserted check failed".into())),
            3 => Err((StalefedStatus::Config, "a sweep cell had a configuration error".into())),
            4 => Err((StalefedStatus::Divergence, "a sweep cell diverged".into())),
            _ => Err((StalefedStatus::Other, "a sweep cell failed".into())),
        }
    })
}
