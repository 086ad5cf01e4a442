//! C ABI over the `cctraj` pipeline.
//!
//! Every entry point returns a [`CctStatus`]. On failure the message is kept in
//! a thread-local slot readable through [`cct_last_error`]. Handles are opaque
//! and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cctraj::config::ExperimentConfig;
use cctraj::pipeline::{Experiment, Plan, ReportRecord, PLAN_FILE};
use cctraj::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CctStatus {
    Ok = 0,
    InvalidArgument = 1,
    InsufficientCalibration = 2,
    Infeasible = 3,
    NumericalFailure = 4,
    Config = 5,
    Io = 6,
    Panic = 7,
}

impl From<&Error> for CctStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InsufficientCalibration { .. } => CctStatus::InsufficientCalibration,
            Error::Infeasible(_) => CctStatus::Infeasible,
            Error::Numerical(_) | Error::DegenerateNormal | Error::Design(_) => CctStatus::NumericalFailure,
            Error::Io(_) => CctStatus::Io,
            Error::Dimension { .. } => CctStatus::InvalidArgument,
            Error::Config(_) | Error::Format(_) => CctStatus::Config,
        }
    }
}

/// Loaded experiment configuration.
pub struct CctExperiment {
    inner: Experiment,
}

/// Nominal trajectory with its solver header.
pub struct CctPlan {
    inner: Plan,
}

/// Monte Carlo audit summary. `min_coverage` and `coverage_floor` are NaN when
/// no coverage audit ran.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CctSummary {
    pub runs: usize,
    pub diverged: usize,
    pub max_failure: f64,
    pub worst_step: usize,
    pub terminal_failure: f64,
    pub min_coverage: f64,
    pub coverage_floor: f64,
}

impl From<&ReportRecord> for CctSummary {
    fn from(r: &ReportRecord) -> Self {
        let s = &r.summary;
        CctSummary {
            runs: s.runs,
            diverged: s.diverged,
            max_failure: s.max_failure,
            worst_step: s.worst_step,
            terminal_failure: s.terminal_failure,
            min_coverage: s.min_coverage.unwrap_or(f64::NAN),
            coverage_floor: r.coverage_floor.unwrap_or(f64::NAN),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CctStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(CctStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CctStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CctStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CctStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not valid UTF-8")))?;
    Ok(Some(PathBuf::from(s)))
}

unsafe fn exp_ref<'a>(e: *const CctExperiment) -> Result<&'a Experiment, Fail> {
    e.as_ref().map(|e| &e.inner).ok_or_else(|| invalid("null experiment handle"))
}

/// Message for the most recent failure on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn cct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a TOML config. `output_dir` may be NULL to keep the configured one.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `output_dir` NULL or one, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cct_experiment_load(
    config_path: *const c_char,
    output_dir: *const c_char,
    out: *mut *mut CctExperiment,
) -> CctStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let path = path_arg(config_path, "config path")?.ok_or_else(|| invalid("null config path"))?;
        let mut cfg = ExperimentConfig::load(&path)?;
        if let Some(dir) = path_arg(output_dir, "output dir")? {
            cfg.output_dir = dir;
        }
        let inner = Experiment::new(cfg)?;
        *out = Box::into_raw(Box::new(CctExperiment { inner }));
        Ok(())
    })
}

/// # Safety
/// `e` must be NULL or a handle from [`cct_experiment_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cct_experiment_free(e: *mut CctExperiment) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Calibrates and writes the artifact to the output directory. `eta` may be NULL.
///
/// # Safety
/// `e` must be a live handle and `eta` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn cct_calibrate(e: *const CctExperiment, eta: *mut f64) -> CctStatus {
    guard(|| {
        let ex = exp_ref(e)?;
        let (cal, _) = ex.run_calibrate()?;
        if !eta.is_null() {
            *eta = cal.record.eta;
        }
        Ok(())
    })
}

/// Plans from the calibration in `calibration_dir` (NULL: the output directory)
/// and writes the plan file. A plan whose solver status is unusable is reported
/// as `Infeasible` and no handle is returned.
///
/// # Safety
/// `e` must be a live handle, `calibration_dir` NULL or a NUL-terminated
/// string, and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cct_plan(
    e: *const CctExperiment,
    calibration_dir: *const c_char,
    out: *mut *mut CctPlan,
) -> CctStatus {
    guard(|| {
        let ex = exp_ref(e)?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(calibration_dir, "calibration dir")?.unwrap_or_else(|| ex.output_dir().to_path_buf());
        let (plan, _) = ex.run_plan(&dir)?;
        if !plan.header.status.is_usable() {
            return Err(Fail(CctStatus::Infeasible, format!("solver status {}", plan.header.status)));
        }
        *out = Box::into_raw(Box::new(CctPlan { inner: plan }));
        Ok(())
    })
}

/// Reads the plan file from directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_read(dir: *const c_char, out: *mut *mut CctPlan) -> CctStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let dir = path_arg(dir, "plan dir")?.ok_or_else(|| invalid("null plan dir"))?;
        let (plan, _) = Plan::read(&dir.join(PLAN_FILE))?;
        *out = Box::into_raw(Box::new(CctPlan { inner: plan }));
        Ok(())
    })
}

/// # Safety
/// `p` must be NULL or a live plan handle.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_free(p: *mut CctPlan) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Horizon `N`, state and control dimensions.
///
/// # Safety
/// `p` must be a live plan handle; each output pointer NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_dims(p: *const CctPlan, horizon: *mut usize, n_x: *mut usize, n_u: *mut usize) -> CctStatus {
    guard(|| {
        let h = &p.as_ref().ok_or_else(|| invalid("null plan handle"))?.inner.header;
        for (dst, v) in [(horizon, h.n), (n_x, h.n_x), (n_u, h.n_u)] {
            if !dst.is_null() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Objective value of the plan.
///
/// # Safety
/// `p` must be a live plan handle and `objective` valid.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_objective(p: *const CctPlan, objective: *mut f64) -> CctStatus {
    guard(|| {
        let plan = p.as_ref().ok_or_else(|| invalid("null plan handle"))?;
        if objective.is_null() {
            return Err(invalid("null output pointer"));
        }
        *objective = plan.inner.header.objective;
        Ok(())
    })
}

/// Copies the `(N+1)·n_x` states row-major into `buf` of length `len`.
///
/// # Safety
/// `p` must be a live plan handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_states(p: *const CctPlan, buf: *mut f64, len: usize) -> CctStatus {
    guard(|| {
        let plan = p.as_ref().ok_or_else(|| invalid("null plan handle"))?;
        copy_rows(plan.inner.trajectory.states.iter().map(|v| v.as_slice()), buf, len)
    })
}

/// Copies the `N·n_u` controls row-major into `buf` of length `len`.
///
/// # Safety
/// `p` must be a live plan handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn cct_plan_controls(p: *const CctPlan, buf: *mut f64, len: usize) -> CctStatus {
    guard(|| {
        let plan = p.as_ref().ok_or_else(|| invalid("null plan handle"))?;
        copy_rows(plan.inner.trajectory.controls.iter().map(|v| v.as_slice()), buf, len)
    })
}

unsafe fn copy_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, buf: *mut f64, len: usize) -> Result<(), Fail> {
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    if buf.is_null() || len < flat.len() {
        return Err(invalid(&format!("buffer holds {len} values, need {}", flat.len())));
    }
    ptr::copy_nonoverlapping(flat.as_ptr(), buf, flat.len());
    Ok(())
}

/// Monte Carlo audit of the conformal plan in the output directory; writes the
/// report next to it.
///
/// # Safety
/// `e` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cct_simulate(e: *const CctExperiment, out: *mut CctSummary) -> CctStatus {
    guard(|| {
        let ex = exp_ref(e)?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let report = ex.run_simulate(ex.output_dir(), None)?;
        *out = (&report).into();
        Ok(())
    })
}

/// Gaussian-linearization comparison: plans, evaluates and writes under
/// `<output_dir>/baseline`.
///
/// # Safety
/// `e` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cct_baseline(e: *const CctExperiment, out: *mut CctSummary) -> CctStatus {
    guard(|| {
        let ex = exp_ref(e)?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let (_, report) = ex.run_baseline()?;
        *out = (&report).into();
        Ok(())
    })
}
