//! C interface: load a trained checkpoint behind an opaque handle, score and
//! diagnose single windows, and build state matrices.
//!
//! Every fallible function returns a [`MadtStatus`]. On failure the message
//! is kept per thread and read back with [`madt_last_error`]. Panics never
//! cross the boundary; they surface as `MADT_STATUS_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use madt::diagnosis::{AnomalyReport, Thresholds};
use madt::model::Checkpoint;
use madt::ndgrad::Tensor2;
use madt::pipeline::checkpoint_thresholds;
use madt::pipeline::data::Series;
use madt::pipeline::detect::run_detect;
use madt::statemat::{StateMatrixPair, TimeWindow};
use madt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MadtStatus {
    Ok = 0,
    /// A required pointer was null.
    ErrNullPointer = 1,
    /// Bad size, non-UTF-8 path or out-of-range value.
    ErrInvalidArgument = 2,
    ErrDimension = 3,
    ErrNumeric = 4,
    ErrConfig = 5,
    ErrCheckpoint = 6,
    ErrIo = 7,
    /// Other input or calibration problems.
    ErrData = 8,
    ErrPanic = 9,
}

/// Trained detector. Create with [`madt_model_load`], release with
/// [`madt_model_free`].
pub struct MadtModel {
    checkpoint: Checkpoint<f32>,
    thresholds: Thresholds,
}

/// Per-window diagnosis.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MadtWindowSummary {
    pub flagged_points: usize,
    /// Temporal residual rows above threshold; 0 without a temporal branch.
    pub duration_estimate: usize,
    pub flagged_sensors: usize,
    /// Most suspicious sensor, or `SIZE_MAX` without a spatial branch.
    pub top_sensor: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> MadtStatus {
    match err {
        Error::Dimension { .. } => MadtStatus::ErrDimension,
        Error::Numeric { .. } => MadtStatus::ErrNumeric,
        Error::Config(_) => MadtStatus::ErrConfig,
        Error::Checkpoint(_) => MadtStatus::ErrCheckpoint,
        Error::Io { .. } => MadtStatus::ErrIo,
        _ => MadtStatus::ErrData,
    }
}

struct Fail(MadtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MadtStatus::ErrNullPointer, format!("{what} is null"))
}

/// Runs `f`, records any failure and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MadtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MadtStatus::Ok
        }
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
            set_error(format!("internal panic: {msg}"));
            MadtStatus::ErrPanic
        }
    }
}

unsafe fn model_ref<'a>(model: *const MadtModel) -> Result<&'a MadtModel, Fail> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize) -> Option<&'a mut [T]> {
    (!ptr.is_null()).then(|| std::slice::from_raw_parts_mut(ptr, len))
}

/// Diagnoses one raw (unnormalized) `w x n` row-major window.
fn diagnose(model: &MadtModel, values: &[f64]) -> Result<AnomalyReport, Fail> {
    let ck = &model.checkpoint;
    let (w, n) = (ck.state.config.w, ck.state.config.n);
    let series = Series {
        sensors: ck.sensors.clone(),
        values: Tensor2::from_vec(w, n, values.to_vec())?,
        labels: None,
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Fail(MadtStatus::ErrInvalidArgument, "window holds a non-finite value".into()));
    }
    let det = run_detect(ck, &series, &model.thresholds, 0, false)?;
    Ok(det.reports.into_iter().next().expect("one window"))
}

/// Loads a checkpoint written by `madt train`. On success `*out` owns a new
/// handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn madt_model_load(path: *const c_char, out: *mut *mut MadtModel) -> MadtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(MadtStatus::ErrInvalidArgument, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::<f32>::load(Path::new(path))?;
        let thresholds = checkpoint_thresholds(&checkpoint, None)?;
        *out = Box::into_raw(Box::new(MadtModel { checkpoint, thresholds }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`madt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn madt_model_free(model: *mut MadtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Window length and sensor count the model expects.
///
/// # Safety
/// `model` must be a live handle; `w` and `n` writable.
#[no_mangle]
pub unsafe extern "C" fn madt_model_shape(model: *const MadtModel, w: *mut usize, n: *mut usize) -> MadtStatus {
    guard(|| {
        let m = model_ref(model)?;
        if w.is_null() || n.is_null() {
            return Err(null("w or n"));
        }
        *w = m.checkpoint.state.config.w;
        *n = m.checkpoint.state.config.n;
        Ok(())
    })
}

/// Calibrated point, sensor and temporal thresholds.
///
/// # Safety
/// `model` must be a live handle; `out` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn madt_model_thresholds(model: *const MadtModel, out: *mut f64) -> MadtStatus {
    guard(|| {
        let th = model_ref(model)?.thresholds;
        let out = output(out, 3).ok_or_else(|| null("out"))?;
        out.copy_from_slice(&[th.delta_point, th.delta_sensor, th.delta_temporal]);
        Ok(())
    })
}

/// Temporal (`w x w`) and spatial (`n x n`) state matrices of a row-major
/// `w x n` window. Either output may be null to skip it.
///
/// # Safety
/// `values` must hold `w * n` doubles; non-null outputs `w * w` and `n * n`.
#[no_mangle]
pub unsafe extern "C" fn madt_state_matrices(
    values: *const f64,
    w: usize,
    n: usize,
    tau_t: f64,
    tau_s: f64,
    temporal_out: *mut f64,
    spatial_out: *mut f64,
) -> MadtStatus {
    guard(|| {
        let len = w.checked_mul(n).ok_or(Fail(MadtStatus::ErrInvalidArgument, "w * n overflows".into()))?;
        let x = input(values, len, "values")?;
        let win = TimeWindow::new(Tensor2::from_vec(w, n, x.to_vec())?, 0)?;
        let pair = StateMatrixPair::build(&win, tau_t, tau_s)?;
        if let Some(t) = output(temporal_out, w * w) {
            t.copy_from_slice(pair.temporal.data());
        }
        if let Some(s) = output(spatial_out, n * n) {
            s.copy_from_slice(pair.spatial.data());
        }
        Ok(())
    })
}

/// Raw scores of one unnormalized row-major `w x n` window: per-timestep
/// point scores (`w`), per-sensor scores (`n`) and temporal row scores (`w`).
/// Outputs may be null. Scores of a disabled branch are NaN.
///
/// # Safety
/// `model` must be a live handle and `values` hold `w * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn madt_score_window(
    model: *const MadtModel,
    values: *const f64,
    point_out: *mut f64,
    sensor_out: *mut f64,
    temporal_out: *mut f64,
) -> MadtStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (w, n) = (m.checkpoint.state.config.w, m.checkpoint.state.config.n);
        let r = diagnose(m, input(values, w * n, "values")?)?;
        let fill = |out: Option<&mut [f64]>, src: &[f64]| {
            if let Some(out) = out {
                if src.len() == out.len() {
                    out.copy_from_slice(src);
                } else {
                    out.fill(f64::NAN);
                }
            }
        };
        fill(output(point_out, w), &r.point_scores);
        fill(output(sensor_out, n), &r.sensor_scores);
        fill(output(temporal_out, w), &r.temporal_scores);
        Ok(())
    })
}

/// Thresholded diagnosis of one window. `point_flags_out` (`w` bytes, 0/1)
/// and `ranking_out` (`n` sensor indices, most suspicious first) may be null.
///
/// # Safety
/// `model` must be a live handle, `values` hold `w * n` doubles and
/// `summary_out` be writable.
#[no_mangle]
pub unsafe extern "C" fn madt_detect_window(
    model: *const MadtModel,
    values: *const f64,
    point_flags_out: *mut u8,
    ranking_out: *mut usize,
    summary_out: *mut MadtWindowSummary,
) -> MadtStatus {
    guard(|| {
        let m = model_ref(model)?;
        if summary_out.is_null() {
            return Err(null("summary_out"));
        }
        let (w, n) = (m.checkpoint.state.config.w, m.checkpoint.state.config.n);
        let r = diagnose(m, input(values, w * n, "values")?)?;
        if let Some(out) = output(point_flags_out, w) {
            for (o, &f) in out.iter_mut().zip(&r.point_flags) {
                *o = f as u8;
            }
        }
        if let Some(out) = output(ranking_out, n) {
            if r.sensor_ranking.len() == n {
                out.copy_from_slice(&r.sensor_ranking);
            } else {
                out.fill(usize::MAX);
            }
        }
        *summary_out = MadtWindowSummary {
            flagged_points: r.point_flags.iter().filter(|&&f| f).count(),
            duration_estimate: r.duration_estimate,
            flagged_sensors: r.flagged_sensor_count(),
            top_sensor: r.sensor_ranking.first().copied().unwrap_or(usize::MAX),
        };
        Ok(())
    })
}

/// Message of the most recent call on this thread; empty when it succeeded.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn madt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn madt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
