//! C ABI over `cot-core`.
//!
//! Every fallible function returns a [`CotStatus`] and writes its result
//! through an out-pointer. On failure the message is kept per thread and can
//! be read with [`cot_last_error_message`]. Handles are opaque and must be
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use cot_core::calibration::{fit_temperature, CalibrationModel};
use cot_core::estimators::Method;
use cot_core::io::{read_json, read_logits_csv, write_json};
use cot_core::ot::solve_emd;
use cot_core::pipeline::{EstimationContext, EstimationOptions};
use cot_core::types::{EmpiricalMeasure, LabelDistribution, LogitsDataset};
use cot_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Parse = 3,
    Io = 4,
    Json = 5,
    NonConvergence = 6,
    UndefinedFit = 7,
    OracleTooLarge = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotMethod {
    Cot = 0,
    Ac = 1,
    Entropy = 2,
    AtcMc = 3,
    AtcNe = 4,
    Gde = 5,
}

fn method_from_code(code: u32) -> Result<Method, Failure> {
    Ok(match code {
        c if c == CotMethod::Cot as u32 => Method::Cot,
        c if c == CotMethod::Ac as u32 => Method::Ac,
        c if c == CotMethod::Entropy as u32 => Method::Entropy,
        c if c == CotMethod::AtcMc as u32 => Method::AtcMc,
        c if c == CotMethod::AtcNe as u32 => Method::AtcNe,
        c if c == CotMethod::Gde as u32 => Method::Gde,
        c => return Err(invalid(format!("unknown method code {c}"))),
    })
}

/// Logits rows with optional labels.
pub struct CotDataset(LogitsDataset);

/// A fitted temperature.
pub struct CotCalibration(CalibrationModel);

/// Label value marking an unlabeled row.
pub const COT_UNLABELED: i64 = -1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    // interior NULs would truncate the message; replace them
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> CotStatus {
    match err {
        Error::Validation(_) => CotStatus::InvalidInput,
        Error::Parse { .. } => CotStatus::Parse,
        Error::Io { .. } => CotStatus::Io,
        Error::Json { .. } => CotStatus::Json,
        Error::NonConvergence { .. } => CotStatus::NonConvergence,
        Error::UndefinedFit(_) => CotStatus::UndefinedFit,
        Error::OracleTooLarge(_) => CotStatus::OracleTooLarge,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::Validation(msg.into()))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CotStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CotStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("{name} is null"));
            CotStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CotStatus::Panic
        }
    }
}

unsafe fn reference<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn buffer<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn path<'a>(p: *const c_char, name: &'static str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn rows_times(rows: usize, cols: usize) -> Result<usize, Failure> {
    rows.checked_mul(cols).ok_or_else(|| invalid("buffer size overflows"))
}

/// Message for the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn cot_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cot_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from a row-major `num_rows x num_classes` logits buffer.
/// `labels` may be null (all rows unlabeled); otherwise it holds `num_rows`
/// entries where `COT_UNLABELED` marks an unlabeled row.
///
/// # Safety
/// Buffers must be valid for the given lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_new(
    num_rows: usize,
    num_classes: usize,
    logits: *const f64,
    labels: *const i64,
    out: *mut *mut CotDataset,
) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let logits = buffer(logits, rows_times(num_rows, num_classes)?, "logits")?.to_vec();
        let labels = if labels.is_null() {
            vec![None; num_rows]
        } else {
            buffer(labels, num_rows, "labels")?
                .iter()
                .enumerate()
                .map(|(i, &l)| match l {
                    COT_UNLABELED => Ok(None),
                    l if l >= 0 => Ok(Some(l as usize)),
                    l => Err(invalid(format!("row {i}: negative label {l}"))),
                })
                .collect::<Result<_, _>>()?
        };
        let data = LogitsDataset::from_flat(num_classes, labels, logits)?;
        *out = Box::into_raw(Box::new(CotDataset(data)));
        Ok(())
    })
}

/// Reads a `label,logit_0,...` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_load_csv(path: *const c_char, out: *mut *mut CotDataset) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let data = read_logits_csv(self::path(path, "path")?)?;
        *out = Box::into_raw(Box::new(CotDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_free(dataset: *mut CotDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_num_rows(dataset: *const CotDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_num_classes(dataset: *const CotDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_classes())
}

/// Top-1 error of a fully labeled dataset.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_dataset_error(dataset: *const CotDataset, out: *mut f64) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        *out = reference(dataset, "dataset")?.0.argmax_error()?;
        Ok(())
    })
}

/// Fits a temperature on a fully labeled validation set.
///
/// # Safety
/// `val` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_calibration_fit(val: *const CotDataset, out: *mut *mut CotCalibration) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let model = fit_temperature(&reference(val, "val")?.0)?;
        *out = Box::into_raw(Box::new(CotCalibration(model)));
        Ok(())
    })
}

/// Loads a calibration JSON written by `cot calibrate` or `cot_calibration_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_calibration_load(path: *const c_char, out: *mut *mut CotCalibration) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let model: CalibrationModel = read_json(self::path(path, "path")?)?;
        model.validate()?;
        *out = Box::into_raw(Box::new(CotCalibration(model)));
        Ok(())
    })
}

/// # Safety
/// `calibration` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cot_calibration_save(calibration: *const CotCalibration, path: *const c_char) -> CotStatus {
    guard(|| {
        let model = &reference(calibration, "calibration")?.0;
        write_json(self::path(path, "path")?, model)?;
        Ok(())
    })
}

/// # Safety
/// `calibration` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_calibration_temperature(
    calibration: *const CotCalibration,
    out: *mut f64,
) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        *out = reference(calibration, "calibration")?.0.temperature;
        Ok(())
    })
}

/// # Safety
/// `calibration` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cot_calibration_free(calibration: *mut CotCalibration) {
    if !calibration.is_null() {
        drop(Box::from_raw(calibration));
    }
}

/// Source-side inputs for [`cot_estimate`]. Pointer fields may be null.
#[repr(C)]
pub struct CotSource {
    /// Labeled validation set: source labels for COT, threshold for ATC,
    /// and the temperature when `calibration` is null.
    pub val: *const CotDataset,
    pub calibration: *const CotCalibration,
    /// Source label probabilities (`num_label_probs` entries); replaces the
    /// validation labels for COT when non-null.
    pub label_probs: *const f64,
    pub num_label_probs: usize,
    /// Zero selects the default of 2000.
    pub batch_size: usize,
    pub seed: u64,
}

/// Estimates the error of `target` with `method`, a `CotMethod` value.
/// `second` is the second model's logits on the same rows and is only read
/// by GDE.
///
/// # Safety
/// `source` and `target` must be valid; `second` may be null; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cot_estimate(
    method: u32,
    source: *const CotSource,
    target: *const CotDataset,
    second: *const CotDataset,
    out: *mut f64,
) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let method = method_from_code(method)?;
        let source = reference(source, "source")?;
        let target = &reference(target, "target")?.0;
        let val = source.val.as_ref().map(|d| &d.0);
        let calibration = source.calibration.as_ref().map(|c| &c.0);
        let label_dist = if source.label_probs.is_null() {
            None
        } else {
            let probs = buffer(source.label_probs, source.num_label_probs, "label_probs")?;
            Some(LabelDistribution::new(probs.to_vec())?)
        };
        let mut options = EstimationOptions::default();
        if source.batch_size != 0 {
            options.batch_size = source.batch_size;
        }
        options.seed = source.seed;
        let ctx = EstimationContext::new(calibration, val, label_dist, options)?;
        let report = ctx.estimate(method, target, second.as_ref().map(|d| &d.0))?;
        *out = report.estimate;
        Ok(())
    })
}

/// Exact EMD under the L1 ground metric between two weighted point clouds
/// of dimension `dim`. Null weights mean uniform.
///
/// # Safety
/// Point buffers hold `m * dim` and `n * dim` values, weight buffers `m` and
/// `n`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cot_emd(
    dim: usize,
    m: usize,
    a_points: *const f64,
    a_weights: *const f64,
    n: usize,
    b_points: *const f64,
    b_weights: *const f64,
    out: *mut f64,
) -> CotStatus {
    guard(|| {
        let out = self::out(out, "out")?;
        let measure = |rows: usize, points: *const f64, weights: *const f64, name| {
            let points = buffer(points, rows_times(rows, dim)?, name)?.to_vec();
            let m = if weights.is_null() {
                EmpiricalMeasure::uniform(dim, points)?
            } else {
                EmpiricalMeasure::new(dim, points, buffer(weights, rows, "weights")?.to_vec())?
            };
            Ok::<_, Failure>(m)
        };
        let a = measure(m, a_points, a_weights, "a_points")?;
        let b = measure(n, b_points, b_weights, "b_points")?;
        *out = solve_emd(&a, &b)?.total_cost;
        Ok(())
    })
}
