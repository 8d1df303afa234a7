//! C ABI over the estimator: load a checkpoint, turn per-epoch prediction
//! matrices into accuracy-change estimates, and score estimates against a
//! reference trace.
//!
//! Every function returns a [`DapperStatus`]. On failure the message is
//! available from [`dapper_last_error`] on the same thread until the next
//! call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dapper_core::error::Category;
use dapper_core::estimator::EstimatorNet;
use dapper_core::eval::{similarity, EstimationTrace};
use dapper_core::features::{
    build_feature_sequence, global_diversity, individual_uncertainty, mutual_info_estimate, PredictionMatrix,
};
use dapper_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DapperStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Version = 7,
    MissingArtifact = 8,
    Numerical = 9,
    Panic = 10,
}

impl From<Category> for DapperStatus {
    fn from(c: Category) -> Self {
        match c {
            Category::Shape => DapperStatus::Shape,
            Category::InvalidInput => DapperStatus::InvalidInput,
            Category::Config => DapperStatus::Config,
            Category::Io => DapperStatus::Io,
            Category::Format => DapperStatus::Format,
            Category::Version => DapperStatus::Version,
            Category::MissingArtifact => DapperStatus::MissingArtifact,
            Category::Numerical => DapperStatus::Numerical,
        }
    }
}

/// Opaque handle to a loaded estimator.
pub struct DapperEstimator {
    net: EstimatorNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DapperStatus, msg: impl Into<String>) -> DapperStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> DapperStatus {
    let status = e.category().into();
    set_error(e.to_string());
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), DapperStatus>) -> DapperStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DapperStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(DapperStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: dapper_core::Result<T>) -> Result<T, DapperStatus> {
    r.map_err(from_error)
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), DapperStatus> {
    if p.is_null() {
        Err(fail(DapperStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn checked_len(parts: &[usize]) -> Result<usize, DapperStatus> {
    parts
        .iter()
        .try_fold(1usize, |acc, &p| acc.checked_mul(p))
        .ok_or_else(|| fail(DapperStatus::InvalidInput, "buffer size overflows"))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dapper_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dapper_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads an estimator checkpoint. On success `*out` owns a handle that must
/// be released with [`dapper_estimator_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapper_estimator_load(path: *const c_char, out: *mut *mut DapperEstimator) -> DapperStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(DapperStatus::InvalidInput, "path is not UTF-8"))?;
        let net = lift(EstimatorNet::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(DapperEstimator { net }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`dapper_estimator_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn dapper_estimator_free(handle: *mut DapperEstimator) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of classes the estimator expects.
///
/// # Safety
/// `handle` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dapper_estimator_num_classes(handle: *const DapperEstimator, out: *mut usize) -> DapperStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(out, "out")?;
        *out = (*handle).net.num_classes();
        Ok(())
    })
}

fn matrices(probs: &[f64], epochs: usize, rows: usize, classes: usize) -> Result<Vec<PredictionMatrix>, DapperStatus> {
    let per = rows * classes;
    (0..epochs)
        .map(|e| lift(PredictionMatrix::new(rows, classes, probs[e * per..(e + 1) * per].to_vec())))
        .collect()
}

/// Estimates the accuracy change at each epoch from the model's softmax
/// outputs on the same unlabeled validation set after every epoch.
///
/// `probs` holds `epochs * rows * classes` values, epoch-major then
/// row-major; epoch 0 is the model before adaptation. Writes `epochs`
/// values to `out_delta`, the first of which is 0.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dapper_estimate(
    handle: *const DapperEstimator,
    probs: *const f64,
    epochs: usize,
    rows: usize,
    classes: usize,
    out_delta: *mut f64,
) -> DapperStatus {
    guard(|| {
        non_null(handle, "handle")?;
        non_null(probs, "probs")?;
        non_null(out_delta, "out_delta")?;
        let net = &(*handle).net;
        if epochs == 0 || rows == 0 {
            return Err(fail(DapperStatus::InvalidInput, "need at least one epoch and one row"));
        }
        if classes != net.num_classes() {
            return Err(fail(
                DapperStatus::Shape,
                format!("estimator expects {} classes, got {classes}", net.num_classes()),
            ));
        }
        let n = checked_len(&[epochs, rows, classes])?;
        let ms = matrices(std::slice::from_raw_parts(probs, n), epochs, rows, classes)?;
        let records = lift(build_feature_sequence(&ms, None))?;
        let est = lift(net.estimate_sequence(&records))?;
        std::slice::from_raw_parts_mut(out_delta, epochs).copy_from_slice(&est);
        Ok(())
    })
}

/// Label-free summary of one prediction matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DapperFeatures {
    /// Entropy of the mean prediction.
    pub global_diversity: f64,
    /// Mean per-row entropy.
    pub individual_uncertainty: f64,
    /// Their difference.
    pub mutual_information: f64,
}

/// Computes [`DapperFeatures`] for a `rows x classes` row-major matrix of
/// probabilities.
///
/// # Safety
/// `probs` must hold `rows * classes` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dapper_features(
    probs: *const f64,
    rows: usize,
    classes: usize,
    out: *mut DapperFeatures,
) -> DapperStatus {
    guard(|| {
        non_null(probs, "probs")?;
        non_null(out, "out")?;
        let n = checked_len(&[rows, classes])?;
        let m = lift(PredictionMatrix::new(rows, classes, std::slice::from_raw_parts(probs, n).to_vec()))?;
        *out = DapperFeatures {
            global_diversity: lift(global_diversity(&m))?,
            individual_uncertainty: lift(individual_uncertainty(&m))?,
            mutual_information: lift(mutual_info_estimate(&m))?,
        };
        Ok(())
    })
}

/// One minus the mean absolute difference of two accuracy-change traces over
/// epochs after the first; estimates are clamped to [-1, 1].
///
/// # Safety
/// Both buffers must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dapper_similarity(
    truth: *const f64,
    estimate: *const f64,
    len: usize,
    out: *mut f64,
) -> DapperStatus {
    guard(|| {
        non_null(truth, "truth")?;
        non_null(estimate, "estimate")?;
        non_null(out, "out")?;
        let t = EstimationTrace::new("truth", std::slice::from_raw_parts(truth, len).to_vec());
        let e = EstimationTrace::new("estimate", std::slice::from_raw_parts(estimate, len).to_vec());
        *out = lift(similarity(&t, &e))?.value;
        Ok(())
    })
}
