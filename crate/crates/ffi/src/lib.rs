//! C ABI for ncodid.
//!
//! Every fallible call returns an [`NcodidStatus`]; on failure the message is
//! available from [`ncodid_last_error_message`] on the same thread. Handles
//! are opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ncodid::dataset::{load_dataset, CovariateSchema, Dataset};
use ncodid::estimators::{self, EstimatorKind};
use ncodid::inference::{self, BootstrapParams, EffectEstimate};
use ncodid::matcher::{self, MatchSpec, MatchedSample};
use ncodid::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcodidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Data = 3,
    Schema = 4,
    InvalidArgument = 5,
    Infeasible = 6,
    Estimation = 7,
    Bootstrap = 8,
    Io = 9,
    Json = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcodidEstimator {
    Unadjusted = 0,
    DidNco = 1,
    DidAdjusted = 2,
    Qq = 3,
}

impl From<NcodidEstimator> for EstimatorKind {
    fn from(e: NcodidEstimator) -> Self {
        match e {
            NcodidEstimator::Unadjusted => EstimatorKind::Unadjusted,
            NcodidEstimator::DidNco => EstimatorKind::DidNco,
            NcodidEstimator::DidAdjusted => EstimatorKind::DidAdjusted,
            NcodidEstimator::Qq => EstimatorKind::Qq,
        }
    }
}

/// Plain-value view of an estimate.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NcodidSummary {
    pub atet: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_pairs: usize,
    pub replicates: usize,
    pub failed: usize,
    /// NCO threshold, or -1 without an NCO.
    pub nco_threshold: i64,
}

/// Loaded submission dataset.
pub struct NcodidDataset(Dataset);

/// Result of optimal matching.
pub struct NcodidMatchedSample(MatchedSample);

/// Point estimate with its bootstrap interval.
pub struct NcodidEstimate(EffectEstimate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NcodidStatus {
    match e {
        Error::Data { .. } => NcodidStatus::Data,
        Error::Schema(_) => NcodidStatus::Schema,
        Error::InvalidArgument(_) => NcodidStatus::InvalidArgument,
        Error::Infeasible { .. } => NcodidStatus::Infeasible,
        Error::Estimation(_) => NcodidStatus::Estimation,
        Error::Bootstrap { .. } => NcodidStatus::Bootstrap,
        Error::Io(_) => NcodidStatus::Io,
        Error::Json(_) => NcodidStatus::Json,
    }
}

enum Failure {
    Status(NcodidStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NcodidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NcodidStatus::Ok
        }
        Ok(Err(Failure::Status(status, message))) => {
            set_error(message);
            status
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            NcodidStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(NcodidStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Status(NcodidStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; the caller provides writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ncodid_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ncodid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a submission CSV. `schema_path` may be null for the built-in
/// peer-review schema.
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncodid_dataset_load(
    csv_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut NcodidDataset,
) -> NcodidStatus {
    guard(|| {
        let csv = path_arg(csv_path, "csv_path")?;
        let schema = if schema_path.is_null() {
            CovariateSchema::iclr_default()
        } else {
            CovariateSchema::from_json_reader(File::open(path_arg(schema_path, "schema_path")?)?)?
        };
        let (dataset, _) = load_dataset(File::open(csv)?, &schema)?;
        emit(out, NcodidDataset(dataset))
    })
}

/// Number of records, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncodid_dataset_len(dataset: *const NcodidDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ncodid_dataset_free(dataset: *mut NcodidDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Optimal 1:1 matching with the schema's roles. A positive `nco_years`
/// keeps only years whose window is complete by `evaluation_year`.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncodid_match(
    dataset: *const NcodidDataset,
    nco_years: u32,
    evaluation_year: i32,
    out: *mut *mut NcodidMatchedSample,
) -> NcodidStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let restricted;
        let ds = if nco_years > 0 {
            let cutoff = evaluation_year - nco_years as i32;
            restricted = ds.filter(|r| ds.year_of(r).is_some_and(|y| y <= cutoff));
            &restricted
        } else {
            ds
        };
        let matched = matcher::match_dataset(ds, &MatchSpec::from_schema(ds.schema()))?;
        emit(out, NcodidMatchedSample(matched))
    })
}

/// Number of matched pairs, or 0 for a null handle.
///
/// # Safety
/// `matched` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncodid_matched_len(matched: *const NcodidMatchedSample) -> usize {
    matched.as_ref().map_or(0, |m| m.0.len())
}

/// Total matching distance, NaN for a null handle.
///
/// # Safety
/// `matched` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ncodid_matched_total_cost(matched: *const NcodidMatchedSample) -> f64 {
    matched.as_ref().map_or(f64::NAN, |m| m.0.total_cost)
}

/// # Safety
/// `matched` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ncodid_matched_free(matched: *mut NcodidMatchedSample) {
    if !matched.is_null() {
        drop(Box::from_raw(matched));
    }
}

/// Bootstrap estimate on a matched sample. `nco_years` of 0 means no NCO,
/// which only the unadjusted estimator accepts.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncodid_estimate(
    dataset: *const NcodidDataset,
    matched: *const NcodidMatchedSample,
    estimator: NcodidEstimator,
    nco_years: u32,
    nco_quantile: f64,
    evaluation_year: i32,
    replicates: usize,
    level: f64,
    seed: u64,
    out: *mut *mut NcodidEstimate,
) -> NcodidStatus {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.0;
        let m = &handle(matched, "matched")?.0;
        let kind = EstimatorKind::from(estimator);
        let params = BootstrapParams::new(replicates, level, seed);
        let estimate = if nco_years == 0 {
            if kind.needs_nco() {
                return Err(Error::InvalidArgument(format!("estimator `{kind}` needs an NCO window")).into());
            }
            inference::estimate_matched(&ds.subset(m.ids()), m, None, kind, &params)?
        } else {
            let panel = estimators::nco_panel(ds, m, nco_years, nco_quantile, evaluation_year)?;
            inference::estimate_matched(&panel.dataset, &panel.matched, Some(&panel.spec), kind, &params)?
        };
        emit(out, NcodidEstimate(estimate))
    })
}

/// Copy the numbers of an estimate into `out`.
///
/// # Safety
/// `estimate` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncodid_estimate_summary(
    estimate: *const NcodidEstimate,
    out: *mut NcodidSummary,
) -> NcodidStatus {
    guard(|| {
        let e = &handle(estimate, "estimate")?.0;
        let out = out.as_mut().ok_or_else(|| null("output pointer"))?;
        *out = NcodidSummary {
            atet: e.point.atet,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            level: e.level,
            n_pairs: e.point.n_pairs,
            replicates: e.replicates,
            failed: e.failed,
            nco_threshold: e.point.nco.as_ref().map_or(-1, |s| s.threshold),
        };
        Ok(())
    })
}

/// Full estimate as JSON; release with [`ncodid_string_free`].
///
/// # Safety
/// `estimate` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ncodid_estimate_to_json(estimate: *const NcodidEstimate, out: *mut *mut c_char) -> NcodidStatus {
    guard(|| {
        let e = &handle(estimate, "estimate")?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let text = serde_json::to_string(e).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `estimate` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ncodid_estimate_free(estimate: *mut NcodidEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ncodid_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
