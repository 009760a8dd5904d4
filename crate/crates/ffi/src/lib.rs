//! C ABI over the reconbench metrics and attack taxonomy.
//!
//! Every fallible call returns an [`RbStatus`]; on failure the message is
//! kept per thread and read with [`rb_last_error`]. Objects cross the
//! boundary as opaque handles that the caller frees with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use reconbench::data::{ImageShape, LabeledDataset};
use reconbench::error::Error;
use reconbench::knowledge::classify_attack;
use reconbench::metrics::{extractor_by_id, mse, psnr_from_mse, ssim, MatchOptions, MetricReport, SampleDistanceKind};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    UnknownId = 4,
    InsufficientSamples = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// Which per-sample distance to read from a report.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RbSampleMetric {
    Ssim = 0,
    Psnr = 1,
    Mse = 2,
}

impl From<RbSampleMetric> for SampleDistanceKind {
    fn from(m: RbSampleMetric) -> Self {
        match m {
            RbSampleMetric::Ssim => SampleDistanceKind::Ssim,
            RbSampleMetric::Psnr => SampleDistanceKind::Psnr,
            RbSampleMetric::Mse => SampleDistanceKind::Mse,
        }
    }
}

/// Minimal knowledge an attack needs. Levels count up from the weakest:
/// training type 0 static / 1 dynamic, model access 0 black-box /
/// 1 white-box, dataset access 0 none / 1 similar / 2 same distribution.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RbKnowledge {
    pub training_type: u32,
    pub model_access: u32,
    pub dataset_access: u32,
}

/// Opaque image set.
pub struct RbDataset(LabeledDataset);

/// Opaque metric report.
pub struct RbReport(MetricReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RbStatus {
    match e {
        Error::DimensionMismatch(_) => RbStatus::DimensionMismatch,
        Error::UnknownAttack(_) => RbStatus::UnknownId,
        Error::InsufficientSamples { .. } => RbStatus::InsufficientSamples,
        Error::Io { .. } => RbStatus::Io,
        _ => RbStatus::InvalidArgument,
    }
}

fn fail(status: RbStatus, msg: impl Into<String>) -> RbStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (RbStatus, String)>) -> RbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RbStatus::Ok,
        Ok(Err((s, msg))) => fail(s, msg),
        Err(_) => fail(RbStatus::Internal, "panic inside reconbench"),
    }
}

fn lib_err(e: Error) -> (RbStatus, String) {
    (status_of(&e), e.to_string())
}

fn null() -> (RbStatus, String) {
    (RbStatus::NullPointer, "null pointer argument".into())
}

unsafe fn slice<'a>(p: *const f32, len: usize) -> Result<&'a [f32], (RbStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char) -> Result<&'a str, (RbStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (RbStatus::InvalidArgument, "string is not UTF-8".into()))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an empty image set of `height × width × channels` images.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn rb_dataset_new(
    height: usize,
    width: usize,
    channels: usize,
    classes: usize,
    out: *mut *mut RbDataset,
) -> RbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        if height == 0 || width == 0 || channels == 0 || classes == 0 {
            return Err((RbStatus::InvalidArgument, "dimensions and class count must be positive".into()));
        }
        let ds = LabeledDataset::empty(ImageShape::new(height, width, channels), classes);
        *out = Box::into_raw(Box::new(RbDataset(ds)));
        Ok(())
    })
}

/// Appends one image of `len` values in `[0, 1]`, channel-last.
///
/// # Safety
/// `ds` must come from [`rb_dataset_new`]; `pixels` must point to `len`
/// floats.
#[no_mangle]
pub unsafe extern "C" fn rb_dataset_push(ds: *mut RbDataset, pixels: *const f32, len: usize, label: usize) -> RbStatus {
    guard(|| {
        let ds = ds.as_mut().ok_or_else(null)?;
        let px = slice(pixels, len)?;
        let want = ds.0.shape().len();
        if len != want {
            return Err((RbStatus::DimensionMismatch, format!("image has {len} values, expected {want}")));
        }
        if label >= ds.0.class_count() {
            return Err((RbStatus::InvalidArgument, format!("label {label} out of range")));
        }
        ds.0.push(px, label);
        Ok(())
    })
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or come from [`rb_dataset_new`].
#[no_mangle]
pub unsafe extern "C" fn rb_dataset_len(ds: *const RbDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or an unfreed handle from [`rb_dataset_new`].
#[no_mangle]
pub unsafe extern "C" fn rb_dataset_free(ds: *mut RbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Mean squared error of two images of `len` values.
///
/// # Safety
/// `a` and `b` must point to `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rb_mse(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> RbStatus {
    guard(|| {
        let (a, b) = (slice(a, len)?, slice(b, len)?);
        if len == 0 {
            return Err((RbStatus::InvalidArgument, "empty images".into()));
        }
        *out.as_mut().ok_or_else(null)? = mse(a, b);
        Ok(())
    })
}

/// PSNR in dB for pixel range 1, capped for identical images.
///
/// # Safety
/// As [`rb_mse`].
#[no_mangle]
pub unsafe extern "C" fn rb_psnr(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> RbStatus {
    let mut m = 0.0;
    let s = rb_mse(a, b, len, &mut m);
    if s == RbStatus::Ok {
        match out.as_mut() {
            Some(o) => *o = psnr_from_mse(m),
            None => return fail(RbStatus::NullPointer, "null pointer argument"),
        }
    }
    s
}

/// Mean SSIM of two channel-last images.
///
/// # Safety
/// `a` and `b` must point to `height * width * channels` floats.
#[no_mangle]
pub unsafe extern "C" fn rb_ssim(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
) -> RbStatus {
    guard(|| {
        let shape = ImageShape::new(height, width, channels);
        let (a, b) = (slice(a, shape.len())?, slice(b, shape.len())?);
        let v = ssim(a, b, shape).map_err(lib_err)?;
        *out.as_mut().ok_or_else(null)? = v;
        Ok(())
    })
}

/// Scores reconstructions against targets with every sample metric and
/// the distribution distance under `extractor` (e.g. `"pool7"`).
///
/// # Safety
/// `rec` and `tar` must be live dataset handles, `extractor` a
/// NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rb_evaluate(
    rec: *const RbDataset,
    tar: *const RbDataset,
    extractor: *const c_char,
    out: *mut *mut RbReport,
) -> RbStatus {
    guard(|| {
        let (rec, tar) = (rec.as_ref().ok_or_else(null)?, tar.as_ref().ok_or_else(null)?);
        if out.is_null() {
            return Err(null());
        }
        let ex = extractor_by_id(string(extractor)?, tar.0.shape()).map_err(lib_err)?;
        let r = MetricReport::evaluate(&rec.0, &tar.0, ex.as_ref(), &SampleDistanceKind::ALL, MatchOptions::default())
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(RbReport(r)));
        Ok(())
    })
}

/// # Safety
/// `report` must be a live report handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rb_report_d_dis(report: *const RbReport, out: *mut f64) -> RbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(null)?;
        *out.as_mut().ok_or_else(null)? = r.0.d_dis;
        Ok(())
    })
}

/// Sample distance and coverage (a fraction) for one metric.
///
/// # Safety
/// `report` must be a live report handle; `s_dis` and `coverage` writable.
#[no_mangle]
pub unsafe extern "C" fn rb_report_sample(
    report: *const RbReport,
    metric: RbSampleMetric,
    s_dis: *mut f64,
    coverage: *mut f64,
) -> RbStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(null)?;
        let s = r
            .0
            .get(metric.into())
            .ok_or_else(|| (RbStatus::InvalidArgument, "metric not in report".to_string()))?;
        *s_dis.as_mut().ok_or_else(null)? = s.s_dis;
        *coverage.as_mut().ok_or_else(null)? = s.coverage;
        Ok(())
    })
}

/// The report as JSON; free with [`rb_string_free`]. Null on failure.
///
/// # Safety
/// `report` must be null or a live report handle.
#[no_mangle]
pub unsafe extern "C" fn rb_report_to_json(report: *const RbReport) -> *mut c_char {
    let Some(r) = report.as_ref() else {
        fail(RbStatus::NullPointer, "null pointer argument");
        return ptr::null_mut();
    };
    match serde_json::to_string(&r.0) {
        Ok(s) => CString::new(s).map_or(ptr::null_mut(), CString::into_raw),
        Err(e) => {
            fail(RbStatus::Internal, e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `report` must be null or an unfreed report handle.
#[no_mangle]
pub unsafe extern "C" fn rb_report_free(report: *mut RbReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn rb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Minimal knowledge triple of an attack id such as `"mi_face"`.
///
/// # Safety
/// `attack_id` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rb_classify_attack(attack_id: *const c_char, out: *mut RbKnowledge) -> RbStatus {
    guard(|| {
        let t = classify_attack(string(attack_id)?).map_err(lib_err)?;
        *out.as_mut().ok_or_else(null)? = RbKnowledge {
            training_type: t.training_type as u32,
            model_access: t.model_access as u32,
            dataset_access: t.dataset_access as u32,
        };
        Ok(())
    })
}
