use std::ffi::{CStr, CString};
use std::ptr;

use reconbench_ffi::*;

fn dataset(images: &[[f32; 64]]) -> *mut RbDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { rb_dataset_new(8, 8, 1, 2, &mut ds) }, RbStatus::Ok);
    for (i, im) in images.iter().enumerate() {
        assert_eq!(unsafe { rb_dataset_push(ds, im.as_ptr(), im.len(), i % 2) }, RbStatus::Ok);
    }
    ds
}

fn last_error() -> String {
    let p = rb_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn ramp(k: usize) -> [f32; 64] {
    std::array::from_fn(|p| ((p * (k + 1)) % 17) as f32 / 17.0)
}

#[test]
fn pixel_metrics_match_the_library() {
    let (a, b) = (ramp(1), ramp(2));
    let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(rb_mse(a.as_ptr(), b.as_ptr(), 64, &mut m), RbStatus::Ok);
        assert_eq!(rb_psnr(a.as_ptr(), b.as_ptr(), 64, &mut p), RbStatus::Ok);
        assert_eq!(rb_ssim(a.as_ptr(), a.as_ptr(), 8, 8, 1, &mut s), RbStatus::Ok);
    }
    assert_eq!(m, reconbench::metrics::mse(&a, &b));
    assert!((p - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
    assert!((s - 1.0).abs() < 1e-9);
}

#[test]
fn evaluate_round_trips_through_handles() {
    let rec = dataset(&[ramp(0), ramp(1), ramp(2), ramp(3)]);
    let tar = dataset(&[ramp(0), ramp(1), ramp(2), ramp(3)]);
    assert_eq!(unsafe { rb_dataset_len(rec) }, 4);
    let ex = CString::new("identity").unwrap();
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { rb_evaluate(rec, tar, ex.as_ptr(), &mut report) }, RbStatus::Ok);
    let (mut d, mut s, mut c) = (f64::NAN, f64::NAN, f64::NAN);
    unsafe {
        assert_eq!(rb_report_d_dis(report, &mut d), RbStatus::Ok);
        assert_eq!(rb_report_sample(report, RbSampleMetric::Mse, &mut s, &mut c), RbStatus::Ok);
    }
    assert!(d.abs() < 1e-6, "identical sets: {d}");
    assert_eq!((s, c), (0.0, 1.0));
    let json = unsafe { rb_report_to_json(report) };
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"MSE\""));
    unsafe {
        rb_string_free(json);
        rb_report_free(report);
        rb_dataset_free(rec);
        rb_dataset_free(tar);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let a = ramp(0);
    let mut out = 0.0;
    assert_eq!(unsafe { rb_mse(ptr::null(), a.as_ptr(), 64, &mut out) }, RbStatus::NullPointer);
    assert!(last_error().contains("null"));
    // SSIM needs at least a 7×7 window
    assert_eq!(unsafe { rb_ssim(a.as_ptr(), a.as_ptr(), 2, 2, 1, &mut out) }, RbStatus::DimensionMismatch);
    let ds = dataset(&[]);
    assert_eq!(unsafe { rb_dataset_push(ds, a.as_ptr(), 10, 0) }, RbStatus::DimensionMismatch);
    assert_eq!(unsafe { rb_dataset_push(ds, a.as_ptr(), 64, 5) }, RbStatus::InvalidArgument);
    let bogus = CString::new("no_such_attack").unwrap();
    let mut k = RbKnowledge::default();
    assert_eq!(unsafe { rb_classify_attack(bogus.as_ptr(), &mut k) }, RbStatus::UnknownId);
    assert!(last_error().contains("no_such_attack"));
    unsafe { rb_dataset_free(ds) };
}

#[test]
fn taxonomy_levels() {
    let mut k = RbKnowledge::default();
    let id = CString::new("updates_leak").unwrap();
    assert_eq!(unsafe { rb_classify_attack(id.as_ptr(), &mut k) }, RbStatus::Ok);
    let t = reconbench::knowledge::classify_attack("updates_leak").unwrap();
    assert_eq!(k.training_type, t.training_type as u32);
    assert_eq!(k.model_access, t.model_access as u32);
    assert_eq!(k.dataset_access, t.dataset_access as u32);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(rb_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
