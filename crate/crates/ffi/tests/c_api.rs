use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ideal::nn::{Arch, Classifier};
use ideal::tensor::SeededRng;
use ideal_ffi::*;

fn saved_net(dir: &Path) -> (Classifier, CString) {
    let net = Classifier::new(Arch::Mlp, [1, 28, 28], 10, &mut SeededRng::new(4, "ffi")).unwrap();
    let path = dir.join("t.w");
    net.save(&path).unwrap();
    (net, CString::new(path.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ideal_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn classifier_predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = saved_net(dir.path());
    let x = SeededRng::new(5, "x").uniform(&[7, 1, 28, 28], -1.0, 1.0);
    let expected: Vec<u32> = net.predict_labels(&x).unwrap().into_iter().map(|l| l as u32).collect();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ideal_classifier_load(path.as_ptr(), &mut h) }, IdealStatus::Ok);
    let (mut shape, mut classes) = ([0usize; 3], 0usize);
    assert_eq!(unsafe { ideal_classifier_info(h, shape.as_mut_ptr(), &mut classes) }, IdealStatus::Ok);
    assert_eq!((shape, classes), ([1, 28, 28], 10));
    let mut labels = vec![0u32; 7];
    let st = unsafe { ideal_classifier_predict(h, x.data().as_ptr(), 7, labels.as_mut_ptr()) };
    assert_eq!(st, IdealStatus::Ok);
    assert_eq!(labels, expected);
    unsafe { ideal_classifier_free(h) };
}

#[test]
fn missing_file_reports_io() {
    let path = CString::new("/nonexistent/teacher.w").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ideal_classifier_load(path.as_ptr(), &mut h) }, IdealStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn garbage_file_reports_weight_format() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk.w");
    std::fs::write(&p, b"not a weight file").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ideal_classifier_load(path.as_ptr(), &mut h) }, IdealStatus::WeightFormat);
}

#[test]
fn local_oracle_meters_and_refuses_overdraft() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = saved_net(dir.path());
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { ideal_oracle_open_local(path.as_ptr(), 10, &mut o) }, IdealStatus::Ok);

    let x = SeededRng::new(6, "x").uniform(&[8, 1, 28, 28], -1.0, 1.0);
    let mut labels = vec![99u32; 8];
    let st = unsafe { ideal_oracle_query(o, x.data().as_ptr(), 8, 1, 28, 28, labels.as_mut_ptr()) };
    assert_eq!(st, IdealStatus::Ok);
    let expected: Vec<u32> = net.predict_labels(&x).unwrap().into_iter().map(|l| l as u32).collect();
    assert_eq!(labels, expected);

    let st = unsafe { ideal_oracle_query(o, x.data().as_ptr(), 8, 1, 28, 28, labels.as_mut_ptr()) };
    assert_eq!(st, IdealStatus::BudgetExhausted);
    let (mut used, mut remaining) = (0, 0);
    assert_eq!(unsafe { ideal_oracle_budget(o, &mut used, &mut remaining) }, IdealStatus::Ok);
    assert_eq!((used, remaining), (8, 2));

    let st = unsafe { ideal_oracle_query(o, x.data().as_ptr(), 1, 1, 14, 14, labels.as_mut_ptr()) };
    assert_eq!(st, IdealStatus::Shape, "{}", last_error());
    unsafe { ideal_oracle_free(o) };
}

#[test]
fn unreachable_service_reports_transport() {
    let url = CString::new("http://127.0.0.1:9").unwrap();
    let key = CString::new("k").unwrap();
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { ideal_oracle_connect(url.as_ptr(), key.as_ptr(), &mut o) }, IdealStatus::Transport);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ideal.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ideal_last_error",
        "ideal_version",
        "ideal_classifier_load",
        "ideal_classifier_free",
        "ideal_classifier_info",
        "ideal_classifier_predict",
        "ideal_oracle_open_local",
        "ideal_oracle_connect",
        "ideal_oracle_query",
        "ideal_oracle_budget",
        "ideal_oracle_free",
        "IDEAL_STATUS_BUDGET_EXHAUSTED",
        "typedef struct IdealClassifier IdealClassifier",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
