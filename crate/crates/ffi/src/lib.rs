//! C ABI over trained classifiers and budgeted hard-label oracles.
//!
//! Every fallible call returns an [`IdealStatus`]; on failure the message is
//! available from [`ideal_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ideal::nn::Classifier;
use ideal::oracle::{make_http_oracle, make_local_oracle, HardLabelOracle};
use ideal::tensor::Tensor;
use ideal::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdealStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    WeightFormat = 5,
    BudgetExhausted = 6,
    Unauthorized = 7,
    Transport = 8,
    Protocol = 9,
    Internal = 10,
}

/// A trained classifier loaded from a weight file.
pub struct IdealClassifier {
    net: Classifier,
}

/// A metered hard-label oracle, local or remote.
pub struct IdealOracle {
    inner: Box<dyn HardLabelOracle + Send>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> IdealStatus {
    match e {
        Error::Shape { .. } => IdealStatus::Shape,
        Error::InvalidArgument(_) | Error::Config(_) => IdealStatus::InvalidArgument,
        Error::Io(_) => IdealStatus::Io,
        Error::WeightFormat(_) | Error::IdxFormat(_) => IdealStatus::WeightFormat,
        Error::BudgetExhausted { .. } => IdealStatus::BudgetExhausted,
        Error::Unauthorized => IdealStatus::Unauthorized,
        Error::Transport(_) => IdealStatus::Transport,
        Error::Protocol(_) => IdealStatus::Protocol,
        Error::LogDomain { .. } | Error::Backward(_) => IdealStatus::Internal,
    }
}

struct Fail(IdealStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(IdealStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IdealStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IdealStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IdealStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(IdealStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn images_arg(data: *const f32, n: usize, shape: [usize; 3]) -> Result<Tensor, Fail> {
    if data.is_null() {
        return Err(null("data"));
    }
    let len = n
        .checked_mul(shape[0] * shape[1] * shape[2])
        .ok_or_else(|| Fail(IdealStatus::InvalidArgument, "image buffer size overflows".into()))?;
    let values = std::slice::from_raw_parts(data, len).to_vec();
    Ok(Tensor::new(&[n, shape[0], shape[1], shape[2]], values)?)
}

unsafe fn write_labels(labels: &[usize], out: *mut u32) {
    for (i, &l) in labels.iter().enumerate() {
        *out.add(i) = l as u32;
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ideal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ideal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a classifier weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ideal_classifier_load(path: *const c_char, out: *mut *mut IdealClassifier) -> IdealStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let net = Classifier::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(IdealClassifier { net }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from `ideal_classifier_load` or be null.
#[no_mangle]
pub unsafe extern "C" fn ideal_classifier_free(handle: *mut IdealClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Writes `(channels, height, width)` to `shape[0..3]` and the class count
/// to `classes`.
///
/// # Safety
/// `handle` must be live; `shape` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn ideal_classifier_info(
    handle: *const IdealClassifier,
    shape: *mut usize,
    classes: *mut usize,
) -> IdealStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if shape.is_null() || classes.is_null() {
            return Err(null("output"));
        }
        let s = h.net.input_shape();
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&s);
        *classes = h.net.classes();
        Ok(())
    })
}

/// Predicted labels for `n` images laid out as `n × c × h × w` floats in
/// `[-1, 1]`, in the classifier's own input shape.
///
/// # Safety
/// `data` must hold `n·c·h·w` floats and `labels` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn ideal_classifier_predict(
    handle: *const IdealClassifier,
    data: *const f32,
    n: usize,
    labels: *mut u32,
) -> IdealStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = images_arg(data, n, h.net.input_shape())?;
        write_labels(&h.net.predict_labels(&x)?, labels);
        Ok(())
    })
}

/// Wraps a teacher weight file in an in-process oracle with `budget` queries.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ideal_oracle_open_local(
    path: *const c_char,
    budget: usize,
    out: *mut *mut IdealOracle,
) -> IdealStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let oracle = make_local_oracle(Path::new(str_arg(path, "path")?), budget)?;
        *out = Box::into_raw(Box::new(IdealOracle { inner: Box::new(oracle) }));
        Ok(())
    })
}

/// Connects to a running oracle service.
///
/// # Safety
/// `url` and `api_key` must be NUL-terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ideal_oracle_connect(
    url: *const c_char,
    api_key: *const c_char,
    out: *mut *mut IdealOracle,
) -> IdealStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let oracle = make_http_oracle(str_arg(url, "url")?, str_arg(api_key, "api_key")?)?;
        *out = Box::into_raw(Box::new(IdealOracle { inner: Box::new(oracle) }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from an `ideal_oracle_*` constructor or be null.
#[no_mangle]
pub unsafe extern "C" fn ideal_oracle_free(handle: *mut IdealOracle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Buys hard labels for `n` images of shape `(c, h, w)`. All or nothing: if
/// the budget cannot cover `n`, nothing is charged and
/// `IDEAL_STATUS_BUDGET_EXHAUSTED` is returned.
///
/// # Safety
/// `data` must hold `n·c·h·w` floats and `labels` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn ideal_oracle_query(
    handle: *mut IdealOracle,
    data: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    labels: *mut u32,
) -> IdealStatus {
    guard(|| {
        let o = handle.as_mut().ok_or_else(|| null("handle"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = images_arg(data, n, [c, h, w])?;
        write_labels(&o.inner.query(&x)?, labels);
        Ok(())
    })
}

/// Queries used and remaining, as last known to this handle.
///
/// # Safety
/// `handle` must be live; `used` and `remaining` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ideal_oracle_budget(
    handle: *const IdealOracle,
    used: *mut usize,
    remaining: *mut usize,
) -> IdealStatus {
    guard(|| {
        let o = handle.as_ref().ok_or_else(|| null("handle"))?;
        if used.is_null() || remaining.is_null() {
            return Err(null("output"));
        }
        *used = o.inner.ledger().used();
        *remaining = o.inner.ledger().remaining();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn null_handles_are_rejected() {
        let mut labels = [0u32; 1];
        let st = unsafe { ideal_classifier_predict(ptr::null(), [0.0f32].as_ptr(), 1, labels.as_mut_ptr()) };
        assert_eq!(st, IdealStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(ideal_last_error()) }.to_str().unwrap();
        assert!(msg.contains("handle"), "{msg}");
    }

    #[test]
    fn free_accepts_null() {
        unsafe {
            ideal_classifier_free(ptr::null_mut());
            ideal_oracle_free(ptr::null_mut());
        }
    }

    #[test]
    fn version_is_terminated() {
        let v = unsafe { CStr::from_ptr(ideal_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
