//! C ABI over the crl-lab core.
//!
//! Objects are opaque handles created from their JSON descriptors and
//! released with the matching `*_free`. Every fallible call returns a
//! [`CrlStatus`]; on failure `crl_last_error` describes the most recent
//! error on the calling thread. Matrices are dense, row-major `double`
//! buffers. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use crl_lab::contrast::local_ima;
use crl_lab::error::Error;
use crl_lab::metrics::{mcc, CorrelationMode};
use crl_lab::mixing::MixingMap;
use crl_lab::scm::{ancestral_sample, log_density, Scm};
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrlStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed JSON, wrong buffer sizes or invalid parameters.
    InvalidArgument = 2,
    /// Input outside the domain of a map or density.
    Domain = 3,
    /// Singular matrices, non-convergence and other numerical failures.
    Numerical = 4,
    Internal = 5,
}

/// An invertible mixing map.
pub struct CrlMixing(MixingMap);

/// A structural causal model.
pub struct CrlScm(Scm);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CrlStatus {
    match e {
        Error::Domain(_) | Error::UnsupportedDensity { .. } => CrlStatus::Domain,
        Error::Singular(_) | Error::Convergence { .. } | Error::NonFinite { .. } | Error::DegenerateColumn { .. } => {
            CrlStatus::Numerical
        }
        _ => CrlStatus::InvalidArgument,
    }
}

struct Fail(CrlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrlStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            CrlStatus::Internal
        }
    }
}

fn null() -> Fail {
    Fail(CrlStatus::NullPointer, "null pointer argument".into())
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail(CrlStatus::InvalidArgument, format!("invalid UTF-8: {e}")))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got == want {
        Ok(())
    } else {
        Err(Fail(CrlStatus::InvalidArgument, format!("{what} has length {got}, expected {want}")))
    }
}

/// Message of the last failed call on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn crl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Mixing maps

/// Builds a mixing map from its JSON descriptor.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_from_json(json: *const c_char, out: *mut *mut CrlMixing) -> CrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let map: MixingMap = serde_json::from_str(cstr(json)?).map_err(|e| Fail(CrlStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(CrlMixing(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must come from `crl_mixing_from_json` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_free(map: *mut CrlMixing) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Dimension of the map, or 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_dim(map: *const CrlMixing) -> usize {
    map.as_ref().map_or(0, |m| m.0.dim())
}

unsafe fn apply(
    map: *const CrlMixing,
    input: *const f64,
    output: *mut f64,
    len: usize,
    f: impl FnOnce(&MixingMap, &[f64]) -> crl_lab::error::Result<Vec<f64>>,
) -> CrlStatus {
    guard(|| {
        let m = handle(map)?;
        check_len("input", len, m.0.dim())?;
        let y = f(&m.0, slice(input, len)?)?;
        slice_mut(output, len)?.copy_from_slice(&y);
        Ok(())
    })
}

/// `x = f(s)`; both buffers hold `dim` values.
///
/// # Safety
/// Buffers must hold `len` doubles; `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_forward(map: *const CrlMixing, s: *const f64, x: *mut f64, len: usize) -> CrlStatus {
    apply(map, s, x, len, |m, v| m.forward(v))
}

/// `s = f⁻¹(x)`.
///
/// # Safety
/// Buffers must hold `len` doubles; `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_inverse(map: *const CrlMixing, x: *const f64, s: *mut f64, len: usize) -> CrlStatus {
    apply(map, x, s, len, |m, v| m.inverse(v))
}

/// Jacobian of `f` at `s`, written row-major into `jac` (`len²` values).
///
/// # Safety
/// `s` must hold `len` doubles and `jac` `len * len`.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_jacobian(map: *const CrlMixing, s: *const f64, len: usize, jac: *mut f64) -> CrlStatus {
    guard(|| {
        let m = handle(map)?;
        check_len("s", len, m.0.dim())?;
        let j = m.0.jacobian(slice(s, len)?)?;
        let out = slice_mut(jac, len * len)?;
        for r in 0..len {
            for c in 0..len {
                out[r * len + c] = j[(r, c)];
            }
        }
        Ok(())
    })
}

/// Local IMA contrast of `f` at `s`.
///
/// # Safety
/// `s` must hold `len` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn crl_mixing_local_ima(map: *const CrlMixing, s: *const f64, len: usize, out: *mut f64) -> CrlStatus {
    guard(|| {
        let m = handle(map)?;
        check_len("s", len, m.0.dim())?;
        let v = local_ima(&m.0, slice(s, len)?)?;
        *out.as_mut().ok_or_else(null)? = v;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Structural causal models

/// Builds an SCM from its JSON descriptor.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn crl_scm_from_json(json: *const c_char, out: *mut *mut CrlScm) -> CrlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let scm: Scm = serde_json::from_str(cstr(json)?).map_err(|e| Fail(CrlStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(CrlScm(scm)));
        Ok(())
    })
}

/// # Safety
/// `scm` must come from `crl_scm_from_json` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn crl_scm_free(scm: *mut CrlScm) {
    if !scm.is_null() {
        drop(Box::from_raw(scm));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `scm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn crl_scm_nodes(scm: *const CrlScm) -> usize {
    scm.as_ref().map_or(0, |s| s.0.n())
}

/// Draws `count` ancestral samples into `out` (row-major, `count × nodes`).
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn crl_scm_sample(scm: *const CrlScm, count: usize, seed: u64, out: *mut f64, len: usize) -> CrlStatus {
    guard(|| {
        let s = handle(scm)?;
        check_len("out", len, count * s.0.n())?;
        let x = ancestral_sample(&s.0, count, seed)?;
        let buf = slice_mut(out, len)?;
        let n = s.0.n();
        for r in 0..count {
            for c in 0..n {
                buf[r * n + c] = x[(r, c)];
            }
        }
        Ok(())
    })
}

/// Joint log-density at `v`.
///
/// # Safety
/// `v` must hold `len` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn crl_scm_log_density(scm: *const CrlScm, v: *const f64, len: usize, out: *mut f64) -> CrlStatus {
    guard(|| {
        let s = handle(scm)?;
        check_len("v", len, s.0.n())?;
        let lp = log_density(&s.0, slice(v, len)?)?;
        *out.as_mut().ok_or_else(null)? = lp;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Metrics

/// Mean correlation coefficient between `z_hat` and `z`, both row-major
/// `rows × cols`. Uses Spearman correlations when `rank` is true.
///
/// # Safety
/// Both buffers must hold `rows * cols` doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn crl_mcc(z_hat: *const f64, z: *const f64, rows: usize, cols: usize, rank: bool, out: *mut f64) -> CrlStatus {
    guard(|| {
        let a = DMatrix::from_row_slice(rows, cols, slice(z_hat, rows * cols)?);
        let b = DMatrix::from_row_slice(rows, cols, slice(z, rows * cols)?);
        let mode = if rank { CorrelationMode::Rank } else { CorrelationMode::Pearson };
        *out.as_mut().ok_or_else(null)? = mcc(&a, &b, mode)?.score;
        Ok(())
    })
}

