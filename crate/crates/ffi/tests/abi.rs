use std::ffi::{CStr, CString};
use std::ptr;

use crl_lab_ffi::*;

fn json(v: &crl_lab::scm::Scm) -> CString {
    CString::new(serde_json::to_string(v).unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(crl_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn polar_map_through_the_abi() {
    let desc = CString::new(r#"{"variant":"polar-cartesian"}"#).unwrap();
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(crl_mixing_from_json(desc.as_ptr(), &mut map), CrlStatus::Ok);
        assert_eq!(crl_mixing_dim(map), 2);
        let mut x = [0.0; 2];
        assert_eq!(crl_mixing_forward(map, [1.0, 0.0].as_ptr(), x.as_mut_ptr(), 2), CrlStatus::Ok);
        assert_eq!(x, [1.0, 0.0]);
        let mut s = [0.0; 2];
        assert_eq!(crl_mixing_inverse(map, [0.0, 2.0].as_ptr(), s.as_mut_ptr(), 2), CrlStatus::Ok);
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let mut j = [0.0; 4];
        assert_eq!(crl_mixing_jacobian(map, [1.0, 0.0].as_ptr(), 2, j.as_mut_ptr()), CrlStatus::Ok);
        assert_eq!(j, [1.0, 0.0, 0.0, 1.0]);
        let mut c = f64::NAN;
        assert_eq!(crl_mixing_local_ima(map, [1.5, 0.3].as_ptr(), 2, &mut c), CrlStatus::Ok);
        assert!(c.abs() < 1e-10);
        crl_mixing_free(map);
    }
}

#[test]
fn errors_are_reported() {
    let bad = CString::new("{\"variant\":\"nope\"}").unwrap();
    let mut map = ptr::null_mut();
    unsafe {
        assert_eq!(crl_mixing_from_json(bad.as_ptr(), &mut map), CrlStatus::InvalidArgument);
        assert!(map.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(crl_mixing_from_json(ptr::null(), &mut map), CrlStatus::NullPointer);
        let mut x = [0.0; 2];
        assert_eq!(crl_mixing_forward(ptr::null(), [1.0, 0.0].as_ptr(), x.as_mut_ptr(), 2), CrlStatus::NullPointer);

        let desc = CString::new(r#"{"variant":"polar-cartesian"}"#).unwrap();
        assert_eq!(crl_mixing_from_json(desc.as_ptr(), &mut map), CrlStatus::Ok);
        let mut y = [0.0; 3];
        assert_eq!(crl_mixing_forward(map, [1.0, 0.0, 0.0].as_ptr(), y.as_mut_ptr(), 3), CrlStatus::InvalidArgument);
        assert!(last_error().contains("length 3"), "{}", last_error());
        crl_mixing_free(map);
        crl_mixing_free(ptr::null_mut());
    }
}

#[test]
fn scm_sampling_and_density() {
    let scm = crl_lab::scm::three_node_linear_example();
    let desc = json(&scm);
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(crl_scm_from_json(desc.as_ptr(), &mut h), CrlStatus::Ok);
        assert_eq!(crl_scm_nodes(h), 3);
        let mut buf = vec![0.0; 30];
        assert_eq!(crl_scm_sample(h, 10, 7, buf.as_mut_ptr(), buf.len()), CrlStatus::Ok);
        let direct = crl_lab::scm::ancestral_sample(&scm, 10, 7).unwrap();
        for r in 0..10 {
            for c in 0..3 {
                assert_eq!(buf[r * 3 + c], direct[(r, c)]);
            }
        }
        let mut lp = 0.0;
        assert_eq!(crl_scm_log_density(h, [0.0; 3].as_ptr(), 3, &mut lp), CrlStatus::Ok);
        assert_eq!(lp, crl_lab::scm::log_density(&scm, &[0.0; 3]).unwrap());
        assert_eq!(crl_scm_sample(h, 10, 7, buf.as_mut_ptr(), 29), CrlStatus::InvalidArgument);
        crl_scm_free(h);
    }
}

#[test]
fn mcc_through_the_abi() {
    let z: Vec<f64> = (0..40).map(|k| ((k * 37) % 11) as f64 + 0.1 * k as f64).collect();
    let zh: Vec<f64> = z.chunks(2).flat_map(|r| [-2.0 * r[1], 0.5 * r[0] + 3.0]).collect();
    let mut out = 0.0;
    unsafe {
        assert_eq!(crl_mcc(zh.as_ptr(), z.as_ptr(), 20, 2, false, &mut out), CrlStatus::Ok);
    }
    assert!((out - 1.0).abs() < 1e-12);
}

#[test]
fn version_and_header() {
    let v = unsafe { CStr::from_ptr(crl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/crl_lab.h")).unwrap();
    for sym in ["crl_mixing_from_json", "crl_scm_sample", "crl_mcc", "CRL_STATUS_OK", "typedef struct CrlMixing"] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
