use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use cmps_ffi::*;

const D1: &str = r#"{"D": 1, "species": [{"name": "b", "statistics": "boson"}], "Q": [[[-0.18, 0.3]]], "R": [[[[0.6, 0.0]]]]}"#;

fn load(json: &str) -> *mut CmpsState {
    let text = CString::new(json).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { cmps_state_from_json(text.as_ptr(), &mut s) }, CmpsStatus::Ok);
    s
}

fn last_code() -> String {
    unsafe { CStr::from_ptr(cmps_last_error_code()) }.to_str().unwrap().to_owned()
}

#[test]
fn scalar_state_observables() {
    let s = load(D1);
    let (mut d, mut q, mut uni) = (0usize, 0usize, 0i32);
    unsafe {
        assert_eq!(cmps_state_info(s, &mut d, &mut q, &mut uni), CmpsStatus::Ok);
        assert_eq!((d, q, uni), (1, 1, 1));
        let (mut re, mut im) = (0.0, 0.0);
        assert_eq!(cmps_uniform_density(s, 0, 0, &mut re, &mut im), CmpsStatus::Ok);
        assert!((re - 0.36).abs() < 1e-14 && im.abs() < 1e-14);
        let mut e = CmpsEnergy::default();
        let m = [0.5];
        assert_eq!(cmps_uniform_energy(s, m.as_ptr(), 1, 1.0, CmpsInteraction::Delta as i32, 2.0, 0.0, &mut e), CmpsStatus::Ok);
        // D=1: no kinetic energy, potential = rho, delta interaction = c rho^2
        assert!(e.kinetic.abs() < 1e-14 && (e.potential - 0.36).abs() < 1e-14 && (e.interaction - 2.0 * 0.36 * 0.36).abs() < 1e-13);
        assert_eq!(cmps_uniform_energy(s, m.as_ptr(), 1, 0.0, 7, 0.0, 0.0, &mut e), CmpsStatus::Validation);
        assert_eq!(last_code(), "InvalidArgument");
        let (mut passed, mut res) = (0, 1.0);
        assert_eq!(cmps_check_regularity(s, &mut passed, &mut res), CmpsStatus::Ok);
        assert_eq!(passed, 1);
        let mut n = 0.0;
        assert_eq!(cmps_finite_norm(s, &mut n, ptr::null_mut()), CmpsStatus::WrongKind);
        cmps_state_free(s);
    }
}

#[test]
fn errors_and_null_handling() {
    unsafe {
        let bad = CString::new(r#"{"D": 2}"#).unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(cmps_state_from_json(bad.as_ptr(), &mut s), CmpsStatus::Validation);
        assert!(s.is_null());
        assert_eq!(last_code(), "SchemaError");
        assert!(!cmps_last_error_message().is_null());
        assert_eq!(cmps_state_from_json(ptr::null(), &mut s), CmpsStatus::NullPointer);
        let mut re = 0.0;
        assert_eq!(cmps_uniform_density(ptr::null_mut(), 0, 0, &mut re, &mut re), CmpsStatus::NullPointer);
        cmps_state_free(ptr::null_mut());
        cmps_string_free(ptr::null_mut());
        // a success clears the previous error
        let s = load(D1);
        assert!(cmps_last_error_message().is_null());
        let mut r2 = 0.0;
        assert_eq!(cmps_uniform_density(s, 0, 3, &mut re, &mut r2), CmpsStatus::Validation);
        cmps_state_free(s);
    }
}

#[test]
fn json_round_trip_and_momentum() {
    let s = load(D1);
    unsafe {
        let mut text = ptr::null_mut();
        assert_eq!(cmps_state_to_json(s, &mut text), CmpsStatus::Ok);
        let back = load(CStr::from_ptr(text).to_str().unwrap());
        cmps_string_free(text);
        let p = [0.5, 1.0, 4.0];
        let (mut re, mut im) = ([1.0; 3], [1.0; 3]);
        assert_eq!(cmps_uniform_momentum_occupation(back, 0, 0, p.as_ptr(), 3, re.as_mut_ptr(), im.as_mut_ptr()), CmpsStatus::Ok);
        // a pure condensate has no p != 0 occupation
        assert!(re.iter().chain(&im).all(|x| x.abs() < 1e-12));
        cmps_state_free(back);
        cmps_state_free(s);
    }
}

#[test]
fn c_program_against_header() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libcmps_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("t.c");
    let exe = tmp.path().join("t");
    std::fs::write(
        &src,
        format!(
            r#"#include <stdio.h>
#include "cmps.h"
int main(void) {{
    CmpsState *s = NULL;
    if (cmps_state_from_json("{}", &s) != CMPS_STATUS_OK) return 2;
    double re, im;
    if (cmps_uniform_density(s, 0, 0, &re, &im) != CMPS_STATUS_OK) return 3;
    CmpsState *bad = NULL;
    if (cmps_state_from_json("[]", &bad) != CMPS_STATUS_VALIDATION || bad) return 4;
    printf("%.12f %s\n", re, cmps_last_error_code());
    cmps_state_free(s);
    return 0;
}}
"#,
            D1.replace('"', "\\\"")
        ),
    )
    .unwrap();
    let cc = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "0.360000000000 SchemaError");
}
