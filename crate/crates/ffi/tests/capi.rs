use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use mfcontrol_ffi::*;

const SMALL: &str = "problem = portfolio\n\
grid.nodes = 11, 11\n\
grid.time_steps = 10\n\
particles = 300\n\
eval_particles = 300\n\
iterations = 2\n\
seed = 3\n\
timings = false\n";

fn last_error() -> String {
    let p = mfc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn parse(text: &str) -> (MfcStatus, *mut MfcConfig) {
    let c = CString::new(text).unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { mfc_config_parse(c.as_ptr(), &mut cfg) };
    (s, cfg)
}

#[test]
fn run_round_trip() {
    let (s, cfg) = parse(SMALL);
    assert_eq!(s, MfcStatus::Ok);
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { mfc_run(cfg, &mut report) }, MfcStatus::Ok);
    assert_eq!(unsafe { mfc_report_len(report) }, 3);
    assert!(unsafe { mfc_report_error(report) }.is_null());

    let mut rec = MfcRecord::default();
    assert_eq!(unsafe { mfc_report_record(report, 2, &mut rec) }, MfcStatus::Ok);
    assert_eq!(rec.m, 2);
    assert!(rec.j.is_finite() && rec.std_error > 0.0 && rec.grad_norm > 0.0);
    assert_eq!(rec.wall_ms, 0.0);
    assert_eq!(unsafe { mfc_report_record(report, 3, &mut rec) }, MfcStatus::OutOfRange);
    assert!(last_error().contains("out of range"));

    let (mut d, mut k) = (0, 0);
    assert_eq!(unsafe { mfc_report_policy_dims(report, &mut d, &mut k) }, MfcStatus::Ok);
    assert_eq!((d, k), (2, 1));
    let x = [2.0, 1.5];
    let mut a = [f64::NAN];
    assert_eq!(unsafe { mfc_report_policy_eval(report, 0.0, x.as_ptr(), 2, a.as_mut_ptr(), 1) }, MfcStatus::Ok);
    assert!(a[0].is_finite() && a[0] != 0.0);
    assert_eq!(unsafe { mfc_report_policy_eval(report, 0.0, x.as_ptr(), 3, a.as_mut_ptr(), 1) }, MfcStatus::InvalidArgument);
    assert_eq!(unsafe { mfc_report_policy_eval(report, 2.0, x.as_ptr(), 2, a.as_mut_ptr(), 1) }, MfcStatus::OutOfRange);

    // same config, same numbers
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { mfc_run(cfg, &mut again) }, MfcStatus::Ok);
    let mut rec2 = MfcRecord::default();
    unsafe { mfc_report_record(again, 2, &mut rec2) };
    assert_eq!(rec, rec2);

    unsafe {
        mfc_report_free(report);
        mfc_report_free(again);
        mfc_config_free(cfg);
    }
}

#[test]
fn method_and_iteration_overrides() {
    let (_, cfg) = parse(SMALL);
    let bad = CString::new("newton").unwrap();
    assert_eq!(unsafe { mfc_config_set_method(cfg, bad.as_ptr()) }, MfcStatus::InvalidArgument);
    assert!(last_error().contains("newton"));
    let emreg = CString::new("emreg").unwrap();
    assert_eq!(unsafe { mfc_config_set_method(cfg, emreg.as_ptr()) }, MfcStatus::Ok);
    assert_eq!(unsafe { mfc_config_set_iterations(cfg, 0) }, MfcStatus::Ok);
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { mfc_run(cfg, &mut report) }, MfcStatus::Ok);
    assert_eq!(unsafe { mfc_report_len(report) }, 1);
    unsafe {
        mfc_report_free(report);
        mfc_config_free(cfg);
    }
}

#[test]
fn config_errors_set_status_and_message() {
    let (s, cfg) = parse("problem = portfolio\ntua = 1\n");
    assert_eq!(s, MfcStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("tau"), "{}", last_error());

    let (s, _) = parse("problem = portfolio\ntau = -1\n");
    assert_eq!(s, MfcStatus::Config);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mfc_config_parse(ptr::null(), &mut out) }, MfcStatus::NullPointer);
    let bytes = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { mfc_config_parse(bytes.as_ptr().cast(), &mut out) }, MfcStatus::InvalidUtf8);
    assert_eq!(unsafe { mfc_run(ptr::null(), &mut out.cast()) }, MfcStatus::NullPointer);
    mfc_clear_last_error();
    assert!(mfc_last_error_message().is_null());
}

#[test]
fn last_error_is_per_thread() {
    let (s, _) = parse("problem = nothing\n");
    assert_eq!(s, MfcStatus::Config);
    std::thread::spawn(|| assert!(mfc_last_error_message().is_null())).join().unwrap();
    assert!(last_error().contains("nothing"));
}

#[test]
fn failed_runs_return_partial_reports() {
    // a huge step drives the states to overflow within a few iterations
    let (s, cfg) = parse(&SMALL.replace("iterations = 2", "iterations = 5\ntau = 1e200"));
    assert_eq!(s, MfcStatus::Ok);
    let mut report = ptr::null_mut();
    let s = unsafe { mfc_run(cfg, &mut report) };
    assert_eq!(s, MfcStatus::Numerical, "{}", last_error());
    assert!(!report.is_null());
    let n = unsafe { mfc_report_len(report) };
    assert!(n >= 1 && n <= 5);
    let msg = unsafe { CStr::from_ptr(mfc_report_error(report)) }.to_str().unwrap().to_owned();
    assert_eq!(msg, last_error());
    unsafe {
        mfc_report_free(report);
        mfc_config_free(cfg);
    }
}

#[test]
fn prox_functions() {
    let a = [1.0, 0.1, -1.0, -0.05];
    let mut out = [0.0; 4];
    assert_eq!(unsafe { mfc_prox_l1(1.0 / 6.0, 1.0, a.as_ptr(), out.as_mut_ptr(), 4) }, MfcStatus::Ok);
    assert!((out[0] - 5.0 / 6.0).abs() < 1e-15 && out[1] == 0.0 && (out[2] + 5.0 / 6.0).abs() < 1e-15 && out[3] == 0.0);
    assert_eq!(unsafe { mfc_prox_l1(0.0, 1.0, a.as_ptr(), out.as_mut_ptr(), 4) }, MfcStatus::InvalidArgument);
    assert_eq!(unsafe { mfc_prox_l1(1.0, -1.0, a.as_ptr(), out.as_mut_ptr(), 4) }, MfcStatus::InvalidArgument);
    assert_eq!(unsafe { mfc_prox_l1(1.0, 1.0, ptr::null(), out.as_mut_ptr(), 4) }, MfcStatus::NullPointer);

    // in place
    let mut buf = [3.0, -3.0];
    let p = buf.as_mut_ptr();
    assert_eq!(unsafe { mfc_prox_l1(1.0, 1.0, p, p, 2) }, MfcStatus::Ok);
    assert_eq!(buf, [2.0, -2.0]);

    let lo = [-1.0, 0.0];
    let hi = [1.0, 0.5];
    let x = [2.0, 0.25];
    let mut y = [0.0; 2];
    assert_eq!(unsafe { mfc_prox_box(lo.as_ptr(), hi.as_ptr(), x.as_ptr(), y.as_mut_ptr(), 2) }, MfcStatus::Ok);
    assert_eq!(y, [1.0, 0.25]);
    assert_eq!(unsafe { mfc_prox_box(hi.as_ptr(), lo.as_ptr(), x.as_ptr(), y.as_mut_ptr(), 2) }, MfcStatus::InvalidArgument);
}

#[test]
fn riccati_handles() {
    let mut sol = ptr::null_mut();
    assert_eq!(unsafe { mfc_riccati_solve(1.0, 0.1, 1.0, 1e-4, &mut sol) }, MfcStatus::Ok);
    let n = unsafe { mfc_riccati_len(sol) };
    assert_eq!(n, 10_001);
    let mut buf = vec![0.0; n + 5];
    assert_eq!(unsafe { mfc_riccati_samples(sol, buf.as_mut_ptr(), buf.len()) }, n);
    assert_eq!(buf[n - 1], 2.0);
    let mut a = 0.0;
    assert_eq!(unsafe { mfc_riccati_value(sol, 1.0, &mut a) }, MfcStatus::Ok);
    assert_eq!(a, 2.0);
    assert_eq!(unsafe { mfc_riccati_value(sol, 0.0, &mut a) }, MfcStatus::Ok);
    assert_eq!(a, buf[0]);
    assert_eq!(unsafe { mfc_riccati_value(sol, 1.5, &mut a) }, MfcStatus::OutOfRange);
    unsafe { mfc_riccati_free(sol) };

    assert_eq!(unsafe { mfc_riccati_solve(1.0, 0.1, 1.0, 0.1, &mut sol) }, MfcStatus::InvalidArgument);
    assert!(sol.is_null());
    assert_eq!(unsafe { mfc_riccati_len(ptr::null()) }, 0);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mfc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/mfcontrol.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["mfc_run", "mfc_prox_l1", "mfc_riccati_solve", "mfc_last_error_message", "MFC_STATUS_OK", "typedef struct MfcReport MfcReport"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include <stdio.h>\n#include \"mfcontrol.h\"\n\
         int main(void) { MfcRecord r; r.std_error = 0; MfcStatus s = MFC_STATUS_OK; (void)r; return (int)s; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for (compiler, extra) in [("cc", vec!["-std=c99"]), ("c++", vec!["-x", "c++"])] {
        let Ok(out) = Command::new(compiler)
            .args(&extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
            .arg(&src)
            .output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
