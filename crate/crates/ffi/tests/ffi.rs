use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use liao_ffi::*;

fn field(components: &[&str]) -> *mut LiaoField {
    let owned: Vec<CString> = components.iter().map(|c| CString::new(*c).unwrap()).collect();
    let ptrs: Vec<_> = owned.iter().map(|c| c.as_ptr()).collect();
    let mut out = ptr::null_mut();
    let status = unsafe { liao_field_new(ptrs.as_ptr(), ptrs.len(), &mut out) };
    assert_eq!(status, LiaoStatus::Ok);
    out
}

fn last_error() -> String {
    let p = liao_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn field_roundtrip() {
    let f = field(&["1", "y", "-z"]);
    unsafe {
        assert_eq!(liao_field_dimension(f), 3);
        let mut out = [0.0; 3];
        assert_eq!(liao_field_eval(f, [4.0, 2.0, 3.0].as_ptr(), out.as_mut_ptr()), LiaoStatus::Ok);
        assert_eq!(out, [1.0, 2.0, -3.0]);
        liao_field_free(f);
        liao_field_free(ptr::null_mut());
        assert_eq!(liao_field_dimension(ptr::null()), 0);
    }
}

#[test]
fn parse_error_sets_message() {
    let bad = CString::new("1 +* y").unwrap();
    let ok = CString::new("x").unwrap();
    let ptrs = [bad.as_ptr(), ok.as_ptr()];
    let mut out = ptr::null_mut();
    let status = unsafe { liao_field_new(ptrs.as_ptr(), 2, &mut out) };
    assert_eq!(status, LiaoStatus::Validation);
    assert!(out.is_null());
    let msg = last_error();
    assert!(msg.contains("1 +* y"), "{msg}");
}

#[test]
fn null_arguments() {
    let mut e = 0.0;
    let status = unsafe { liao_epsilon_bound(2.0, 2.0, 0.01, 2, &mut e, ptr::null_mut()) };
    assert_eq!(status, LiaoStatus::NullPointer);
    let status = unsafe { liao_field_eval(ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(status, LiaoStatus::NullPointer);
}

#[test]
fn epsilon_bound_value() {
    let (mut e, mut t) = (0.0, 0.0);
    assert_eq!(unsafe { liao_epsilon_bound(2.0, 2.0, 0.01, 2, &mut e, &mut t) }, LiaoStatus::Ok);
    assert!((e - 1.62).abs() < 1e-12);
    assert!((t - 0.02).abs() < 1e-12);
    assert!(liao_last_error_message().is_null());
}

#[test]
fn certify_example_orbit() {
    let f = field(&["1", "y", "-z"]);
    let mut cert = LiaoCertificate::default();
    let status = unsafe { liao_certify_orbit(f, [0.0, 0.0, 0.0].as_ptr(), 1, 0.01, 25.0, 10.0, &mut cert) };
    assert_eq!(status, LiaoStatus::Ok);
    assert!(cert.pass);
    assert!((cert.eta_hat - 1.0).abs() < 1e-3);
    assert!((cert.eta_a - 2.0).abs() < 1e-6);
    assert!((cert.xi_a - 2.0).abs() < 1e-4);

    let status = unsafe { liao_certify_orbit(f, [0.0, 0.0, 0.0].as_ptr(), 3, 0.01, 25.0, 10.0, &mut cert) };
    assert_eq!(status, LiaoStatus::Validation);
    assert!(last_error().contains("out of range"));
    unsafe { liao_field_free(f) };
}

#[test]
fn scenario_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(workspace().join("scenarios/example43_constant.json").to_str().unwrap()).unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { liao_scenario_load(path.as_ptr(), &mut sc) }, LiaoStatus::Ok);

    let mut buf = [0 as std::ffi::c_char; 65];
    assert_eq!(unsafe { liao_scenario_hash(sc, buf.as_mut_ptr(), buf.len()) }, LiaoStatus::Ok);
    let hash = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    assert_eq!(hash.len(), 64);
    assert_eq!(unsafe { liao_scenario_hash(sc, buf.as_mut_ptr(), 64) }, LiaoStatus::Validation);

    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { liao_scenario_run(sc, LiaoCommand::Certify, out.as_ptr(), 3) }, LiaoStatus::Ok);
    let report = std::fs::read_to_string(dir.path().join("certificate.json")).unwrap();
    assert!(report.contains(&hash));
    unsafe { liao_scenario_free(sc) };
}

#[test]
fn missing_scenario_is_io() {
    let path = CString::new("/nonexistent/scenario.json").unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(unsafe { liao_scenario_load(path.as_ptr(), &mut sc) }, LiaoStatus::Io);
    assert!(sc.is_null());
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(liao_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/liao.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "liao_field_new",
        "liao_field_free",
        "liao_certify_orbit",
        "liao_epsilon_bound",
        "liao_scenario_load",
        "liao_scenario_run",
        "liao_last_error_message",
        "typedef struct LiaoField LiaoField",
        "LIAO_STATUS_VALIDATION = 2",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"liao.h\"\n\
         int run(void) {\n\
           const char *c[3] = {\"1\", \"y\", \"-z\"};\n\
           LiaoField *f = NULL;\n\
           if (liao_field_new(c, 3, &f) != LIAO_STATUS_OK) return 1;\n\
           LiaoCertificate cert;\n\
           double w[3] = {0, 0, 0};\n\
           LiaoStatus s = liao_certify_orbit(f, w, 1, 0.01, 25.0, 10.0, &cert);\n\
           liao_field_free(f);\n\
           return s == LIAO_STATUS_OK && cert.pass ? 0 : 2;\n\
         }\n",
    )
    .unwrap();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    Command::new("cc").arg("--version").output().map(|_| "cc").map_err(|_| ())
}
