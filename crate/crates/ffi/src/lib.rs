//! C ABI over `liao_core`.
//!
//! Every function returns a [`LiaoStatus`]. On failure the message is kept
//! per thread and can be read with [`liao_last_error_message`]. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use liao_core::dichotomy::epsilon_bound;
use liao_core::field::VectorFieldSpec;
use liao_core::frame::{frame_transport, stable_first_frame};
use liao_core::reduced::{certify_hyperbolic, dichotomy_constants, ReducedCocycle, DEFAULT_D_GRID};
use liao_core::report::{run, transported_extent, Command};
use liao_core::scenario::Scenario;
use liao_core::LiaoError;
use nalgebra::DVector;

/// Status codes; `Validation` and `Numeric` mirror the CLI exit codes 2 and 3.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiaoStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Numeric = 3,
    Io = 4,
    /// A check inside the run failed; reports were still written.
    ChecksFailed = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiaoCommand {
    Certify = 0,
    Exponents = 1,
    Delta = 2,
    Conjugate = 3,
}

/// Certificate summary for one sample orbit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LiaoCertificate {
    pub pass: bool,
    pub eta_hat: f64,
    pub d_hat: f64,
    /// Set only when `pass`; otherwise NaN.
    pub eta_a: f64,
    /// Set only when `pass`; otherwise NaN.
    pub xi_a: f64,
    pub tail_bound: f64,
}

/// Opaque vector field.
pub struct LiaoField {
    spec: VectorFieldSpec,
}

/// Opaque validated scenario.
pub struct LiaoScenario {
    scenario: Scenario,
    hash: String,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &LiaoError) -> LiaoStatus {
    match err {
        LiaoError::Io(_) => LiaoStatus::Io,
        e if e.is_validation() => LiaoStatus::Validation,
        _ => LiaoStatus::Numeric,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> Result<(), (LiaoStatus, String)>>(f: F) -> LiaoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LiaoStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LiaoStatus::Panic
        }
    }
}

fn core<T>(r: liao_core::Result<T>) -> Result<T, (LiaoStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (LiaoStatus, String) {
    (LiaoStatus::NullPointer, "null pointer argument".into())
}

unsafe fn c_str<'a>(p: *const c_char) -> Result<&'a str, (LiaoStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LiaoStatus::Validation, "string is not UTF-8".into()))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], (LiaoStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn liao_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn liao_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a field from `dimension` component expressions in `x, y, z` or `x_1..x_n`.
///
/// # Safety
/// `components` must point to `dimension` valid C strings and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn liao_field_new(
    components: *const *const c_char,
    dimension: usize,
    out: *mut *mut LiaoField,
) -> LiaoStatus {
    guard(|| {
        if components.is_null() || out.is_null() {
            return Err(null());
        }
        let parts = std::slice::from_raw_parts(components, dimension)
            .iter()
            .map(|&p| c_str(p))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = core(VectorFieldSpec::parse("field", &parts))?;
        *out = Box::into_raw(Box::new(LiaoField { spec }));
        Ok(())
    })
}

/// # Safety
/// `field` must come from [`liao_field_new`] and not be used afterwards; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn liao_field_free(field: *mut LiaoField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Dimension of the field, 0 for NULL.
///
/// # Safety
/// `field` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn liao_field_dimension(field: *const LiaoField) -> usize {
    field.as_ref().map_or(0, |f| f.spec.dimension())
}

/// Writes `S(w)` into `out`; both arrays hold the field dimension.
///
/// # Safety
/// `w` and `out` must point to `liao_field_dimension(field)` doubles.
#[no_mangle]
pub unsafe extern "C" fn liao_field_eval(field: *const LiaoField, w: *const f64, out: *mut f64) -> LiaoStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let n = f.spec.dimension();
        let v = core(f.spec.eval(&DVector::from_column_slice(slice(w, n)?)))?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Certifies hyperbolicity along the orbit of `w` over `[−horizon, horizon]`
/// with the default window lengths 1, 2, 5 and 10.
///
/// # Safety
/// `w` must point to the field dimension doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn liao_certify_orbit(
    field: *const LiaoField,
    w: *const f64,
    p_minus: usize,
    h: f64,
    horizon: f64,
    window_t: f64,
    out: *mut LiaoCertificate,
) -> LiaoStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(null)?;
        let out = out.as_mut().ok_or_else(null)?;
        let n = f.spec.dimension();
        if p_minus >= n {
            return Err((LiaoStatus::Validation, format!("p_minus = {p_minus} out of range 0..={}", n - 1)));
        }
        if !(h > 0.0 && horizon > 0.0) {
            return Err((LiaoStatus::Validation, "h and horizon must be positive".into()));
        }
        let w = DVector::from_column_slice(slice(w, n)?);
        let frame = core(stable_first_frame(&f.spec, &w, horizon.min(10.0), 1e-10))?;
        let extent = transported_extent(horizon, h);
        let path = core(frame_transport(&f.spec, &w, &frame, (-extent, extent), h))?;
        let cocycle = core(ReducedCocycle::from_step_factors(path.times.clone(), h, &path.step_factors, p_minus))?;
        let cert = core(certify_hyperbolic(&cocycle, &DEFAULT_D_GRID, window_t))?;
        let mut summary = LiaoCertificate {
            pass: cert.pass,
            eta_hat: cert.eta_hat,
            d_hat: cert.d_hat,
            eta_a: f64::NAN,
            xi_a: f64::NAN,
            tail_bound: f64::NAN,
        };
        if cert.pass {
            let c = core(dichotomy_constants(&cocycle, &cert))?;
            summary.eta_a = c.eta_a;
            summary.xi_a = c.xi_a;
            summary.tail_bound = c.tail_bound;
        }
        *out = summary;
        Ok(())
    })
}

/// `ε = η_f ξ (1 + 2ηξ)^p` and the homeomorphism threshold `1/(ξ (1 + ηξ)^p)`.
///
/// # Safety
/// `epsilon` and `threshold` must be writable.
#[no_mangle]
pub unsafe extern "C" fn liao_epsilon_bound(
    eta_a: f64,
    xi_a: f64,
    eta_f: f64,
    p: usize,
    epsilon: *mut f64,
    threshold: *mut f64,
) -> LiaoStatus {
    guard(|| {
        let (e, t) = epsilon_bound(eta_a, xi_a, eta_f, p);
        *epsilon.as_mut().ok_or_else(null)? = e;
        *threshold.as_mut().ok_or_else(null)? = t;
        Ok(())
    })
}

/// Loads and validates a scenario file.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn liao_scenario_load(path: *const c_char, out: *mut *mut LiaoScenario) -> LiaoStatus {
    guard(|| {
        let path = c_str(path)?;
        if out.is_null() {
            return Err(null());
        }
        let (scenario, hash) = core(Scenario::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(LiaoScenario { scenario, hash }));
        Ok(())
    })
}

/// # Safety
/// `scenario` must come from [`liao_scenario_load`] and not be used afterwards; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn liao_scenario_free(scenario: *mut LiaoScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Writes the scenario hash (64 hex digits plus NUL) into `buf`.
///
/// # Safety
/// `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn liao_scenario_hash(scenario: *const LiaoScenario, buf: *mut c_char, len: usize) -> LiaoStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(null)?;
        if buf.is_null() {
            return Err(null());
        }
        let bytes = s.hash.as_bytes();
        if len <= bytes.len() {
            return Err((LiaoStatus::Validation, format!("buffer needs {} bytes", bytes.len() + 1)));
        }
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), len);
        dst[..bytes.len()].copy_from_slice(bytes);
        dst[bytes.len()] = 0;
        Ok(())
    })
}

/// Runs `command` and writes its reports into `out_dir`, as the CLI does.
/// Returns [`LiaoStatus::ChecksFailed`] when the reports were written but a
/// check in them failed.
///
/// # Safety
/// `scenario` must be a live handle and `out_dir` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn liao_scenario_run(
    scenario: *const LiaoScenario,
    command: LiaoCommand,
    out_dir: *const c_char,
    seed: u64,
) -> LiaoStatus {
    guard(|| {
        let s = scenario.as_ref().ok_or_else(null)?;
        let out = c_str(out_dir)?;
        let command = match command {
            LiaoCommand::Certify => Command::Certify,
            LiaoCommand::Exponents => Command::Exponents,
            LiaoCommand::Delta => Command::Delta,
            LiaoCommand::Conjugate => Command::Conjugate,
        };
        let outcome = core(run(command, &s.scenario, &s.hash, seed, Path::new(out)))?;
        if outcome.success {
            Ok(())
        } else {
            Err((LiaoStatus::ChecksFailed, format!("{} finished with failed checks", command.name())))
        }
    })
}
