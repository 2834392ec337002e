//! C interface to the step2step library.
//!
//! Objects cross the boundary as opaque handles created by `s2s_*_new`-style
//! constructors and released with the matching `s2s_*_free`. Every fallible
//! call returns an [`S2sStatus`]; on failure the message is available from
//! [`s2s_last_error_message`] on the same thread. Strings returned by the
//! library must be released with [`s2s_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use step2step::control::{ClosedLoop, Controller};
use step2step::gait::{EssentialConstraints, GaitSpec};
use step2step::invariance::{certify, BarrierParams, InvarianceCertificate};
use step2step::poincare::{find_fixed_point, FixedPoint, FixedPointOptions, ReducedChart};
use step2step::sim::{rollout, SimOptions};
use step2step::synth::{beta_hash, synthesize_gait, SynthesisOptions};
use step2step::{Error, RobotModel};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum S2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Configuration, model or gait rejected.
    Config = 3,
    /// Synthesis, fixed point, simulation or certification failed.
    Domain = 4,
    /// Serialization or I/O failure.
    Internal = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Robot model handle.
pub struct S2sModel(RobotModel);

/// Gait handle.
pub struct S2sGait(GaitSpec);

/// Certificate handle.
pub struct S2sCertificate(InvarianceCertificate);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Fail(S2sStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::InvalidModel(_) | Error::InvalidGait(_) | Error::InputDomain(_) => {
                S2sStatus::Config
            }
            Error::Io(_) | Error::Json(_) => S2sStatus::Internal,
            _ => S2sStatus::Domain,
        };
        Fail(status, e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> S2sStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            S2sStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside step2step".into());
            S2sStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: the caller passes a handle obtained from this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(S2sStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: the caller passes writable storage or null.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(S2sStatus::NullPointer, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(S2sStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated by contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(S2sStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn to_c(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(S2sStatus::Internal, "string contains NUL".into()))
}

fn field(model: &RobotModel, gait: &GaitSpec) -> ClosedLoop {
    ClosedLoop::new(Arc::new(model.clone()), Arc::new(gait.clone()), Controller::default())
}

fn fixed_point(model: &RobotModel, gait: &GaitSpec) -> Result<(ClosedLoop, FixedPoint), Fail> {
    gait.validate(model)?;
    let x0 = gait
        .fixed_point
        .clone()
        .ok_or_else(|| Fail(S2sStatus::Config, "gait carries no pre-impact state".into()))?;
    let f = field(model, gait);
    let fp = find_fixed_point(&f, &x0, &SimOptions::default(), &FixedPointOptions::default())?;
    Ok((f, fp))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn s2s_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated) and returns the full message length without the NUL.
/// Returns 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn s2s_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: `buf` holds `len` bytes and `n < len`.
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn s2s_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by `CString::into_raw`.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Built-in model by name (`"five_link"` or `"compass"`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_builtin(name: *const c_char, out_model: *mut *mut S2sModel) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_model, "out_model") }?;
        let name = unsafe { text(name, "name") }?;
        let model = RobotModel::builtin(name)?;
        *slot = Box::into_raw(Box::new(S2sModel(model)));
        Ok(())
    })
}

/// Model from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_from_json(json: *const c_char, out_model: *mut *mut S2sModel) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_model, "out_model") }?;
        let model = RobotModel::from_json(unsafe { text(json, "json") }?)?;
        model.validate()?;
        *slot = Box::into_raw(Box::new(S2sModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_free(model: *mut S2sModel) {
    if !model.is_null() {
        // SAFETY: produced by `Box::into_raw`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Synthesizes a periodic gait for the given step length (m), duration (s)
/// and swing-foot clearance (m).
///
/// # Safety
/// `model` must be a valid handle; `out_gait` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_gait_synthesize(
    model: *const S2sModel,
    step_length: f64,
    step_duration: f64,
    step_height: f64,
    seed: u64,
    out_gait: *mut *mut S2sGait,
) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_gait, "out_gait") }?;
        let model = unsafe { get(model, "model") }?;
        let e = EssentialConstraints::planar(step_length, step_duration, step_height);
        let opts = SynthesisOptions { seed, ..SynthesisOptions::default() };
        let report = synthesize_gait(&model.0, &e, &opts)?;
        *slot = Box::into_raw(Box::new(S2sGait(report.gait)));
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out_gait` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_gait_from_json(json: *const c_char, out_gait: *mut *mut S2sGait) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_gait, "out_gait") }?;
        let gait = GaitSpec::from_json(unsafe { text(json, "json") }?)?;
        *slot = Box::into_raw(Box::new(S2sGait(gait)));
        Ok(())
    })
}

/// Gait file contents; release with [`s2s_string_free`].
///
/// # Safety
/// `gait` must be a valid handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_gait_to_json(gait: *const S2sGait, out_json: *mut *mut c_char) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_json, "out_json") }?;
        let gait = unsafe { get(gait, "gait") }?;
        *slot = to_c(gait.0.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `gait` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn s2s_gait_free(gait: *mut S2sGait) {
    if !gait.is_null() {
        // SAFETY: produced by `Box::into_raw`.
        drop(unsafe { Box::from_raw(gait) });
    }
}

/// Spectral radius of the linearized return map at the gait's fixed point.
///
/// # Safety
/// Handles must be valid; `out_radius` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_gait_spectral_radius(
    model: *const S2sModel,
    gait: *const S2sGait,
    out_radius: *mut f64,
) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_radius, "out_radius") }?;
        let (model, gait) = (unsafe { get(model, "model") }?, unsafe { get(gait, "gait") }?);
        *slot = fixed_point(&model.0, &gait.0)?.1.spectral_radius;
        Ok(())
    })
}

/// Rolls the gait out for up to `steps` impacts from its stored pre-impact
/// state and reports how many completed. A fall is not an error.
///
/// # Safety
/// Handles must be valid; `out_steps` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_simulate(
    model: *const S2sModel,
    gait: *const S2sGait,
    steps: usize,
    out_steps: *mut usize,
) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_steps, "out_steps") }?;
        let (model, gait) = (unsafe { get(model, "model") }?, unsafe { get(gait, "gait") }?);
        if steps == 0 {
            return Err(Fail(S2sStatus::InvalidArgument, "steps must be positive".into()));
        }
        gait.0.validate(&model.0)?;
        let x0 = gait
            .0
            .fixed_point
            .clone()
            .ok_or_else(|| Fail(S2sStatus::Config, "gait carries no pre-impact state".into()))?;
        let r = rollout(&field(&model.0, &gait.0), &x0, steps, &SimOptions::default())?;
        *slot = r.steps_taken;
        Ok(())
    })
}

/// Certifies a forward-invariant set around the gait's fixed point.
///
/// # Safety
/// Handles must be valid; `out_cert` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_certify(
    model: *const S2sModel,
    gait: *const S2sGait,
    alpha: f64,
    r_max: f64,
    n_samples: usize,
    seed: u64,
    out_cert: *mut *mut S2sCertificate,
) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_cert, "out_cert") }?;
        let (model, gait) = (unsafe { get(model, "model") }?, unsafe { get(gait, "gait") }?);
        let params = BarrierParams { alpha, r_max, n_samples };
        params.validate()?;
        let (f, fp) = fixed_point(&model.0, &gait.0)?;
        let chart = ReducedChart::with_default_indices(f.model.clone(), f.gait.clone(), fp.x_star.clone())?;
        let cert = certify(&f, &chart, &fp, &params, seed, &beta_hash(&gait.0), &SimOptions::default())?;
        *slot = Box::into_raw(Box::new(S2sCertificate(cert)));
        Ok(())
    })
}

/// Certified squared radius.
///
/// # Safety
/// `cert` must be a valid handle; `out_r_star` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_certificate_r_star(cert: *const S2sCertificate, out_r_star: *mut f64) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_r_star, "out_r_star") }?;
        *slot = unsafe { get(cert, "cert") }?.0.r_star;
        Ok(())
    })
}

/// Certificate document; release with [`s2s_string_free`].
///
/// # Safety
/// `cert` must be a valid handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn s2s_certificate_to_json(cert: *const S2sCertificate, out_json: *mut *mut c_char) -> S2sStatus {
    guard(|| {
        let slot = unsafe { out(out_json, "out_json") }?;
        *slot = to_c(unsafe { get(cert, "cert") }?.0.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `cert` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn s2s_certificate_free(cert: *mut S2sCertificate) {
    if !cert.is_null() {
        // SAFETY: produced by `Box::into_raw`.
        drop(unsafe { Box::from_raw(cert) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn message() -> String {
        let mut buf = vec![0 as c_char; 256];
        let n = unsafe { s2s_last_error_message(buf.as_mut_ptr(), buf.len()) };
        let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
        assert!(n >= s.len());
        s
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(s2s_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { s2s_model_builtin(ptr::null(), &mut m) }, S2sStatus::NullPointer);
        assert!(message().contains("name"));
        let name = CString::new("five_link").unwrap();
        assert_eq!(unsafe { s2s_model_builtin(name.as_ptr(), ptr::null_mut()) }, S2sStatus::NullPointer);
        let mut r = 0.0;
        assert_eq!(unsafe { s2s_certificate_r_star(ptr::null(), &mut r) }, S2sStatus::NullPointer);
    }

    #[test]
    fn unknown_model_is_a_config_error() {
        let name = CString::new("hexapod").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { s2s_model_builtin(name.as_ptr(), &mut m) }, S2sStatus::Config);
        assert!(m.is_null());
        assert!(!message().is_empty());
    }

    #[test]
    fn success_clears_the_last_error() {
        let bad = CString::new("nope").unwrap();
        let mut m = ptr::null_mut();
        unsafe { s2s_model_builtin(bad.as_ptr(), &mut m) };
        let good = CString::new("compass").unwrap();
        assert_eq!(unsafe { s2s_model_builtin(good.as_ptr(), &mut m) }, S2sStatus::Ok);
        assert_eq!(unsafe { s2s_last_error_message(ptr::null_mut(), 0) }, 0);
        unsafe { s2s_model_free(m) };
    }

    #[test]
    fn error_message_is_truncated_to_the_buffer() {
        let bad = CString::new("not json").unwrap();
        let mut g = ptr::null_mut();
        assert_ne!(unsafe { s2s_gait_from_json(bad.as_ptr(), &mut g) }, S2sStatus::Ok);
        let mut buf = [1 as c_char; 4];
        let n = unsafe { s2s_last_error_message(buf.as_mut_ptr(), buf.len()) };
        assert!(n > 3);
        assert_eq!(buf[3], 0);
    }

    #[test]
    fn infeasible_synthesis_is_a_domain_error() {
        let name = CString::new("five_link").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(unsafe { s2s_model_builtin(name.as_ptr(), &mut m) }, S2sStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(unsafe { s2s_gait_synthesize(m, 3.0, 0.5, 0.05, 0, &mut g) }, S2sStatus::Domain);
        assert!(g.is_null());
        unsafe { s2s_model_free(m) };
    }

    #[test]
    fn free_functions_accept_null() {
        unsafe {
            s2s_model_free(ptr::null_mut());
            s2s_gait_free(ptr::null_mut());
            s2s_certificate_free(ptr::null_mut());
            s2s_string_free(ptr::null_mut());
        }
    }
}
