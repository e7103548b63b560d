//! C ABI over cmps-core.
//!
//! Every entry point returns a `CmpsStatus`; on failure the message and the
//! core error code are kept per thread, see `cmps_last_error_message`.
//! Handles are opaque and owned by the caller until passed to the `_free`
//! function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cmps_core::finite;
use cmps_core::io::{self, StateFile};
use cmps_core::regularity::{check_first_order, check_first_order_finite, DEFAULT_TOL};
use cmps_core::uniform::{self, EnergyParams, EvalConfig, InteractionKernel, Normalized};
use cmps_core::{Error, ErrorClass};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad input: schema, shapes, indices, preconditions.
    Validation = 3,
    /// Input accepted, numerics failed.
    Numerical = 4,
    /// A uniform-only call on a finite state or the reverse.
    WrongKind = 5,
    Panic = 6,
}

/// A uniform or finite state. Uniform states cache their normalization.
pub struct CmpsState {
    file: StateFile,
    normalized: Option<Normalized>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CmpsEnergy {
    pub kinetic: f64,
    pub potential: f64,
    pub interaction: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpsInteraction {
    None = 0,
    /// `c δ(x - y)`, uses `c`.
    Delta = 1,
    /// `c exp(-|x - y| / ell)`.
    Exponential = 2,
}

struct LastError {
    message: CString,
    code: CString,
}

thread_local! {
    static LAST: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_last(code: &str, message: &str) {
    let clean = |s: &str| CString::new(s.replace('\0', " ")).unwrap_or_default();
    LAST.with(|l| *l.borrow_mut() = Some(LastError { message: clean(message), code: clean(code) }));
}

enum Fail {
    Status(CmpsStatus, &'static str, String),
    Core(Error),
}

impl<E: Into<Error>> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail::Core(e.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmpsStatus {
    LAST.with(|l| *l.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmpsStatus::Ok,
        Ok(Err(Fail::Status(s, code, msg))) => {
            set_last(code, &msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_last(e.code(), &e.to_string());
            match e.class() {
                ErrorClass::Validation => CmpsStatus::Validation,
                ErrorClass::Numerical => CmpsStatus::Numerical,
            }
        }
        Err(_) => {
            set_last("Panic", "internal panic");
            CmpsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CmpsStatus::NullPointer, "NullPointer", format!("{what} is null"))
}

unsafe fn state_mut<'a>(s: *mut CmpsState) -> Result<&'a mut CmpsState, Fail> {
    s.as_mut().ok_or_else(|| null("state"))
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null("output pointer"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null("array"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

impl CmpsState {
    fn uniform(&mut self) -> Result<&Normalized, Fail> {
        let StateFile::Uniform(u) = &self.file else {
            return Err(Fail::Status(CmpsStatus::WrongKind, "WrongKind", "uniform state required".into()));
        };
        if self.normalized.is_none() {
            self.normalized = Some(Normalized::balanced(u, None, EvalConfig::default())?);
        }
        Ok(self.normalized.as_ref().unwrap())
    }

    fn finite(&self) -> Result<&cmps_core::FiniteCmps, Fail> {
        match &self.file {
            StateFile::Finite(f) => Ok(f),
            _ => Err(Fail::Status(CmpsStatus::WrongKind, "WrongKind", "finite state required".into())),
        }
    }
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn cmps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cmps_last_error_message() -> *const c_char {
    LAST.with(|l| l.borrow().as_ref().map_or(ptr::null(), |e| e.message.as_ptr()))
}

/// Core error code (e.g. "SchemaError", "NonInjective") of the last failure, or NULL.
#[no_mangle]
pub extern "C" fn cmps_last_error_code() -> *const c_char {
    LAST.with(|l| l.borrow().as_ref().map_or(ptr::null(), |e| e.code.as_ptr()))
}

/// Parse a state from NUL-terminated JSON. On success `*out` owns a new handle.
///
/// # Safety
/// `json` must be a valid C string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cmps_state_from_json(json: *const c_char, out_state: *mut *mut CmpsState) -> CmpsStatus {
    guard(|| {
        let slot = out(out_state)?;
        *slot = ptr::null_mut();
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Fail::Status(CmpsStatus::InvalidUtf8, "InvalidUtf8", e.to_string()))?;
        let file = io::state_from_str(text)?;
        *slot = Box::into_raw(Box::new(CmpsState { file, normalized: None }));
        Ok(())
    })
}

/// # Safety
/// `state` must come from `cmps_state_from_json` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cmps_state_free(state: *mut CmpsState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// Serialize to JSON; free the result with `cmps_string_free`.
///
/// # Safety
/// Valid handle and output pointer.
#[no_mangle]
pub unsafe extern "C" fn cmps_state_to_json(state: *mut CmpsState, json: *mut *mut c_char) -> CmpsStatus {
    guard(|| {
        let s = state_mut(state)?;
        let slot = out(json)?;
        let text = io::state_to_value(&s.file).to_string();
        *slot = CString::new(text).map_err(|e| Fail::Status(CmpsStatus::Validation, "Encoding", e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn cmps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Bond dimension, species count and kind (1 uniform, 0 finite). Any output may be NULL.
///
/// # Safety
/// Valid handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmps_state_info(state: *mut CmpsState, d: *mut usize, species: *mut usize, is_uniform: *mut i32) -> CmpsStatus {
    guard(|| {
        let s = state_mut(state)?;
        if let Some(d) = d.as_mut() {
            *d = s.file.d();
        }
        if let Some(n) = species.as_mut() {
            *n = s.file.species().len();
        }
        if let Some(u) = is_uniform.as_mut() {
            *u = matches!(s.file, StateFile::Uniform(_)) as i32;
        }
        Ok(())
    })
}

/// First-order regularity check with the default tolerance.
///
/// # Safety
/// Valid handle and outputs.
#[no_mangle]
pub unsafe extern "C" fn cmps_check_regularity(state: *mut CmpsState, passed: *mut i32, max_residual: *mut f64) -> CmpsStatus {
    guard(|| {
        let s = state_mut(state)?;
        let rep = match &s.file {
            StateFile::Uniform(u) => check_first_order(u),
            StateFile::Finite(f) => check_first_order_finite(f, DEFAULT_TOL),
        };
        *out(passed)? = rep.passed as i32;
        *out(max_residual)? = rep.max_residual;
        Ok(())
    })
}

/// `<psi_a^dag psi_b>` per unit length of a uniform state.
///
/// # Safety
/// Valid handle and outputs.
#[no_mangle]
pub unsafe extern "C" fn cmps_uniform_density(state: *mut CmpsState, a: usize, b: usize, re: *mut f64, im: *mut f64) -> CmpsStatus {
    guard(|| {
        let z = uniform::density(state_mut(state)?.uniform()?, a, b)?;
        *out(re)? = z.re;
        *out(im)? = z.im;
        Ok(())
    })
}

/// Energy densities; `masses` has one entry per species, `interaction` is a `CmpsInteraction`.
///
/// # Safety
/// Valid handle, `masses` readable for `n_masses` entries, writable output.
#[no_mangle]
pub unsafe extern "C" fn cmps_uniform_energy(
    state: *mut CmpsState,
    masses: *const f64,
    n_masses: usize,
    potential: f64,
    interaction: i32,
    c: f64,
    ell: f64,
    result: *mut CmpsEnergy,
) -> CmpsStatus {
    guard(|| {
        let params = EnergyParams {
            masses: slice(masses, n_masses)?.to_vec(),
            potential,
            interaction: match interaction {
                x if x == CmpsInteraction::None as i32 => None,
                x if x == CmpsInteraction::Delta as i32 => Some(InteractionKernel::Delta { c }),
                x if x == CmpsInteraction::Exponential as i32 => Some(InteractionKernel::Exponential { c, ell }),
                x => return Err(Fail::Status(CmpsStatus::Validation, "InvalidArgument", format!("unknown interaction {x}"))),
            },
        };
        let e = uniform::energy_densities(state_mut(state)?.uniform()?, &params)?;
        *out(result)? = CmpsEnergy { kinetic: e.kinetic, potential: e.potential, interaction: e.interaction };
        Ok(())
    })
}

/// Connected `n_ab(p)` on `n` momenta; outputs hold `n` values each.
///
/// # Safety
/// Arrays valid for `n` entries.
#[no_mangle]
pub unsafe extern "C" fn cmps_uniform_momentum_occupation(
    state: *mut CmpsState,
    a: usize,
    b: usize,
    p: *const f64,
    n: usize,
    re: *mut f64,
    im: *mut f64,
) -> CmpsStatus {
    guard(|| {
        let ps = slice(p, n)?;
        let m = uniform::momentum_occupation(state_mut(state)?.uniform()?, a, b, ps)?;
        if n > 0 && (re.is_null() || im.is_null()) {
            return Err(null("output array"));
        }
        for (k, z) in m.values.iter().enumerate() {
            *re.add(k) = z.re;
            *im.add(k) = z.im;
        }
        Ok(())
    })
}

/// Correlation length; infinity when the transfer spectrum is degenerate at the top.
///
/// # Safety
/// Valid handle and output.
#[no_mangle]
pub unsafe extern "C" fn cmps_uniform_correlation_length(state: *mut CmpsState, xi: *mut f64) -> CmpsStatus {
    guard(|| {
        let v = uniform::correlation_length(state_mut(state)?.uniform()?, None)?;
        *out(xi)? = v.unwrap_or(f64::INFINITY);
        Ok(())
    })
}

/// UV cutoff `Lambda` of `n_aa(p)`.
///
/// # Safety
/// Valid handle and output.
#[no_mangle]
pub unsafe extern "C" fn cmps_uniform_uv_cutoff(state: *mut CmpsState, a: usize, lambda: *mut f64) -> CmpsStatus {
    guard(|| {
        *out(lambda)? = uniform::uv_cutoff(state_mut(state)?.uniform()?, a, a)?.lambda;
        Ok(())
    })
}

/// Norm of a finite state and the largest drift of the propagated norm along the grid.
///
/// # Safety
/// Valid handle and outputs.
#[no_mangle]
pub unsafe extern "C" fn cmps_finite_norm(state: *mut CmpsState, norm: *mut f64, max_deviation: *mut f64) -> CmpsStatus {
    guard(|| {
        let r = finite::norm(state_mut(state)?.finite()?)?;
        *out(norm)? = r.norm;
        if let Some(m) = max_deviation.as_mut() {
            *m = r.max_deviation;
        }
        Ok(())
    })
}

/// Number of grid points of a finite state (N + 1).
///
/// # Safety
/// Valid handle and output.
#[no_mangle]
pub unsafe extern "C" fn cmps_finite_grid_len(state: *mut CmpsState, len: *mut usize) -> CmpsStatus {
    guard(|| {
        *out(len)? = state_mut(state)?.finite()?.n() + 1;
        Ok(())
    })
}

/// Normalized density profile `<psi_a^dag psi_b>(x_k)`; outputs hold `cmps_finite_grid_len` values.
///
/// # Safety
/// Outputs valid for the full grid.
#[no_mangle]
pub unsafe extern "C" fn cmps_finite_density(state: *mut CmpsState, a: usize, b: usize, re: *mut f64, im: *mut f64) -> CmpsStatus {
    guard(|| {
        let f = state_mut(state)?.finite()?;
        let v = finite::propagate(f)?;
        let prof = finite::density_profile(f, &v, a, b)?;
        if re.is_null() || im.is_null() {
            return Err(null("output array"));
        }
        for (k, z) in prof.iter().enumerate() {
            *re.add(k) = z.re;
            *im.add(k) = z.im;
        }
        Ok(())
    })
}
