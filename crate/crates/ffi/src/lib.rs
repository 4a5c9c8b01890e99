//! C ABI over `zrp-core`.
//!
//! Objects are opaque handles created by `zrp_*_new` and released by the
//! matching `zrp_*_free`. Every fallible call returns a [`ZrpStatus`]; on
//! failure a message is available from [`zrp_last_error`] on the same
//! thread until the next failing call. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use zrp_core::dynamics::{Simulator, TransitionKernel};
use zrp_core::exact::{llt_ratio, CanonicalDistribution};
use zrp_core::model::critical_constants;
use zrp_core::rng::RngStream;
use zrp_core::sampling::{ConfigSampler, ExactMethod, ExactSampler};
use zrp_core::{Configuration, Error, ModelParams};

/// Status codes; the nonzero library codes equal the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZrpStatus {
    Ok = 0,
    Domain = 2,
    Resource = 3,
    Truncation = 4,
    Consistency = 5,
    Quadrature = 6,
    Regime = 7,
    Format = 8,
    Io = 9,
    NullPointer = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZrpKernel {
    Uniform = 0,
    Ring = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ZrpCriticalConstants {
    pub z_c: f64,
    pub rho_c: f64,
    /// `INFINITY` when the critical variance does not exist.
    pub sigma2: f64,
}

pub struct ZrpModel(ModelParams);

pub struct ZrpCanonical(CanonicalDistribution);

pub struct ZrpSampler(ExactSampler);

pub struct ZrpSimulator(Simulator);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ZrpStatus {
    match e {
        Error::Domain(_) => ZrpStatus::Domain,
        Error::Resource(_) => ZrpStatus::Resource,
        Error::Truncation(_) => ZrpStatus::Truncation,
        Error::Consistency(_) => ZrpStatus::Consistency,
        Error::Quadrature(_) => ZrpStatus::Quadrature,
        Error::Regime(_) => ZrpStatus::Regime,
        Error::Format(_) | Error::Json(_) => ZrpStatus::Format,
        Error::Io(_) => ZrpStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Short(usize, usize),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ZrpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ZrpStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            ZrpStatus::NullPointer
        }
        Ok(Err(Fail::Short(need, got))) => {
            set_error(format!("buffer holds {got} values, {need} needed"));
            ZrpStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ZrpStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a>(p: *const u64, len: usize) -> Result<&'a [u64], Fail> {
    if p.is_null() {
        return Err(Fail::Null("occupation array"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn fill(out: *mut u64, cap: usize, values: &[u64]) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output buffer"));
    }
    if cap < values.len() {
        return Err(Fail::Short(values.len(), cap));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// Message of the last failing call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn zrp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn zrp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn zrp_model_power_law(b: f64, out: *mut *mut ZrpModel) -> ZrpStatus {
    guard(|| put(out, ZrpModel(ModelParams::power_law(b)?)))
}

/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn zrp_model_stretched(beta: f64, lambda: f64, out: *mut *mut ZrpModel) -> ZrpStatus {
    guard(|| put(out, ZrpModel(ModelParams::stretched(beta, lambda)?)))
}

/// # Safety
/// `model` must come from `zrp_model_*` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zrp_model_free(model: *mut ZrpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Jump rate `g(k)`; 0 for `k = 0` or a null model.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn zrp_jump_rate(model: *const ZrpModel, k: u64) -> f64 {
    model
        .as_ref()
        .map(|m| zrp_core::model::jump_rate(&m.0, k))
        .unwrap_or(0.0)
}

/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn zrp_critical_constants(model: *const ZrpModel, out: *mut ZrpCriticalConstants) -> ZrpStatus {
    guard(|| {
        let m = get(model, "model")?;
        let out = get_mut(out, "out")?;
        let c = critical_constants(&m.0)?;
        *out = ZrpCriticalConstants {
            z_c: c.z_c,
            rho_c: c.rho_c,
            sigma2: c.sigma2,
        };
        Ok(())
    })
}

/// `Q_L(N) / (L W(N − ρ_c L))`.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn zrp_llt_ratio(model: *const ZrpModel, sites: usize, particles: usize, out: *mut f64) -> ZrpStatus {
    guard(|| {
        let m = get(model, "model")?;
        *get_mut(out, "out")? = llt_ratio(&m.0, sites, particles)?;
        Ok(())
    })
}

/// Canonical measure on `L` sites with `N` particles.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn zrp_canonical_new(
    model: *const ZrpModel,
    sites: usize,
    particles: usize,
    out: *mut *mut ZrpCanonical,
) -> ZrpStatus {
    guard(|| {
        let m = get(model, "model")?;
        put(out, ZrpCanonical(CanonicalDistribution::new(m.0, sites, particles)?))
    })
}

/// # Safety
/// `h` must come from `zrp_canonical_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zrp_canonical_free(h: *mut ZrpCanonical) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Natural log of the canonical probability of `occupation[0..len]`.
///
/// # Safety
/// `h` must be live, `occupation` readable for `len` values, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zrp_canonical_log_prob(
    h: *const ZrpCanonical,
    occupation: *const u64,
    len: usize,
    out: *mut f64,
) -> ZrpStatus {
    guard(|| {
        let d = get(h, "canonical")?;
        let eta = Configuration::new(slice(occupation, len)?.to_vec())?;
        *get_mut(out, "out")? = d.0.canonical_log_prob(&eta)?;
        Ok(())
    })
}

/// Probability that one site holds `k` particles.
///
/// # Safety
/// `h` must be live, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn zrp_canonical_site_marginal(h: *const ZrpCanonical, k: usize, out: *mut f64) -> ZrpStatus {
    guard(|| {
        let d = get(h, "canonical")?;
        *get_mut(out, "out")? = d.0.site_marginal(k);
        Ok(())
    })
}

/// Exact sampler of the canonical measure (method chosen by size).
///
/// # Safety
/// `model` must be a live handle; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn zrp_sampler_new(
    model: *const ZrpModel,
    sites: usize,
    particles: usize,
    out: *mut *mut ZrpSampler,
) -> ZrpStatus {
    guard(|| {
        let m = get(model, "model")?;
        put(out, ZrpSampler(ExactSampler::build(m.0, sites, particles, ExactMethod::Auto)?))
    })
}

/// # Safety
/// `h` must come from `zrp_sampler_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zrp_sampler_free(h: *mut ZrpSampler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Draws one configuration from stream `(seed, stream)` into `out[0..L]`.
/// The same `(seed, stream)` always gives the same configuration.
///
/// # Safety
/// `h` must be live and `out` writable for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn zrp_sampler_draw(
    h: *const ZrpSampler,
    seed: u64,
    stream: u64,
    out: *mut u64,
    capacity: usize,
) -> ZrpStatus {
    guard(|| {
        let s = get(h, "sampler")?;
        let eta = s.0.sample(&mut RngStream::new(seed, stream))?;
        fill(out, capacity, eta.as_slice())
    })
}

/// Continuous-time dynamics started from `occupation[0..len]`.
///
/// # Safety
/// `model` must be live, `occupation` readable for `len` values, `out`
/// valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_new(
    model: *const ZrpModel,
    occupation: *const u64,
    len: usize,
    kernel: ZrpKernel,
    seed: u64,
    out: *mut *mut ZrpSimulator,
) -> ZrpStatus {
    guard(|| {
        let m = get(model, "model")?;
        let eta = Configuration::new(slice(occupation, len)?.to_vec())?;
        let k = match kernel {
            ZrpKernel::Uniform => TransitionKernel::uniform(len)?,
            ZrpKernel::Ring => TransitionKernel::ring(len)?,
        };
        put(out, ZrpSimulator(Simulator::new(m.0, eta, k, RngStream::new(seed, 0))?))
    })
}

/// # Safety
/// `h` must come from `zrp_simulator_new` and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_free(h: *mut ZrpSimulator) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Runs the dynamics up to time `t_end`; `events` (optional) receives the
/// number of particle jumps made by this call.
///
/// # Safety
/// `h` must be live; `events` null or writable.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_advance(h: *mut ZrpSimulator, t_end: f64, events: *mut u64) -> ZrpStatus {
    guard(|| {
        let s = get_mut(h, "simulator")?;
        if !t_end.is_finite() {
            return Err(Error::Domain(format!("t_end must be finite, got {t_end}")).into());
        }
        let mut count = 0u64;
        s.0.advance_to(t_end, |_, _| {}, |_| count += 1);
        if let Some(e) = events.as_mut() {
            *e = count;
        }
        Ok(())
    })
}

/// Current time, or NaN for a null handle.
///
/// # Safety
/// `h` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_time(h: *const ZrpSimulator) -> f64 {
    h.as_ref().map(|s| s.0.time()).unwrap_or(f64::NAN)
}

/// Copies the current configuration into `out[0..L]`.
///
/// # Safety
/// `h` must be live and `out` writable for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn zrp_simulator_state(h: *const ZrpSimulator, out: *mut u64, capacity: usize) -> ZrpStatus {
    guard(|| {
        let s = get(h, "simulator")?;
        fill(out, capacity, s.0.state())
    })
}
