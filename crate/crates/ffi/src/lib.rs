//! C ABI for the I-prior regression library.
//!
//! Objects cross the boundary as opaque handles (`IpregModel`, `IpregFit`)
//! created and destroyed by the functions below; every fallible call
//! returns an [`IpregStatus`] and stores a human-readable message
//! retrievable through [`ipreg_last_error`]. Strings returned by the API
//! are owned by the caller and must be released with [`ipreg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use ipreg::cli::artifact::FitArtifact;
use ipreg::cli::config::parse_model_config;
use ipreg::data::DataTable;
use ipreg::estimation::{self, ControlOptions, FitResult, Method};
use ipreg::model::{load_model, LoadedModel};
use ipreg::posterior;
use ipreg::Error;

/// Status codes mirroring the CLI exit codes, plus FFI-specific failures.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IpregStatus {
    Ok = 0,
    UsageError = 2,
    DataError = 3,
    NumericalError = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
    BufferTooSmall = 8,
}

/// Opaque handle to a loaded (estimable) model.
pub struct IpregModel {
    inner: Arc<LoadedModel>,
}

/// Opaque handle to a fitted model.
pub struct IpregFit {
    inner: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> IpregStatus {
    match err.exit_code() {
        2 => IpregStatus::UsageError,
        3 => IpregStatus::DataError,
        _ => IpregStatus::NumericalError,
    }
}

fn fail(err: &Error) -> IpregStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard<F: FnOnce() -> IpregStatus>(f: F) -> IpregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            IpregStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated C string.
unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, IpregStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(IpregStatus::NullPointer);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        IpregStatus::InvalidUtf8
    })
}

fn string_out(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(std::ptr::null_mut(), CString::into_raw)
}

/// Message for the most recent error on this thread. The pointer stays
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn ipreg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Free a string returned by this API.
///
/// # Safety
/// `s` must have been returned by one of the string-returning functions of
/// this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn ipreg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Load a model from CSV text and a TOML model configuration.
/// On success writes a handle to `out`; free it with [`ipreg_model_free`].
///
/// # Safety
/// `csv_text` and `config_toml` must be valid NUL-terminated strings and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_model_from_csv(
    csv_text: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut IpregModel,
) -> IpregStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return IpregStatus::NullPointer;
        }
        let csv = match unsafe { cstr(csv_text) } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let config = match unsafe { cstr(config_toml) } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let table = match DataTable::from_csv_str(csv) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let spec = match parse_model_config(config) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match load_model(&spec, &table) {
            Ok(model) => {
                let handle = Box::new(IpregModel { inner: Arc::new(model) });
                unsafe { *out = Box::into_raw(handle) };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `model` must be a handle from [`ipreg_model_from_csv`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ipreg_model_free(model: *mut IpregModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a valid model handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_model_sample_size(model: *const IpregModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.n
}

/// Number of unconstrained hyperparameter slots (the length of theta).
///
/// # Safety
/// `model` must be a valid model handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_model_n_theta(model: *const IpregModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.layout.len()
}

/// Human-readable theta layout (e.g. "lambda[1], lambda[2], log(psi)").
/// Free the result with [`ipreg_string_free`].
///
/// # Safety
/// `model` must be a valid model handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_model_check_theta(model: *const IpregModel) -> *mut c_char {
    if model.is_null() {
        return std::ptr::null_mut();
    }
    string_out(unsafe { &*model }.inner.check_theta())
}

/// Estimate the model. `method` is one of "direct", "em", "mixed"; use
/// [`ipreg_fit_fixed`] for fixed-hyperparameter evaluation. On success
/// writes a fit handle to `out`; free it with [`ipreg_fit_free`].
///
/// # Safety
/// `model` must be a valid model handle, `method` a valid NUL-terminated
/// string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit(
    model: *const IpregModel,
    method: *const c_char,
    seed: u64,
    maxit: u32,
    stop_crit: f64,
    out: *mut *mut IpregFit,
) -> IpregStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        let method_str = match unsafe { cstr(method) } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let method: Method = match method_str.parse() {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        let control = ControlOptions {
            maxit: maxit.max(1) as usize,
            stop_crit: if stop_crit > 0.0 { stop_crit } else { 1e-8 },
            silent: true,
            seed,
            ..Default::default()
        };
        let handle = unsafe { &*model };
        match estimation::fit(&handle.inner, method, &control) {
            Ok(fit) => {
                unsafe { *out = Box::into_raw(Box::new(IpregFit { inner: fit })) };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Posterior evaluation at fixed hyperparameters given in theta space
/// (`theta_len` must equal [`ipreg_model_n_theta`]).
///
/// # Safety
/// `model` must be a valid model handle; `theta` must point to `theta_len`
/// readable doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_fixed(
    model: *const IpregModel,
    theta: *const f64,
    theta_len: usize,
    out: *mut *mut IpregFit,
) -> IpregStatus {
    guard(|| {
        if model.is_null() || out.is_null() || (theta.is_null() && theta_len > 0) {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        let handle = unsafe { &*model };
        let theta_slice = if theta_len == 0 {
            &[][..]
        } else {
            unsafe { std::slice::from_raw_parts(theta, theta_len) }
        };
        let theta_vec = nalgebra::DVector::from_column_slice(theta_slice);
        match estimation::fit_fixed(&handle.inner, &theta_vec) {
            Ok(fit) => {
                unsafe { *out = Box::into_raw(Box::new(IpregFit { inner: fit })) };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `fit` must be a handle from a fit function, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_free(fit: *mut IpregFit) {
    if !fit.is_null() {
        drop(unsafe { Box::from_raw(fit) });
    }
}

/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_log_likelihood(fit: *const IpregFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    unsafe { &*fit }.inner.log_lik
}

/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_psi(fit: *const IpregFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    unsafe { &*fit }.inner.param_hat.psi
}

/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_intercept(fit: *const IpregFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    posterior::intercept(&unsafe { &*fit }.inner)
}

/// Error standard deviation 1/sqrt(psi).
///
/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_error_sd(fit: *const IpregFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    unsafe { &*fit }.inner.error_sd()
}

/// Number of estimated hyperparameters.
///
/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_n_params(fit: *const IpregFit) -> usize {
    if fit.is_null() {
        return 0;
    }
    unsafe { &*fit }.inner.model.layout.len()
}

/// Natural-scale value of estimated hyperparameter `index`.
///
/// # Safety
/// `fit` must be a valid fit handle and `value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_param(
    fit: *const IpregFit,
    index: usize,
    value: *mut f64,
) -> IpregStatus {
    guard(|| {
        if fit.is_null() || value.is_null() {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        let coef = unsafe { &*fit }.inner.coef();
        match coef.get(index) {
            Some((_, v)) => {
                unsafe { *value = *v };
                IpregStatus::Ok
            }
            None => {
                set_error("parameter index out of range");
                IpregStatus::UsageError
            }
        }
    })
}

/// Name of estimated hyperparameter `index` (e.g. "lambda[1]"), or NULL.
/// Free the result with [`ipreg_string_free`].
///
/// # Safety
/// `fit` must be a valid fit handle.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_param_name(fit: *const IpregFit, index: usize) -> *mut c_char {
    if fit.is_null() {
        return std::ptr::null_mut();
    }
    match unsafe { &*fit }.inner.coef().get(index) {
        Some((name, _)) => string_out(name.clone()),
        None => std::ptr::null_mut(),
    }
}

/// Training root mean squared error of prediction.
///
/// # Safety
/// `fit` must be a valid fit handle and `value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_training_rmse(
    fit: *const IpregFit,
    value: *mut f64,
) -> IpregStatus {
    guard(|| {
        if fit.is_null() || value.is_null() {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        match posterior::get_prederror(&unsafe { &*fit }.inner) {
            Ok(rmse) => {
                unsafe { *value = rmse };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// The fit as a versioned JSON artifact. Free with [`ipreg_string_free`].
///
/// # Safety
/// `fit` must be a valid fit handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_to_artifact_json(
    fit: *const IpregFit,
    out: *mut *mut c_char,
) -> IpregStatus {
    guard(|| {
        if fit.is_null() || out.is_null() {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        let artifact = FitArtifact::from_fit(&unsafe { &*fit }.inner, None);
        match artifact.to_json() {
            Ok(json) => {
                unsafe { *out = string_out(json) };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Rebuild a fit from an artifact JSON document.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_fit_from_artifact_json(
    json: *const c_char,
    out: *mut *mut IpregFit,
) -> IpregStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return IpregStatus::NullPointer;
        }
        let text = match unsafe { cstr(json) } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let artifact = match FitArtifact::from_json(text) {
            Ok(a) => a,
            Err(e) => return fail(&e),
        };
        match artifact.rebuild() {
            Ok(fit) => {
                unsafe { *out = Box::into_raw(Box::new(IpregFit { inner: fit })) };
                IpregStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Predict at new covariate values supplied as CSV text. Writes up to `cap`
/// predictions into `mean` (and the credible bounds into `lower`/`upper`
/// when non-NULL), storing the row count in `written`.
///
/// # Safety
/// `fit` must be a valid fit handle; `csv_text` a valid NUL-terminated
/// string; `mean` (and `lower`/`upper` when non-NULL) must point to at
/// least `cap` writable doubles; `written` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ipreg_predict(
    fit: *const IpregFit,
    csv_text: *const c_char,
    alpha: f64,
    mean: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
    cap: usize,
    written: *mut usize,
) -> IpregStatus {
    guard(|| {
        if fit.is_null() || mean.is_null() || written.is_null() {
            set_error("null pointer argument");
            return IpregStatus::NullPointer;
        }
        let csv = match unsafe { cstr(csv_text) } {
            Ok(s) => s,
            Err(st) => return st,
        };
        let table = match DataTable::from_csv_str(csv) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let intervals = !lower.is_null() && !upper.is_null();
        let pred =
            match posterior::predict(&unsafe { &*fit }.inner, &table, intervals, alpha, None) {
                Ok(p) => p,
                Err(e) => return fail(&e),
            };
        let n = pred.mean.len();
        if n > cap {
            set_error(&format!("prediction needs capacity {n}, buffer holds {cap}"));
            return IpregStatus::BufferTooSmall;
        }
        unsafe {
            for i in 0..n {
                *mean.add(i) = pred.mean[i];
            }
            if intervals {
                let lo = pred.lower.as_ref().expect("intervals requested");
                let hi = pred.upper.as_ref().expect("intervals requested");
                for i in 0..n {
                    *lower.add(i) = lo[i];
                    *upper.add(i) = hi[i];
                }
            }
            *written = n;
        }
        IpregStatus::Ok
    })
}
