//! C ABI for the engine: opaque handles over the uncertainty set and the
//! simulated driver bundle, status-code error reporting with a
//! thread-local message slot, payoff callbacks for expectations, the
//! finite-difference oracle, and a one-call config runner. Every entry
//! point catches panics and reports them as a status instead of
//! unwinding across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString, OsString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::{Array2, Array3};

use gsde_core::calculus::{lower_expectation, upper_expectation};
use gsde_core::oracles::{default_halfwidth, gheat_expectation, GHeatConfig};
use gsde_core::sampler::{simulate, GBMBundle, RandomVariable};
use gsde_core::uncertainty::{build_controls, ControlStrategy, TimeGrid, UncertaintySet};
use gsde_core::EngineError;

/// Status of one call. Anything other than `GsdeOk` leaves a message
/// retrievable through `gsde_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsdeStatus {
    GsdeOk = 0,
    GsdeInvalidArgument = 1,
    GsdeContractViolation = 2,
    GsdeDiverged = 3,
    GsdeIoError = 4,
    GsdePanic = 5,
}

/// Opaque generator-set handle.
pub struct GsdeUncertainty(UncertaintySet);

/// Opaque simulated-driver handle.
pub struct GsdeBundle(GBMBundle);

/// Scalar payoff callback: receives a point and the caller's context.
pub type GsdeScalarPayoff = Option<extern "C" fn(x: f64, context: *mut c_void) -> f64>;

/// Vector payoff callback: receives one terminal state of `dimension`
/// components and the caller's context.
pub type GsdeVectorPayoff =
    Option<extern "C" fn(state: *const f64, dimension: usize, context: *mut c_void) -> f64>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: GsdeStatus, message: &str) -> GsdeStatus {
    set_error(message);
    status
}

fn engine_status(e: &EngineError) -> GsdeStatus {
    match e {
        EngineError::Config(_) | EngineError::LatticeTooLarge { .. } => {
            GsdeStatus::GsdeInvalidArgument
        }
        EngineError::Contract(_) | EngineError::NonFinite { .. } => {
            GsdeStatus::GsdeContractViolation
        }
        EngineError::Diverged { .. } => GsdeStatus::GsdeDiverged,
        EngineError::Io(_) => GsdeStatus::GsdeIoError,
    }
}

fn engine_fail(e: &EngineError) -> GsdeStatus {
    fail(engine_status(e), &e.to_string())
}

fn guard(f: impl FnOnce() -> GsdeStatus) -> GsdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(GsdeStatus::GsdePanic, "panic caught at the ABI boundary"),
    }
}

/// Version string of the library, static storage.
#[no_mangle]
pub extern "C" fn gsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gsde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Builds a one-generator set from a row-major `dimension x dimension`
/// symmetric positive-semidefinite matrix.
///
/// # Safety
/// `entries` must point to `dimension * dimension` doubles; `out` must be
/// a valid location for one pointer. Free the result with
/// `gsde_uncertainty_free`.
#[no_mangle]
pub unsafe extern "C" fn gsde_uncertainty_singleton(
    dimension: usize,
    entries: *const f64,
    out: *mut *mut GsdeUncertainty,
) -> GsdeStatus {
    guard(|| {
        if entries.is_null() || out.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "entries and out must be non-null");
        }
        if dimension == 0 {
            return fail(GsdeStatus::GsdeInvalidArgument, "dimension must be positive");
        }
        let vals =
            unsafe { std::slice::from_raw_parts(entries, dimension * dimension) }.to_vec();
        let matrix = match Array2::from_shape_vec((dimension, dimension), vals) {
            Ok(m) => m,
            Err(e) => return fail(GsdeStatus::GsdeInvalidArgument, &e.to_string()),
        };
        match UncertaintySet::singleton(matrix) {
            Ok(set) => {
                unsafe { *out = Box::into_raw(Box::new(GsdeUncertainty(set))) };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Builds the scalar volatility interval `[low, high]`, discretized to
/// its endpoint generators.
///
/// # Safety
/// `out` must be a valid location for one pointer. Free the result with
/// `gsde_uncertainty_free`.
#[no_mangle]
pub unsafe extern "C" fn gsde_uncertainty_interval1d(
    low: f64,
    high: f64,
    out: *mut *mut GsdeUncertainty,
) -> GsdeStatus {
    guard(|| {
        if out.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "out must be non-null");
        }
        match UncertaintySet::interval_1d(low, high) {
            Ok(set) => {
                unsafe { *out = Box::into_raw(Box::new(GsdeUncertainty(set))) };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Driver dimension of the set; 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gsde_uncertainty_dimension(set: *const GsdeUncertainty) -> usize {
    if set.is_null() {
        return 0;
    }
    unsafe { &*set }.0.dimension()
}

/// Releases a set handle; null is a no-op.
///
/// # Safety
/// `set` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gsde_uncertainty_free(set: *mut GsdeUncertainty) {
    if !set.is_null() {
        drop(unsafe { Box::from_raw(set) });
    }
}

/// Largest directional volatility `max_sigma sqrt(|a' sigma sigma b|)`
/// over the set's generators.
///
/// # Safety
/// `a` and `b` must point to `len` doubles; `out` must be valid for one
/// double; `set` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsde_sigma_bar(
    set: *const GsdeUncertainty,
    a: *const f64,
    b: *const f64,
    len: usize,
    out: *mut f64,
) -> GsdeStatus {
    guard(|| {
        if set.is_null() || a.is_null() || b.is_null() || out.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "all pointers must be non-null");
        }
        let set = unsafe { &*set };
        let av = unsafe { std::slice::from_raw_parts(a, len) };
        let bv = unsafe { std::slice::from_raw_parts(b, len) };
        match set.0.sigma_bar(av, bv) {
            Ok(v) => {
                unsafe { *out = v };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Simulates driver paths and analytic covariation tensors on a uniform
/// grid over `[t_start, t_end]`, one constant-control scenario per
/// generator.
///
/// # Safety
/// `set` must be a live handle and `out` a valid location for one
/// pointer. Free the result with `gsde_bundle_free`.
#[no_mangle]
pub unsafe extern "C" fn gsde_simulate(
    set: *const GsdeUncertainty,
    t_start: f64,
    t_end: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    out: *mut *mut GsdeBundle,
) -> GsdeStatus {
    guard(|| {
        if set.is_null() || out.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "set and out must be non-null");
        }
        let set = unsafe { &*set };
        let result = (|| {
            let grid = TimeGrid::new(t_start, t_end, steps)?;
            let budget = set.0.generators().len();
            let lattice =
                build_controls(&set.0, &grid, &ControlStrategy::ConstantVertices, budget)?;
            simulate(&lattice, paths, seed)
        })();
        match result {
            Ok(bundle) => {
                unsafe { *out = Box::into_raw(Box::new(GsdeBundle(bundle))) };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Scenario count of a bundle; 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsde_bundle_scenarios(bundle: *const GsdeBundle) -> usize {
    if bundle.is_null() {
        return 0;
    }
    unsafe { &*bundle }.0.scenarios()
}

/// Path count of a bundle; 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsde_bundle_paths(bundle: *const GsdeBundle) -> usize {
    if bundle.is_null() {
        return 0;
    }
    unsafe { &*bundle }.0.paths()
}

/// Time-step count of a bundle's grid; 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsde_bundle_steps(bundle: *const GsdeBundle) -> usize {
    if bundle.is_null() {
        return 0;
    }
    unsafe { &*bundle }.0.grid().steps()
}

/// Driver dimension of a bundle; 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsde_bundle_dimension(bundle: *const GsdeBundle) -> usize {
    if bundle.is_null() {
        return 0;
    }
    unsafe { &*bundle }.0.dimension()
}

/// Releases a bundle handle; null is a no-op.
///
/// # Safety
/// `bundle` must be null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gsde_bundle_free(bundle: *mut GsdeBundle) {
    if !bundle.is_null() {
        drop(unsafe { Box::from_raw(bundle) });
    }
}

/// Upper and lower expectations of `payoff` applied to the driver's
/// terminal state, maximized/minimized over scenarios. Either output
/// pointer may be null to skip that side (not both).
///
/// # Safety
/// `bundle` must be a live handle; `payoff` must be a valid callback for
/// the duration of the call; non-null outputs must each hold one double.
#[no_mangle]
pub unsafe extern "C" fn gsde_terminal_expectation(
    bundle: *const GsdeBundle,
    payoff: GsdeVectorPayoff,
    context: *mut c_void,
    upper: *mut f64,
    lower: *mut f64,
) -> GsdeStatus {
    guard(|| {
        if bundle.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "bundle must be non-null");
        }
        let callback = match payoff {
            Some(f) => f,
            None => return fail(GsdeStatus::GsdeInvalidArgument, "payoff must be non-null"),
        };
        if upper.is_null() && lower.is_null() {
            return fail(
                GsdeStatus::GsdeInvalidArgument,
                "at least one of upper/lower must be non-null",
            );
        }
        let bundle = unsafe { &*bundle };
        let terminal = bundle.0.b().terminal();
        let (s_count, p_count, dim) =
            (terminal.scenarios(), terminal.paths(), terminal.components());
        let mut applied = Array3::zeros((s_count, p_count, 1));
        let mut row = vec![0.0f64; dim];
        for s in 0..s_count {
            for p in 0..p_count {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = terminal.values()[(s, p, j)];
                }
                applied[(s, p, 0)] = callback(row.as_ptr(), dim, context);
            }
        }
        let result = (|| {
            let rv = RandomVariable::new(applied)?;
            let up = upper_expectation(&rv)?.value;
            let lo = lower_expectation(&rv)?.value;
            Ok::<_, EngineError>((up, lo))
        })();
        match result {
            Ok((up, lo)) => {
                if !upper.is_null() {
                    unsafe { *upper = up };
                }
                if !lower.is_null() {
                    unsafe { *lower = lo };
                }
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Sublinear expectation of `payoff(B_horizon)` over adapted volatility
/// controls in `[sigma_low, sigma_high]` by explicit finite differences.
/// Pass `space_halfwidth <= 0` to use the default truncation radius.
///
/// # Safety
/// `payoff` must be a valid callback for the duration of the call and
/// `out` must hold one double.
#[no_mangle]
pub unsafe extern "C" fn gsde_gheat_expectation(
    sigma_low: f64,
    sigma_high: f64,
    space_halfwidth: f64,
    space_steps: usize,
    time_steps: usize,
    horizon: f64,
    payoff: GsdeScalarPayoff,
    context: *mut c_void,
    out: *mut f64,
) -> GsdeStatus {
    guard(|| {
        let callback = match payoff {
            Some(f) => f,
            None => return fail(GsdeStatus::GsdeInvalidArgument, "payoff must be non-null"),
        };
        if out.is_null() {
            return fail(GsdeStatus::GsdeInvalidArgument, "out must be non-null");
        }
        let halfwidth = if space_halfwidth > 0.0 {
            space_halfwidth
        } else {
            default_halfwidth(sigma_high, horizon.max(0.0))
        };
        let context_addr = context as usize;
        let cfg = GHeatConfig {
            sigma_low,
            sigma_high,
            space_halfwidth: halfwidth,
            space_steps,
            time_steps,
            horizon,
            payoff: Box::new(move |x| callback(x, context_addr as *mut c_void)),
        };
        match gheat_expectation(&cfg) {
            Ok(v) => {
                unsafe { *out = v };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}

/// Runs one configured experiment exactly like the `gsde` binary and
/// writes `exit_code` (0 success, 2 when a checked assertion failed).
/// `output_dir` may be null to use the config/environment default.
///
/// # Safety
/// `config_path` must be a nul-terminated UTF-8 path; `output_dir` must
/// be null or nul-terminated; `exit_code` must hold one int.
#[no_mangle]
pub unsafe extern "C" fn gsde_run_config(
    config_path: *const c_char,
    output_dir: *const c_char,
    exit_code: *mut i32,
) -> GsdeStatus {
    guard(|| {
        if config_path.is_null() || exit_code.is_null() {
            return fail(
                GsdeStatus::GsdeInvalidArgument,
                "config_path and exit_code must be non-null",
            );
        }
        let cstr_to_os = |p: *const c_char| -> Result<OsString, GsdeStatus> {
            let bytes = unsafe { CStr::from_ptr(p) }.to_bytes();
            match std::str::from_utf8(bytes) {
                Ok(s) => Ok(OsString::from(s)),
                Err(_) => Err(fail(GsdeStatus::GsdeInvalidArgument, "path must be UTF-8")),
            }
        };
        let mut args: Vec<OsString> =
            vec![OsString::from("gsde"), OsString::from("--config")];
        match cstr_to_os(config_path) {
            Ok(p) => args.push(p),
            Err(status) => return status,
        }
        if !output_dir.is_null() {
            args.push(OsString::from("--output"));
            match cstr_to_os(output_dir) {
                Ok(p) => args.push(p),
                Err(status) => return status,
            }
        }
        match gsde_core::cli::run(args) {
            Ok(code) => {
                unsafe { *exit_code = code };
                GsdeStatus::GsdeOk
            }
            Err(e) => engine_fail(&e),
        }
    })
}
