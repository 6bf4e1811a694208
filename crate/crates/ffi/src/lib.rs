//! C ABI over `kneelab`.
//!
//! Every entry point returns a [`KlStatus`]; results come back through out
//! pointers. Objects are opaque handles created by `*_new`/`*_from_json`/
//! `*_build` and released by the matching `*_free`. After a non-OK status,
//! [`kl_last_error_message`] describes the failure on the calling thread.
//! Panics never cross the boundary; they surface as `KL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use kneelab::objective::Objective;
use kneelab::optim::{Optimizer, OptimizerHyper};
use kneelab::params::ParamVector;
use kneelab::scape::{self, KneeFamily, LandscapeSpec};
use kneelab::sched::{build_schedule, Schedule, ScheduleError, ScheduleSpec};
use kneelab::sharp::{self, SharpnessConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    OutOfRange = 4,
    Numeric = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: KlStatus, msg: impl Into<String>) -> KlStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> KlStatus) -> KlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(KlStatus::Panic, msg)
        }
    }
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, KlStatus> {
    if s.is_null() {
        return Err(fail(KlStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| fail(KlStatus::ParseError, format!("string is not UTF-8: {e}")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes) and returns the full message length.
/// Pass a null `buf` to query the length.
///
/// # Safety
///
/// `buf` is null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn kl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------- schedule

pub struct KlSchedule {
    inner: Schedule,
}

/// Builds a schedule from its JSON spec, for example
/// `{"kind":"knee","total_steps":200,"seed_lr":0.1,"knee_explore_steps":100}`.
///
/// # Safety
///
/// `json` is a NUL-terminated string and `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_schedule_from_json(json: *const c_char, out: *mut *mut KlSchedule) -> KlStatus {
    guard(|| {
        if out.is_null() {
            return fail(KlStatus::NullPointer, "out is null");
        }
        let text = match c_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let spec: ScheduleSpec = match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(KlStatus::ParseError, e.to_string()),
        };
        match build_schedule(spec) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(KlSchedule { inner }));
                KlStatus::Ok
            }
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
///
/// `schedule` comes from `kl_schedule_from_json` and `lr` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_schedule_lr_at(schedule: *const KlSchedule, step: u64, lr: *mut f64) -> KlStatus {
    guard(|| {
        if schedule.is_null() || lr.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        match (*schedule).inner.lr_at(step) {
            Ok(v) => {
                *lr = v;
                KlStatus::Ok
            }
            Err(e @ ScheduleError::OutOfRange { .. }) => fail(KlStatus::OutOfRange, e.to_string()),
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
///
/// `schedule` comes from `kl_schedule_from_json` and `total` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_schedule_total_steps(schedule: *const KlSchedule, total: *mut u64) -> KlStatus {
    guard(|| {
        if schedule.is_null() || total.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        *total = (*schedule).inner.total_steps();
        KlStatus::Ok
    })
}

/// # Safety
///
/// `schedule` is null or an unfreed handle from `kl_schedule_from_json`.
#[no_mangle]
pub unsafe extern "C" fn kl_schedule_free(schedule: *mut KlSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

// --------------------------------------------------------------- optimizer

pub struct KlOptimizer {
    inner: Optimizer,
    n_params: usize,
}

/// Creates an optimizer over `n_params` values from its JSON
/// hyperparameters, for example `{"algorithm":"adam"}`. The parameters form
/// a single LAMB segment.
///
/// # Safety
///
/// `hyper_json` is a NUL-terminated string and `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_optimizer_new(
    hyper_json: *const c_char,
    n_params: usize,
    out: *mut *mut KlOptimizer,
) -> KlStatus {
    guard(|| {
        if out.is_null() {
            return fail(KlStatus::NullPointer, "out is null");
        }
        if n_params == 0 {
            return fail(KlStatus::InvalidArgument, "n_params must be positive");
        }
        let text = match c_str(hyper_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let hyper: OptimizerHyper = match serde_json::from_str(text) {
            Ok(h) => h,
            Err(e) => return fail(KlStatus::ParseError, e.to_string()),
        };
        if let Err(m) = hyper.validate() {
            return fail(KlStatus::InvalidArgument, m);
        }
        *out = Box::into_raw(Box::new(KlOptimizer {
            inner: Optimizer::new(hyper, n_params),
            n_params,
        }));
        KlStatus::Ok
    })
}

/// One update of `params` (length `n`) in place from `grad`.
///
/// # Safety
///
/// `opt` comes from `kl_optimizer_new`; `params` and `grad` hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn kl_optimizer_step(
    opt: *mut KlOptimizer,
    params: *mut f64,
    grad: *const f64,
    n: usize,
    lr: f64,
) -> KlStatus {
    guard(|| {
        if opt.is_null() || params.is_null() || grad.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        let opt = &mut *opt;
        if n != opt.n_params {
            return fail(
                KlStatus::InvalidArgument,
                format!("length {n} does not match the optimizer size {}", opt.n_params),
            );
        }
        let theta = slice::from_raw_parts_mut(params, n);
        let g = slice::from_raw_parts(grad, n);
        let mut p = ParamVector::flat(theta.to_vec());
        match opt.inner.step(&mut p, g, lr) {
            Ok(()) => {
                theta.copy_from_slice(&p.values);
                KlStatus::Ok
            }
            Err(e) => fail(KlStatus::Numeric, e.to_string()),
        }
    })
}

/// # Safety
///
/// `opt` is null or an unfreed handle from `kl_optimizer_new`.
#[no_mangle]
pub unsafe extern "C" fn kl_optimizer_free(opt: *mut KlOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

// --------------------------------------------------------------- landscape

pub struct KlLandscape {
    inner: LandscapeSpec,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KlLandscapeParams {
    pub n_wide: usize,
    pub c_wide: f64,
    pub n_narrow: usize,
    pub c_narrow: f64,
    pub dim: usize,
    pub domain_box: f64,
    pub seed: u64,
    pub noise_sigma: f64,
}

/// # Safety
///
/// `params` points to a filled `KlLandscapeParams` and `out` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_landscape_build(params: *const KlLandscapeParams, out: *mut *mut KlLandscape) -> KlStatus {
    guard(|| {
        if params.is_null() || out.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        let p = *params;
        if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
            return fail(KlStatus::InvalidArgument, "noise_sigma must be finite and >= 0");
        }
        match scape::build_landscape(p.n_wide, p.c_wide, p.n_narrow, p.c_narrow, p.dim, p.domain_box, p.seed) {
            Ok(spec) => {
                *out = Box::into_raw(Box::new(KlLandscape {
                    inner: spec.with_noise(p.noise_sigma),
                }));
                KlStatus::Ok
            }
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Writes `F(x)` to `value` and its gradient to `grad` (both length `dim`).
///
/// # Safety
///
/// `land` comes from `kl_landscape_build`; `x` and `grad` hold `dim`
/// doubles and `value` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_landscape_value_grad(
    land: *const KlLandscape,
    x: *const f64,
    dim: usize,
    value: *mut f64,
    grad: *mut f64,
) -> KlStatus {
    guard(|| {
        if land.is_null() || x.is_null() || value.is_null() || grad.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        let spec = &(*land).inner;
        if dim != spec.dim {
            return fail(KlStatus::InvalidArgument, format!("dimension {dim} != {}", spec.dim));
        }
        match scape::landscape_value_grad(spec, slice::from_raw_parts(x, dim)) {
            Ok((v, g)) => {
                *value = v;
                slice::from_raw_parts_mut(grad, dim).copy_from_slice(&g);
                KlStatus::Ok
            }
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Runs `trials` noisy walks under a knee schedule of `explore_steps` at
/// `seed_lr` followed by `decay_steps` of linear decay.
///
/// # Safety
///
/// `land` comes from `kl_landscape_build`; each out pointer is valid for one write.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn kl_landscape_landing_fraction(
    land: *const KlLandscape,
    seed_lr: f64,
    explore_steps: u64,
    decay_steps: u64,
    trials: usize,
    base_seed: u64,
    wide_fraction: *mut f64,
    diverged_fraction: *mut f64,
) -> KlStatus {
    guard(|| {
        if land.is_null() || wide_fraction.is_null() || diverged_fraction.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        if trials == 0 {
            return fail(KlStatus::InvalidArgument, "trials must be at least 1");
        }
        let family = KneeFamily { seed_lr, decay_steps };
        let schedule = match family.schedule(explore_steps) {
            Ok(s) => s,
            Err(e) => return fail(KlStatus::InvalidArgument, e.to_string()),
        };
        match scape::landing_fractions(&(*land).inner, &schedule, trials, base_seed) {
            Ok((w, d)) => {
                *wide_fraction = w;
                *diverged_fraction = d;
                KlStatus::Ok
            }
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
///
/// `land` is null or an unfreed handle from `kl_landscape_build`.
#[no_mangle]
pub unsafe extern "C" fn kl_landscape_free(land: *mut KlLandscape) {
    if !land.is_null() {
        drop(Box::from_raw(land));
    }
}

// --------------------------------------------------------------- sharpness

/// Objective callback: returns `f(x)` and writes the gradient into `grad`.
/// Both arrays have length `n`.
pub type KlObjectiveFn =
    Option<unsafe extern "C" fn(user: *mut c_void, x: *const f64, n: usize, grad: *mut f64) -> f64>;

struct CallbackObjective {
    f: unsafe extern "C" fn(*mut c_void, *const f64, usize, *mut f64) -> f64,
    user: *mut c_void,
    dim: usize,
}

// The sharpness solver calls the objective from the calling thread only.
unsafe impl Sync for CallbackObjective {}

impl Objective for CallbackObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        unsafe { (self.f)(self.user, x.as_ptr(), x.len(), grad.as_mut_ptr()) }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KlSharpnessConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub ascent_lr: f64,
    pub restarts: usize,
    pub seed: u64,
}

/// Default Keskar settings: epsilon 1e-4, 1000 iterations, ascent lr 1e-3,
/// 3 restarts, seed 0.
#[no_mangle]
pub extern "C" fn kl_sharpness_config_default() -> KlSharpnessConfig {
    let d = SharpnessConfig::default();
    KlSharpnessConfig {
        epsilon: d.epsilon,
        iterations: d.iterations,
        ascent_lr: d.ascent_lr,
        restarts: d.restarts,
        seed: d.seed,
    }
}

/// Keskar sharpness of the callback objective at `x` (length `n`).
///
/// # Safety
///
/// `x` holds `n` doubles, `f` is safe to call with `user` on vectors of
/// length `n`, `config` is null or valid, and `score` is valid for one write.
#[no_mangle]
pub unsafe extern "C" fn kl_keskar_sharpness(
    f: KlObjectiveFn,
    user: *mut c_void,
    x: *const f64,
    n: usize,
    config: *const KlSharpnessConfig,
    score: *mut f64,
) -> KlStatus {
    guard(|| {
        let Some(f) = f else {
            return fail(KlStatus::NullPointer, "objective callback is null");
        };
        if x.is_null() || config.is_null() || score.is_null() {
            return fail(KlStatus::NullPointer, "null argument");
        }
        if n == 0 {
            return fail(KlStatus::InvalidArgument, "n must be positive");
        }
        let c = *config;
        let cfg = SharpnessConfig {
            epsilon: c.epsilon,
            iterations: c.iterations,
            ascent_lr: c.ascent_lr,
            restarts: c.restarts,
            seed: c.seed,
        };
        let objective = CallbackObjective { f, user, dim: n };
        match sharp::keskar_sharpness(&objective, slice::from_raw_parts(x, n), &cfg) {
            Ok(r) => {
                *score = r.keskar_score;
                KlStatus::Ok
            }
            Err(e @ sharp::SharpError::NonFiniteGradient) => fail(KlStatus::Numeric, e.to_string()),
            Err(e) => fail(KlStatus::InvalidArgument, e.to_string()),
        }
    })
}
