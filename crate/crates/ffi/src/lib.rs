//! C ABI over the design pipeline, feasibility checks, the per-step
//! receding-horizon solver and the closed-loop simulator.
//!
//! Every fallible function returns an `int32_t` status: `SPSA_OK` on success,
//! one of the `SPSA_ERR_*` codes for misuse of the interface, or the numeric
//! code of the underlying library error. The message of the most recent
//! failure on the calling thread is available from `spsa_last_error`.
//!
//! Handles are opaque and owned by the caller; each has a matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::DVector;
use spsa_lab::artifacts::ControllerFile;
use spsa_lab::config::Config;
use spsa_lab::feasibility::SpsaRealization;
use spsa_lab::pipeline::{self, DesignOutcome};
use spsa_lab::sim::{self, ControllerSpec, SimConfig};

pub const SPSA_OK: i32 = 0;
/// A required pointer argument was null.
pub const SPSA_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const SPSA_ERR_UTF8: i32 = 2;
/// The call panicked; the handle arguments should be considered poisoned.
pub const SPSA_ERR_PANIC: i32 = 3;
/// An argument had the wrong size or kind for the handle it was used with.
pub const SPSA_ERR_ARGUMENT: i32 = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(i32, String);

impl From<spsa_lab::Error> for Failure {
    fn from(e: spsa_lab::Error) -> Self {
        Failure(e.code(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SPSA_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("panic inside the library");
            SPSA_ERR_PANIC
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SPSA_ERR_NULL, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SPSA_ERR_UTF8, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

pub struct SpsaConfig {
    inner: Config,
}

pub struct SpsaDesign {
    inner: DesignOutcome,
}

pub struct SpsaController {
    spec: ControllerSpec,
    /// Admittance a receding-horizon plan was built from.
    generator: Option<SpsaRealization>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpsaControllerKind {
    Static = 0,
    Spsa = 1,
    Pgc = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpsaDesignSummary {
    pub c_d: f64,
    pub j_static: f64,
    pub j_spsa: f64,
    /// Upper bound on the receding-horizon controller's performance.
    pub j_pgc_bound: f64,
    pub spsa_states: usize,
    pub static_iterations: usize,
    pub spsa_iterations: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpsaMetrics {
    pub j: f64,
    pub z1: f64,
    pub z2: f64,
    pub u: f64,
    pub w: f64,
    pub samples: usize,
    pub storage_infeasible: bool,
    pub override_steps: usize,
    pub final_energy: f64,
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in default configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn spsa_config_default(out: *mut *mut SpsaConfig) -> i32 {
    guard(|| put(out, SpsaConfig { inner: Config::default() }))
}

/// Parses a TOML configuration; missing keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_config_from_toml(toml: *const c_char, out: *mut *mut SpsaConfig) -> i32 {
    guard(|| {
        let text = as_str(toml, "toml")?;
        let inner = Config::from_toml(text)?;
        inner.validate()?;
        put(out, SpsaConfig { inner })
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spsa_config_free(cfg: *mut SpsaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the full design: static damping, certified admittance and the
/// receding-horizon plan.
///
/// # Safety
/// `cfg` must be a live configuration handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_design_run(cfg: *const SpsaConfig, out: *mut *mut SpsaDesign) -> i32 {
    guard(|| {
        let cfg = as_ref(cfg, "config")?;
        let inner = pipeline::run_design(&cfg.inner)?;
        put(out, SpsaDesign { inner })
    })
}

/// # Safety
/// `design` must be a live design handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_design_summary(design: *const SpsaDesign, out: *mut SpsaDesignSummary) -> i32 {
    guard(|| {
        let r = &as_ref(design, "design")?.inner.report;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = SpsaDesignSummary {
            c_d: r.c_d,
            j_static: r.j_static,
            j_spsa: r.j_spsa,
            j_pgc_bound: r.j_pgc_bound,
            spsa_states: r.spsa_states,
            static_iterations: r.static_iterations,
            spsa_iterations: r.spsa_iterations,
        };
        Ok(())
    })
}

/// # Safety
/// `design` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spsa_design_free(design: *mut SpsaDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}

/// Extracts one of the three designed controllers as an independent handle.
///
/// # Safety
/// `design` must be a live design handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_design_controller(
    design: *const SpsaDesign,
    kind: SpsaControllerKind,
    out: *mut *mut SpsaController,
) -> i32 {
    guard(|| {
        let d = &as_ref(design, "design")?.inner;
        let ctrl = match kind {
            SpsaControllerKind::Static => SpsaController {
                spec: ControllerSpec::Static {
                    c_d: d.static_design.c_d,
                },
                generator: None,
            },
            SpsaControllerKind::Spsa => SpsaController {
                spec: ControllerSpec::Spsa(d.spsa.controller.clone()),
                generator: None,
            },
            SpsaControllerKind::Pgc => SpsaController {
                spec: ControllerSpec::Pgc(Box::new(d.plan.clone())),
                generator: Some(d.spsa.controller.clone()),
            },
        };
        put(out, ctrl)
    })
}

/// Static damping controller with gain `c_d`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_controller_static(c_d: f64, out: *mut *mut SpsaController) -> i32 {
    guard(|| {
        if !c_d.is_finite() {
            return Err(Failure(SPSA_ERR_ARGUMENT, format!("gain {c_d} is not finite")));
        }
        put(
            out,
            SpsaController {
                spec: ControllerSpec::Static { c_d },
                generator: None,
            },
        )
    })
}

/// Loads a controller file written by the command-line `design` step.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_controller_read(path: *const c_char, out: *mut *mut SpsaController) -> i32 {
    guard(|| {
        let f = ControllerFile::read(Path::new(as_str(path, "path")?))?;
        put(
            out,
            SpsaController {
                spec: f.controller,
                generator: f.generator,
            },
        )
    })
}

/// # Safety
/// `ctrl` must be a live controller handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_controller_kind(ctrl: *const SpsaController, out: *mut SpsaControllerKind) -> i32 {
    guard(|| {
        let c = as_ref(ctrl, "controller")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = match c.spec {
            ControllerSpec::Static { .. } => SpsaControllerKind::Static,
            ControllerSpec::Spsa(_) => SpsaControllerKind::Spsa,
            ControllerSpec::Pgc(_) => SpsaControllerKind::Pgc,
        };
        Ok(())
    })
}

/// # Safety
/// `ctrl` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spsa_controller_free(ctrl: *mut SpsaController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Checks self-powered feasibility against the configuration's design loss
/// model. `feasible` receives the verdict; an infeasible controller is not
/// an error.
///
/// # Safety
/// Handles must be live and `feasible` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_verify(ctrl: *const SpsaController, cfg: *const SpsaConfig, feasible: *mut bool) -> i32 {
    guard(|| {
        let c = as_ref(ctrl, "controller")?;
        let cfg = as_ref(cfg, "config")?;
        if feasible.is_null() {
            return Err(null("output pointer"));
        }
        let rep = pipeline::verify_controller(&c.spec, c.generator.as_ref(), &cfg.inner.design_loss)?;
        *feasible = rep.feasible;
        Ok(())
    })
}

/// State dimension of a receding-horizon controller's augmented state.
///
/// # Safety
/// `ctrl` must be a live controller handle; `n_states` and `n_inputs` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_pgc_dimensions(ctrl: *const SpsaController, n_states: *mut usize, n_inputs: *mut usize) -> i32 {
    guard(|| {
        let plan = pgc_plan(as_ref(ctrl, "controller")?)?;
        if n_states.is_null() || n_inputs.is_null() {
            return Err(null("output pointer"));
        }
        *n_states = plan.n_states();
        *n_inputs = plan.n_inputs();
        Ok(())
    })
}

fn pgc_plan(c: &SpsaController) -> Result<&spsa_lab::pgc::PgcPlan, Failure> {
    match &c.spec {
        ControllerSpec::Pgc(p) => Ok(p),
        other => Err(Failure(
            SPSA_ERR_ARGUMENT,
            format!("{} controller has no per-step program", other.name()),
        )),
    }
}

/// Solves the per-step program for augmented state `x` (`n_states` values)
/// and writes the optimal inputs (`n_inputs` values, transducer current
/// first) and the multiplier.
///
/// # Safety
/// `x` must point to `x_len` readable doubles and `u` to `u_len` writable
/// doubles; `mu` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn spsa_pgc_control(
    ctrl: *const SpsaController,
    x: *const f64,
    x_len: usize,
    u: *mut f64,
    u_len: usize,
    mu: *mut f64,
) -> i32 {
    guard(|| {
        let plan = pgc_plan(as_ref(ctrl, "controller")?)?;
        if x.is_null() || u.is_null() {
            return Err(null("state or input buffer"));
        }
        if x_len != plan.n_states() || u_len != plan.n_inputs() {
            return Err(Failure(
                SPSA_ERR_ARGUMENT,
                format!(
                    "expected {} states and {} inputs, got {x_len} and {u_len}",
                    plan.n_states(),
                    plan.n_inputs()
                ),
            ));
        }
        let xv = DVector::from_column_slice(std::slice::from_raw_parts(x, x_len));
        let out = plan.control(&xv);
        std::slice::from_raw_parts_mut(u, u_len).copy_from_slice(&out.u_bar);
        if !mu.is_null() {
            *mu = out.mu;
        }
        Ok(())
    })
}

/// Closed-loop simulation of `ctrl` on the configured plant. `duration`
/// overrides the configured horizon when positive.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spsa_simulate(
    cfg: *const SpsaConfig,
    ctrl: *const SpsaController,
    seed: u64,
    duration: f64,
    out: *mut SpsaMetrics,
) -> i32 {
    guard(|| {
        let cfg = &as_ref(cfg, "config")?.inner;
        let c = as_ref(ctrl, "controller")?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let base = cfg.sim_config();
        let sc = SimConfig {
            seed,
            duration: if duration > 0.0 { duration } else { base.duration },
            record: false,
            ..base
        };
        let r = sim::run_closed_loop(&sc, &cfg.sim_plant(), &c.spec)?;
        *out = SpsaMetrics {
            j: r.metrics.j,
            z1: r.metrics.z1,
            z2: r.metrics.z2,
            u: r.metrics.u,
            w: r.metrics.w,
            samples: r.metrics.samples,
            storage_infeasible: r.storage_infeasible(),
            override_steps: r.override_steps,
            final_energy: r.final_energy,
        };
        Ok(())
    })
}
