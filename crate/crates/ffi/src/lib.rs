//! C ABI for the gpmpc toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible function
//! returns a [`GpmpcStatus`]; on failure a message is kept per thread and can
//! be copied out with [`gpmpc_last_error`]. Handles are not thread-safe, use
//! one per thread.
//!
//! Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gpmpc::gp::GpModel;
use gpmpc::plant::{Plant, PlantInput, PlantParams};
use gpmpc::qp::{self, QpProblem, QpSettings, QpStatus};
use gpmpc::Error;
use nalgebra::{DMatrix, DVector};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    /// Unreadable file or malformed model text.
    Io = 3,
    Numerical = 4,
    PlantFault = 5,
    Panic = 6,
}

/// Outcome reported by [`gpmpc_qp_solve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpmpcQpStatus {
    Optimal = 0,
    MaxIter = 1,
    Infeasible = 2,
}

/// Opaque trained GP model.
pub struct GpmpcGp {
    model: GpModel,
}

/// Opaque fuel cell stack simulator.
pub struct GpmpcPlant {
    plant: Plant,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> GpmpcStatus {
    match e.exit_code() {
        3 => GpmpcStatus::Io,
        4 => GpmpcStatus::Numerical,
        5 => GpmpcStatus::PlantFault,
        _ => GpmpcStatus::InvalidInput,
    }
}

/// Run `f`, converting errors and panics into status codes.
fn guard<F>(f: F) -> GpmpcStatus
where
    F: FnOnce() -> Result<(), GpmpcStatus>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GpmpcStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            GpmpcStatus::Panic
        }
    }
}

fn fail(e: Error) -> GpmpcStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> GpmpcStatus {
    set_error(format!("{what} is null"));
    GpmpcStatus::NullPointer
}

unsafe fn input<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], GpmpcStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts(p, n) })
}

unsafe fn output<'a>(p: *mut f64, n: usize, what: &str) -> Result<&'a mut [f64], GpmpcStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts_mut(p, n) })
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, GpmpcStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        GpmpcStatus::InvalidInput
    })
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Load a model file written by `gpmpc train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_load(path: *const c_char, out: *mut *mut GpmpcGp) -> GpmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { c_str(path, "path")? };
        let text = std::fs::read_to_string(path).map_err(|e| fail(Error::Io(e)))?;
        let model = GpModel::from_text(&text).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(GpmpcGp { model })) };
        Ok(())
    })
}

/// Parse a model from its text form.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_from_text(text: *const c_char, out: *mut *mut GpmpcGp) -> GpmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = unsafe { c_str(text, "text")? };
        let model = GpModel::from_text(text).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(GpmpcGp { model })) };
        Ok(())
    })
}

/// Input dimension of the model, 0 for a null handle.
///
/// # Safety
/// `gp` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_input_dim(gp: *const GpmpcGp) -> usize {
    unsafe { gp.as_ref() }.map_or(0, |g| g.model.data().d())
}

/// Posterior mean and latent variance at `x` (length `d`).
///
/// # Safety
/// `gp` must be a live handle, `x` must hold `d` doubles, `mean` and
/// `variance` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_predict(
    gp: *const GpmpcGp,
    x: *const f64,
    d: usize,
    mean: *mut f64,
    variance: *mut f64,
) -> GpmpcStatus {
    guard(|| {
        let gp = unsafe { gp.as_ref() }.ok_or_else(|| null("gp"))?;
        let x = unsafe { input(x, d, "x")? };
        let p = gp.model.predict(x).map_err(fail)?;
        if let Some(m) = unsafe { mean.as_mut() } {
            *m = p.mean;
        }
        if let Some(v) = unsafe { variance.as_mut() } {
            *v = p.variance;
        }
        Ok(())
    })
}

/// Gradient of the posterior mean with respect to `x`, written to `jac`.
///
/// # Safety
/// `gp` must be a live handle; `x` and `jac` must each hold `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_mean_jacobian(
    gp: *const GpmpcGp,
    x: *const f64,
    d: usize,
    jac: *mut f64,
) -> GpmpcStatus {
    guard(|| {
        let gp = unsafe { gp.as_ref() }.ok_or_else(|| null("gp"))?;
        let x = unsafe { input(x, d, "x")? };
        let out = unsafe { output(jac, d, "jac")? };
        let j = gp.model.mean_jacobian(x).map_err(fail)?;
        out.copy_from_slice(&j);
        Ok(())
    })
}

/// # Safety
/// `gp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_gp_free(gp: *mut GpmpcGp) {
    if !gp.is_null() {
        drop(unsafe { Box::from_raw(gp) });
    }
}

/// Stack with default parameters, resting at the steady state of the given
/// flows (lpm) and current (A).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_plant_new(
    q_h2: f64,
    q_air: f64,
    current: f64,
    out: *mut *mut GpmpcPlant,
) -> GpmpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let plant =
            Plant::at_steady_state(PlantParams::default(), &PlantInput::new(q_h2, q_air, current)).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(GpmpcPlant { plant })) };
        Ok(())
    })
}

/// Integrate the stack for `dt` seconds under constant inputs.
///
/// # Safety
/// `plant` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_plant_step(
    plant: *mut GpmpcPlant,
    q_h2: f64,
    q_air: f64,
    current: f64,
    dt: f64,
) -> GpmpcStatus {
    guard(|| {
        let p = unsafe { plant.as_mut() }.ok_or_else(|| null("plant"))?;
        p.plant.advance(&PlantInput::new(q_h2, q_air, current), dt).map_err(fail)
    })
}

/// Stack voltage for the current state under the given load.
///
/// # Safety
/// `plant` must be a live handle and `voltage` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_plant_voltage(
    plant: *const GpmpcPlant,
    q_h2: f64,
    q_air: f64,
    current: f64,
    voltage: *mut f64,
) -> GpmpcStatus {
    guard(|| {
        let p = unsafe { plant.as_ref() }.ok_or_else(|| null("plant"))?;
        let out = unsafe { voltage.as_mut() }.ok_or_else(|| null("voltage"))?;
        *out = p.plant.voltage(&PlantInput::new(q_h2, q_air, current)).map_err(fail)?;
        Ok(())
    })
}

/// Anode hydrogen partial pressure, atm.
///
/// # Safety
/// `plant` must be a live handle and `p_h2` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_plant_pressure(plant: *const GpmpcPlant, p_h2: *mut f64) -> GpmpcStatus {
    guard(|| {
        let p = unsafe { plant.as_ref() }.ok_or_else(|| null("plant"))?;
        let out = unsafe { p_h2.as_mut() }.ok_or_else(|| null("p_h2"))?;
        *out = p.plant.state.p_h2;
        Ok(())
    })
}

/// # Safety
/// `plant` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gpmpc_plant_free(plant: *mut GpmpcPlant) {
    if !plant.is_null() {
        drop(unsafe { Box::from_raw(plant) });
    }
}

/// Solve `min 1/2 z'Hz + g'z  s.t.  lb <= Az <= ub` with default settings.
///
/// `h` is n x n, `a` is m x n, both row-major. Bounds beyond +-1e20 count as
/// infinite. `duals` (length m), `status` and `kkt_residual` may be null.
///
/// # Safety
/// All non-null pointers must reference arrays of the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gpmpc_qp_solve(
    n: usize,
    m: usize,
    h: *const f64,
    g: *const f64,
    a: *const f64,
    lb: *const f64,
    ub: *const f64,
    z: *mut f64,
    duals: *mut f64,
    status: *mut GpmpcQpStatus,
    kkt_residual: *mut f64,
) -> GpmpcStatus {
    guard(|| {
        let h = unsafe { input(h, n * n, "h")? };
        let g = unsafe { input(g, n, "g")? };
        let a = unsafe { input(a, m * n, "a")? };
        let lb = unsafe { input(lb, m, "lb")? };
        let ub = unsafe { input(ub, m, "ub")? };
        let z_out = unsafe { output(z, n, "z")? };
        let problem = QpProblem {
            h: DMatrix::from_row_slice(n, n, h),
            g: DVector::from_column_slice(g),
            a: DMatrix::from_row_slice(m, n, a),
            lb: DVector::from_column_slice(lb),
            ub: DVector::from_column_slice(ub),
        };
        let sol = qp::solve(&problem, &QpSettings::default()).map_err(fail)?;
        z_out.copy_from_slice(sol.z.as_slice());
        if !duals.is_null() {
            unsafe { slice::from_raw_parts_mut(duals, m) }.copy_from_slice(sol.duals.as_slice());
        }
        if let Some(s) = unsafe { status.as_mut() } {
            *s = match sol.status {
                QpStatus::Optimal => GpmpcQpStatus::Optimal,
                QpStatus::MaxIter => GpmpcQpStatus::MaxIter,
                QpStatus::Infeasible => GpmpcQpStatus::Infeasible,
            };
        }
        if let Some(k) = unsafe { kkt_residual.as_mut() } {
            *k = sol.kkt_residual;
        }
        Ok(())
    })
}
