use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use gpmpc::gp::{Dataset, GpModel, KernelParams};
use gpmpc::plant::{Plant, PlantInput, PlantParams};
use gpmpc_ffi::*;
use nalgebra::{DMatrix, DVector};

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { gpmpc_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_model() -> GpModel {
    let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.0, 1.0, 0.5, 2.0, -1.0, -1.0, 1.0, 0.5, 2.0]);
    let y = DVector::from_column_slice(&[0.1, 0.8, -0.3, 0.4, 1.1]);
    let params = KernelParams {
        sigma_iso: 1.0,
        l_iso: 1.5,
        sigma_ard: 0.5,
        l_ard: vec![0.8, 2.0],
        sigma_n: 0.1,
    };
    GpModel::fit(Dataset::new(x, y).unwrap(), params).unwrap()
}

#[test]
fn gp_handle_matches_rust_model() {
    let model = small_model();
    let text = CString::new(model.to_text()).unwrap();
    let mut gp: *mut GpmpcGp = ptr::null_mut();
    assert_eq!(unsafe { gpmpc_gp_from_text(text.as_ptr(), &mut gp) }, GpmpcStatus::Ok);
    assert_eq!(unsafe { gpmpc_gp_input_dim(gp) }, 2);

    let x = [0.3, 0.7];
    let (mut mean, mut var) = (0.0, 0.0);
    assert_eq!(unsafe { gpmpc_gp_predict(gp, x.as_ptr(), 2, &mut mean, &mut var) }, GpmpcStatus::Ok);
    let want = model.predict(&x).unwrap();
    assert_eq!(mean, want.mean);
    assert_eq!(var, want.variance);

    let mut jac = [0.0; 2];
    assert_eq!(unsafe { gpmpc_gp_mean_jacobian(gp, x.as_ptr(), 2, jac.as_mut_ptr()) }, GpmpcStatus::Ok);
    assert_eq!(jac.to_vec(), model.mean_jacobian(&x).unwrap());

    // Wrong dimension is reported, not a crash.
    assert_eq!(
        unsafe { gpmpc_gp_predict(gp, x.as_ptr(), 1, &mut mean, &mut var) },
        GpmpcStatus::InvalidInput
    );
    assert!(!last_error().is_empty());
    unsafe { gpmpc_gp_free(gp) };
}

#[test]
fn gp_load_reads_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gp");
    std::fs::write(&path, small_model().to_text()).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut gp: *mut GpmpcGp = ptr::null_mut();
    assert_eq!(unsafe { gpmpc_gp_load(c_path.as_ptr(), &mut gp) }, GpmpcStatus::Ok);
    unsafe { gpmpc_gp_free(gp) };

    let missing = CString::new(dir.path().join("none.gp").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gpmpc_gp_load(missing.as_ptr(), &mut gp) }, GpmpcStatus::Io);
    let garbage = CString::new("not a model").unwrap();
    assert_eq!(unsafe { gpmpc_gp_from_text(garbage.as_ptr(), &mut gp) }, GpmpcStatus::Io);
}

#[test]
fn null_pointers_are_rejected() {
    let mut out = 0.0;
    assert_eq!(
        unsafe { gpmpc_gp_predict(ptr::null(), [0.0].as_ptr(), 1, &mut out, ptr::null_mut()) },
        GpmpcStatus::NullPointer
    );
    assert_eq!(unsafe { gpmpc_gp_from_text(ptr::null(), ptr::null_mut()) }, GpmpcStatus::NullPointer);
    assert_eq!(unsafe { gpmpc_plant_pressure(ptr::null(), &mut out) }, GpmpcStatus::NullPointer);
    assert_eq!(unsafe { gpmpc_gp_input_dim(ptr::null()) }, 0);
    unsafe {
        gpmpc_gp_free(ptr::null_mut());
        gpmpc_plant_free(ptr::null_mut());
    }
}

#[test]
fn plant_handle_tracks_rust_plant() {
    let mut h: *mut GpmpcPlant = ptr::null_mut();
    assert_eq!(unsafe { gpmpc_plant_new(250.0, 500.0, 110.0, &mut h) }, GpmpcStatus::Ok);
    let mut reference = Plant::at_steady_state(PlantParams::default(), &PlantInput::new(250.0, 500.0, 110.0)).unwrap();

    for k in 0..10 {
        let (q, i) = (250.0 + 5.0 * k as f64, 110.0 + k as f64);
        assert_eq!(unsafe { gpmpc_plant_step(h, q, 500.0, i, 0.5) }, GpmpcStatus::Ok);
        reference.advance(&PlantInput::new(q, 500.0, i), 0.5).unwrap();
    }
    let (mut v, mut p) = (0.0, 0.0);
    assert_eq!(unsafe { gpmpc_plant_voltage(h, 295.0, 500.0, 119.0, &mut v) }, GpmpcStatus::Ok);
    assert_eq!(unsafe { gpmpc_plant_pressure(h, &mut p) }, GpmpcStatus::Ok);
    assert_eq!(v, reference.voltage(&PlantInput::new(295.0, 500.0, 119.0)).unwrap());
    assert_eq!(p, reference.state.p_h2);

    // Drawing more than the limiting current is a plant fault.
    assert_eq!(unsafe { gpmpc_plant_step(h, 295.0, 500.0, 1e6, 0.5) }, GpmpcStatus::PlantFault);
    unsafe { gpmpc_plant_free(h) };
}

#[test]
fn qp_solve_box_problem() {
    // min (z0 - 1)^2 + (z1 + 2)^2  s.t.  z0 <= 0.5, -1 <= z1
    let h = [2.0, 0.0, 0.0, 2.0];
    let g = [-2.0, 4.0];
    let a = [1.0, 0.0, 0.0, 1.0];
    let lb = [-1e20, -1.0];
    let ub = [0.5, 1e20];
    let mut z = [0.0; 2];
    let mut y = [0.0; 2];
    let mut status = GpmpcQpStatus::MaxIter;
    let mut kkt = f64::NAN;
    let rc = unsafe {
        gpmpc_qp_solve(
            2,
            2,
            h.as_ptr(),
            g.as_ptr(),
            a.as_ptr(),
            lb.as_ptr(),
            ub.as_ptr(),
            z.as_mut_ptr(),
            y.as_mut_ptr(),
            &mut status,
            &mut kkt,
        )
    };
    assert_eq!(rc, GpmpcStatus::Ok);
    assert_eq!(status, GpmpcQpStatus::Optimal);
    assert!((z[0] - 0.5).abs() < 1e-6 && (z[1] + 1.0).abs() < 1e-6, "{z:?}");
    assert!(y[0] > 0.0 && y[1] < 0.0);
    assert!(kkt < 1e-6);
}

#[test]
fn qp_solve_reports_infeasible() {
    let h = [1.0];
    let g = [0.0];
    let a = [1.0, 1.0];
    let lb = [1.0, -1e20];
    let ub = [1e20, 0.0];
    let mut z = [0.0];
    let mut status = GpmpcQpStatus::Optimal;
    let rc = unsafe {
        gpmpc_qp_solve(
            1,
            2,
            h.as_ptr(),
            g.as_ptr(),
            a.as_ptr(),
            lb.as_ptr(),
            ub.as_ptr(),
            z.as_mut_ptr(),
            ptr::null_mut(),
            &mut status,
            ptr::null_mut(),
        )
    };
    assert_eq!(rc, GpmpcStatus::Ok);
    assert_eq!(status, GpmpcQpStatus::Infeasible);
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/gpmpc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "gpmpc_gp_load",
        "gpmpc_gp_predict",
        "gpmpc_gp_mean_jacobian",
        "gpmpc_plant_step",
        "gpmpc_qp_solve",
        "GPMPC_STATUS_PLANT_FAULT",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    // Syntax-check with the system C compiler when one is installed.
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
