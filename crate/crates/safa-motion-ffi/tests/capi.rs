//! Exercises the C entry points from Rust, comparing every buffer against
//! the underlying library so the ABI layer cannot silently reorder or
//! truncate anything.

use std::ffi::{CStr, CString};

use ndarray::{Array1, Array2, Array3};

use safa_motion_ffi::*;
use safa_motion_kit::fitting::{fit_3dmm, FitOptions, LandmarkSet};
use safa_motion_kit::model::{decode, make_toy_sphere_model, select_landmarks, ParamSet};
use safa_motion_kit::motion::{affine_motion, MotionField};
use safa_motion_kit::{assets, camera, ImageGrid};

fn toy_handle() -> *mut SafaModel {
    let mut handle: *mut SafaModel = std::ptr::null_mut();
    let status = unsafe { safa_model_toy(11, 6, 8, 2, 2, &mut handle) };
    assert_eq!(status, SafaStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error_string() -> String {
    let ptr = safa_last_error();
    assert!(!ptr.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string()
}

#[test]
fn version_is_a_static_semverish_string() {
    let ptr = safa_version();
    assert!(!ptr.is_null());
    let version = unsafe { CStr::from_ptr(ptr) }.to_str().unwrap();
    assert!(version.contains('.'), "{version}");
}

#[test]
fn counts_match_the_library_model() {
    let handle = toy_handle();
    let reference = make_toy_sphere_model(11, 6, 8, (2, 2)).unwrap();
    let (mut v, mut f, mut j, mut s, mut e, mut l) = (0usize, 0, 0, 0, 0, 0);
    let status = unsafe {
        safa_model_counts(handle, &mut v, &mut f, &mut j, &mut s, &mut e, &mut l)
    };
    assert_eq!(status, SafaStatus::Ok);
    assert_eq!(v, reference.n_vertices());
    assert_eq!(f, reference.n_faces());
    assert_eq!(j, reference.n_joints());
    assert_eq!(s, reference.shape_dim());
    assert_eq!(e, reference.expr_dim());
    assert_eq!(l, reference.n_landmarks());
    unsafe { safa_model_free(handle) };
}

#[test]
fn decode_buffer_matches_the_library_bitwise() {
    let handle = toy_handle();
    let reference = make_toy_sphere_model(11, 6, 8, (2, 2)).unwrap();
    let shape = [0.2, -0.1];
    let expression = [0.05, 0.15];
    let pose = [0.1, -0.05, 0.02, 0.3, 0.0, -0.1];
    let mut out = vec![0.0; reference.n_vertices() * 3];
    let status = unsafe {
        safa_model_decode(
            handle,
            shape.as_ptr(),
            2,
            expression.as_ptr(),
            2,
            pose.as_ptr(),
            6,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    let mut params = ParamSet::neutral_for(&reference);
    params.shape = Array1::from_vec(shape.to_vec());
    params.expression = Array1::from_vec(expression.to_vec());
    params.pose = Array1::from_vec(pose.to_vec());
    let mesh = decode(&reference, &params).unwrap();
    assert_eq!(out, mesh.vertices.as_slice().unwrap());
    unsafe { safa_model_free(handle) };
}

#[test]
fn landmark_projection_matches_the_library() {
    let handle = toy_handle();
    let reference = make_toy_sphere_model(11, 6, 8, (2, 2)).unwrap();
    let shape = [0.1, 0.1];
    let expression = [0.0, -0.2];
    let pose = [0.0; 6];
    let mut out = vec![0.0; reference.n_landmarks() * 2];
    let status = unsafe {
        safa_model_landmarks(
            handle,
            shape.as_ptr(),
            2,
            expression.as_ptr(),
            2,
            pose.as_ptr(),
            6,
            1.1,
            0.02,
            -0.05,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    let mut params = ParamSet::neutral_for(&reference);
    params.shape = Array1::from_vec(shape.to_vec());
    params.expression = Array1::from_vec(expression.to_vec());
    params.camera_scale = 1.1;
    params.camera_translation = [0.02, -0.05];
    let mesh = decode(&reference, &params).unwrap();
    let landmarks = select_landmarks(&reference, &mesh).unwrap();
    let (xy, _) = camera::project(&landmarks, &camera::Camera::from(&params)).unwrap();
    assert_eq!(out, xy.as_slice().unwrap());
    unsafe { safa_model_free(handle) };
}

#[test]
fn fit_matches_the_library_run_with_the_same_options() {
    let reference = make_toy_sphere_model(11, 6, 8, (2, 2)).unwrap();
    let mut truth = ParamSet::neutral_for(&reference);
    truth.shape = Array1::from_vec(vec![0.3, -0.2]);
    truth.camera_scale = 1.05;
    truth.camera_translation = [0.03, -0.01];
    let mesh = decode(&reference, &truth).unwrap();
    let landmarks3 = select_landmarks(&reference, &mesh).unwrap();
    let (targets, _) = camera::project(&landmarks3, &camera::Camera::from(&truth)).unwrap();

    let handle = toy_handle();
    let n = targets.nrows();
    let mut shape = vec![0.0; reference.shape_dim()];
    let mut expression = vec![0.0; reference.expr_dim()];
    let mut pose = vec![0.0; reference.pose_dim()];
    let mut cam = vec![0.0; 3];
    let mut final_loss = f64::NAN;
    let mut iterations = 0usize;
    let status = unsafe {
        safa_fit_landmarks(
            handle,
            targets.as_slice().unwrap().as_ptr(),
            n,
            60,
            shape.as_mut_ptr(),
            expression.as_mut_ptr(),
            pose.as_mut_ptr(),
            cam.as_mut_ptr(),
            &mut final_loss,
            &mut iterations,
        )
    };
    assert_eq!(status, SafaStatus::Ok);

    let options = FitOptions {
        max_iterations: 60,
        ..FitOptions::default()
    };
    let report = fit_3dmm(
        &reference,
        &LandmarkSet::new(targets.clone()).unwrap(),
        None,
        &options,
    )
    .unwrap();
    assert_eq!(shape, report.params.shape.as_slice().unwrap());
    assert_eq!(expression, report.params.expression.as_slice().unwrap());
    assert_eq!(pose, report.params.pose.as_slice().unwrap());
    assert_eq!(cam[0], report.params.camera_scale);
    assert_eq!(final_loss, report.final_loss);
    assert_eq!(iterations, report.iterations);
    assert!(final_loss < report.initial_loss);
    unsafe { safa_model_free(handle) };
}

#[test]
fn identity_warp_returns_the_input_bitwise() {
    // Power-of-two dimensions keep the center round trip exact, which is
    // what makes the identity warp bitwise.
    let grid = ImageGrid::new(8, 16).unwrap();
    let image = Array3::from_shape_fn((8, 16, 3), |(i, j, c)| {
        (i as f64 * 0.1 + j as f64 * 0.01 + c as f64).sin().abs()
    });
    let field = MotionField::identity(&grid);
    let mut out = vec![0.0; 8 * 16 * 3];
    let status = unsafe {
        safa_warp_image(
            image.as_slice().unwrap().as_ptr(),
            8,
            16,
            3,
            field.map().as_slice().unwrap().as_ptr(),
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    assert_eq!(out, image.as_slice().unwrap());
}

#[test]
fn affine_motion_buffer_matches_the_library() {
    let grid = ImageGrid::new(8, 8).unwrap();
    let p_s = [0.1, -0.2];
    let j_s = [1.1, 0.2, -0.1, 0.9];
    let p_d = [-0.05, 0.0];
    let j_d = [1.0, 0.05, 0.0, 1.2];
    let mut out = vec![0.0; 8 * 8 * 2];
    let status = unsafe {
        safa_affine_motion(
            p_s.as_ptr(),
            j_s.as_ptr(),
            p_d.as_ptr(),
            j_d.as_ptr(),
            8,
            8,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    let field = affine_motion(
        p_s,
        &nalgebra::Matrix2::new(j_s[0], j_s[1], j_s[2], j_s[3]),
        p_d,
        &nalgebra::Matrix2::new(j_d[0], j_d[1], j_d[2], j_d[3]),
        &grid,
    )
    .unwrap();
    assert_eq!(out, field.map().as_slice().unwrap());
}

#[test]
fn singular_jacobian_reports_singular_status() {
    let p = [0.0, 0.0];
    let j_ok = [1.0, 0.0, 0.0, 1.0];
    let j_bad = [1.0, 2.0, 2.0, 4.0];
    let mut out = vec![0.0; 4 * 4 * 2];
    let status = unsafe {
        safa_affine_motion(
            p.as_ptr(),
            j_ok.as_ptr(),
            p.as_ptr(),
            j_bad.as_ptr(),
            4,
            4,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::SingularError);
    assert!(last_error_string().contains("not invertible"));
}

#[test]
fn metrics_agree_with_the_library_and_cap_psnr() {
    let a = Array3::from_shape_fn((12, 12, 3), |(i, j, c)| ((i + 2 * j + c) % 7) as f64 / 7.0);
    let mut l1 = f64::NAN;
    let mut psnr = f64::NAN;
    let mut ssim = f64::NAN;
    let status = unsafe {
        safa_image_metrics(
            a.as_slice().unwrap().as_ptr(),
            a.as_slice().unwrap().as_ptr(),
            12,
            12,
            3,
            &mut l1,
            &mut psnr,
            &mut ssim,
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    assert_eq!(l1, 0.0);
    assert_eq!(psnr, 100.0);
    assert!((ssim - 1.0).abs() < 1e-9);
}

#[test]
fn null_arguments_set_status_and_message() {
    let mut handle: *mut SafaModel = std::ptr::null_mut();
    let status = unsafe { safa_model_load(std::ptr::null(), &mut handle) };
    assert_eq!(status, SafaStatus::NullPointer);
    assert!(last_error_string().contains("path"));

    let status = unsafe {
        safa_model_counts(
            std::ptr::null(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
        )
    };
    assert_eq!(status, SafaStatus::NullPointer);
}

#[test]
fn missing_file_reports_io_and_success_clears_the_message() {
    let path = CString::new("/definitely/not/here.npz").unwrap();
    let mut handle: *mut SafaModel = std::ptr::null_mut();
    let status = unsafe { safa_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, SafaStatus::IoError);
    assert!(last_error_string().contains("not/here.npz"));

    // A successful call clears the thread's error slot.
    let ok = toy_handle();
    assert!(safa_last_error().is_null());
    unsafe { safa_model_free(ok) };
}

#[test]
fn load_round_trips_a_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.npz");
    let reference = make_toy_sphere_model(3, 5, 6, (1, 1)).unwrap();
    assets::save_model(&path, &reference).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut SafaModel = std::ptr::null_mut();
    let status = unsafe { safa_model_load(c_path.as_ptr(), &mut handle) };
    assert_eq!(status, SafaStatus::Ok);
    let mut v = 0usize;
    let status = unsafe {
        safa_model_counts(
            handle,
            &mut v,
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
        )
    };
    assert_eq!(status, SafaStatus::Ok);
    assert_eq!(v, reference.n_vertices());
    unsafe { safa_model_free(handle) };
}

#[test]
fn dimension_mismatch_reports_the_right_status() {
    let handle = toy_handle();
    // Wrong shape length for this model.
    let shape = [0.1; 5];
    let expression = [0.0; 2];
    let pose = [0.0; 6];
    let mut out = vec![0.0; 4000];
    let status = unsafe {
        safa_model_decode(
            handle,
            shape.as_ptr(),
            5,
            expression.as_ptr(),
            2,
            pose.as_ptr(),
            6,
            out.as_mut_ptr(),
        )
    };
    assert_eq!(status, SafaStatus::DimensionError);
    unsafe { safa_model_free(handle) };
}

#[test]
fn bad_array_contents_fail_cleanly() {
    // Landmark targets with a NaN are rejected as invalid arguments.
    let handle = toy_handle();
    let reference = make_toy_sphere_model(11, 6, 8, (2, 2)).unwrap();
    let mut targets = Array2::<f64>::zeros((reference.n_landmarks(), 2));
    targets[[0, 0]] = f64::NAN;
    let mut shape = vec![0.0; reference.shape_dim()];
    let mut expression = vec![0.0; reference.expr_dim()];
    let mut pose = vec![0.0; reference.pose_dim()];
    let mut cam = vec![0.0; 3];
    let status = unsafe {
        safa_fit_landmarks(
            handle,
            targets.as_slice().unwrap().as_ptr(),
            reference.n_landmarks(),
            10,
            shape.as_mut_ptr(),
            expression.as_mut_ptr(),
            pose.as_mut_ptr(),
            cam.as_mut_ptr(),
            std::ptr::null_mut(),
            std::ptr::null_mut(),
        )
    };
    assert_eq!(status, SafaStatus::InvalidArgument);
    unsafe { safa_model_free(handle) };
}
