//! C ABI over the safa-motion-kit toolkit.
//!
//! Conventions: every entry point returns a [`SafaStatus`]; anything other
//! than `Ok` leaves a human-readable message retrievable through
//! [`safa_last_error`] on the same thread. Models are opaque handles owned
//! by the library and released with [`safa_model_free`]. All numeric
//! buffers are caller-allocated, row-major, double precision; images are
//! height x width x channels, coordinates live on the normalized
//! [-1, 1] x [-1, 1] grid. Panics never cross the boundary; they are
//! caught and reported as `Internal`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::Matrix2;
use ndarray::{Array1, Array2, Array3};

use safa_motion_kit::error::Error;
use safa_motion_kit::fitting::{fit_3dmm, FitOptions, LandmarkSet};
use safa_motion_kit::metrics;
use safa_motion_kit::model::{
    decode, make_toy_sphere_model, select_landmarks, MorphableModel, ParamSet,
};
use safa_motion_kit::motion::{affine_motion, warp, MotionField};
use safa_motion_kit::{assets, camera, ImageGrid};

/// Result of every C entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SafaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or written.
    IoError = 3,
    /// File contents or model tensors are malformed.
    FormatError = 4,
    /// Buffer or tensor dimensions disagree.
    DimensionError = 5,
    /// A Jacobian or transform was numerically singular.
    SingularError = 6,
    /// The fit diverged to a non-finite objective.
    DivergedError = 7,
    /// An argument value was out of range.
    InvalidArgument = 8,
    /// An unexpected internal failure (caught panic).
    Internal = 9,
}

/// Opaque morphable-model handle.
pub struct SafaModel {
    inner: MorphableModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error_message(message: String) {
    let c = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &Error) -> SafaStatus {
    match err {
        Error::Io { .. } => SafaStatus::IoError,
        Error::FileFormat { .. } | Error::ModelFormat { .. } | Error::MissingTensor { .. } => {
            SafaStatus::FormatError
        }
        Error::DimensionMismatch(_) => SafaStatus::DimensionError,
        Error::SingularJacobian { .. } | Error::SingularTransform { .. } => {
            SafaStatus::SingularError
        }
        Error::FitDiverged { .. } => SafaStatus::DivergedError,
        Error::MaskSum { .. }
        | Error::OcclusionRange { .. }
        | Error::InvalidArgument(_)
        | Error::EmptySequence => SafaStatus::InvalidArgument,
        Error::Stage { source, .. } => status_of(source),
    }
}

fn fail(err: Error) -> SafaStatus {
    let status = status_of(&err);
    set_error_message(err.to_string());
    status
}

fn fail_null(what: &str) -> SafaStatus {
    set_error_message(format!("{what} must not be null"));
    SafaStatus::NullPointer
}

fn fail_arg(message: String) -> SafaStatus {
    set_error_message(message);
    SafaStatus::InvalidArgument
}

/// Run a body under panic protection; on success the thread error slot is
/// cleared first so `safa_last_error` only reflects the latest call.
fn guarded(body: impl FnOnce() -> SafaStatus) -> SafaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(panic) => {
            let detail = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error_message(format!("internal panic: {detail}"));
            SafaStatus::Internal
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn safa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. The pointer stays valid until the next library call on
/// the same thread.
#[no_mangle]
pub extern "C" fn safa_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

unsafe fn model_ref<'a>(model: *const SafaModel) -> Option<&'a MorphableModel> {
    model.as_ref().map(|m| &m.inner)
}

fn hand_out(model: MorphableModel, out: *mut *mut SafaModel) -> SafaStatus {
    let boxed = Box::new(SafaModel { inner: model });
    unsafe { *out = Box::into_raw(boxed) };
    SafaStatus::Ok
}

/// Load a morphable model from an NPZ archive.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer; on
/// `Ok` the caller owns the handle and must release it with
/// [`safa_model_free`].
#[no_mangle]
pub unsafe extern "C" fn safa_model_load(
    path: *const c_char,
    out: *mut *mut SafaModel,
) -> SafaStatus {
    guarded(|| {
        if path.is_null() {
            return fail_null("path");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error_message("path is not valid UTF-8".to_string());
                return SafaStatus::InvalidUtf8;
            }
        };
        match assets::load_model(std::path::Path::new(path)) {
            Ok(model) => hand_out(model, out),
            Err(err) => fail(err),
        }
    })
}

/// Build the deterministic synthetic sphere model used by the toy
/// pipeline fixtures.
///
/// # Safety
/// `out` must be a valid pointer; ownership as in [`safa_model_load`].
#[no_mangle]
pub unsafe extern "C" fn safa_model_toy(
    seed: u64,
    rings: usize,
    segments: usize,
    shape_dim: usize,
    expr_dim: usize,
    out: *mut *mut SafaModel,
) -> SafaStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        match make_toy_sphere_model(seed, rings, segments, (shape_dim, expr_dim)) {
            Ok(model) => hand_out(model, out),
            Err(err) => fail(err),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle produced by this library that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn safa_model_free(model: *mut SafaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Model dimensions. Any output pointer may be null to skip that field.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn safa_model_counts(
    model: *const SafaModel,
    n_vertices: *mut usize,
    n_faces: *mut usize,
    n_joints: *mut usize,
    shape_dim: *mut usize,
    expr_dim: *mut usize,
    n_landmarks: *mut usize,
) -> SafaStatus {
    guarded(|| {
        let Some(m) = (unsafe { model_ref(model) }) else {
            return fail_null("model");
        };
        unsafe {
            if !n_vertices.is_null() {
                *n_vertices = m.n_vertices();
            }
            if !n_faces.is_null() {
                *n_faces = m.n_faces();
            }
            if !n_joints.is_null() {
                *n_joints = m.n_joints();
            }
            if !shape_dim.is_null() {
                *shape_dim = m.shape_dim();
            }
            if !expr_dim.is_null() {
                *expr_dim = m.expr_dim();
            }
            if !n_landmarks.is_null() {
                *n_landmarks = m.n_landmarks();
            }
        }
        SafaStatus::Ok
    })
}

unsafe fn params_from_raw(
    model: &MorphableModel,
    shape: *const f64,
    shape_len: usize,
    expression: *const f64,
    expression_len: usize,
    pose: *const f64,
    pose_len: usize,
    camera_scale: f64,
    camera_tx: f64,
    camera_ty: f64,
) -> Result<ParamSet, SafaStatus> {
    if shape.is_null() && shape_len > 0 {
        return Err(fail_null("shape"));
    }
    if expression.is_null() && expression_len > 0 {
        return Err(fail_null("expression"));
    }
    if pose.is_null() && pose_len > 0 {
        return Err(fail_null("pose"));
    }
    let read = |ptr: *const f64, len: usize| -> Array1<f64> {
        if len == 0 {
            Array1::zeros(0)
        } else {
            Array1::from_vec(unsafe { std::slice::from_raw_parts(ptr, len) }.to_vec())
        }
    };
    let params = ParamSet {
        shape: read(shape, shape_len),
        expression: read(expression, expression_len),
        pose: read(pose, pose_len),
        camera_scale,
        camera_translation: [camera_tx, camera_ty],
    };
    params.validate_for(model).map_err(fail)?;
    Ok(params)
}

/// Decode parameters into posed vertices, written as `n_vertices * 3`
/// doubles.
///
/// # Safety
/// Array arguments must match the declared lengths; `vertices_out` must
/// hold `n_vertices * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn safa_model_decode(
    model: *const SafaModel,
    shape: *const f64,
    shape_len: usize,
    expression: *const f64,
    expression_len: usize,
    pose: *const f64,
    pose_len: usize,
    vertices_out: *mut f64,
) -> SafaStatus {
    guarded(|| {
        let Some(m) = (unsafe { model_ref(model) }) else {
            return fail_null("model");
        };
        if vertices_out.is_null() {
            return fail_null("vertices_out");
        }
        let params = match unsafe {
            params_from_raw(
                m, shape, shape_len, expression, expression_len, pose, pose_len, 1.0, 0.0, 0.0,
            )
        } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let mesh = match decode(m, &params) {
            Ok(mesh) => mesh,
            Err(err) => return fail(err),
        };
        let flat = mesh.vertices.as_slice().expect("decode output is contiguous");
        unsafe { std::slice::from_raw_parts_mut(vertices_out, flat.len()) }.copy_from_slice(flat);
        SafaStatus::Ok
    })
}

/// Decode and project the model's landmarks, written as `n_landmarks * 2`
/// doubles in normalized image coordinates.
///
/// # Safety
/// As in [`safa_model_decode`]; `landmarks_out` must hold
/// `n_landmarks * 2` doubles.
#[no_mangle]
pub unsafe extern "C" fn safa_model_landmarks(
    model: *const SafaModel,
    shape: *const f64,
    shape_len: usize,
    expression: *const f64,
    expression_len: usize,
    pose: *const f64,
    pose_len: usize,
    camera_scale: f64,
    camera_tx: f64,
    camera_ty: f64,
    landmarks_out: *mut f64,
) -> SafaStatus {
    guarded(|| {
        let Some(m) = (unsafe { model_ref(model) }) else {
            return fail_null("model");
        };
        if landmarks_out.is_null() {
            return fail_null("landmarks_out");
        }
        let params = match unsafe {
            params_from_raw(
                m,
                shape,
                shape_len,
                expression,
                expression_len,
                pose,
                pose_len,
                camera_scale,
                camera_tx,
                camera_ty,
            )
        } {
            Ok(p) => p,
            Err(status) => return status,
        };
        let result = decode(m, &params)
            .and_then(|mesh| select_landmarks(m, &mesh))
            .and_then(|points| camera::project(&points, &camera::Camera::from(&params)));
        match result {
            Ok((xy, _)) => {
                let flat = xy.as_slice().expect("projection output is contiguous");
                unsafe { std::slice::from_raw_parts_mut(landmarks_out, flat.len()) }
                    .copy_from_slice(flat);
                SafaStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// Fit model parameters to `n_landmarks x 2` target landmarks.
///
/// `max_iterations = 0` keeps the default schedule. Outputs are the
/// fitted parameter buffers (`shape_dim`, `expr_dim`, `3 * n_joints`, and
/// 3 camera doubles as scale, tx, ty); `final_loss_out` and
/// `iterations_out` may be null.
///
/// # Safety
/// Buffer lengths must match the model dimensions reported by
/// [`safa_model_counts`].
#[no_mangle]
pub unsafe extern "C" fn safa_fit_landmarks(
    model: *const SafaModel,
    landmarks: *const f64,
    n_landmarks: usize,
    max_iterations: usize,
    shape_out: *mut f64,
    expression_out: *mut f64,
    pose_out: *mut f64,
    camera_out: *mut f64,
    final_loss_out: *mut f64,
    iterations_out: *mut usize,
) -> SafaStatus {
    guarded(|| {
        let Some(m) = (unsafe { model_ref(model) }) else {
            return fail_null("model");
        };
        if landmarks.is_null() {
            return fail_null("landmarks");
        }
        for (ptr, name) in [
            (shape_out, "shape_out"),
            (expression_out, "expression_out"),
            (pose_out, "pose_out"),
            (camera_out, "camera_out"),
        ] {
            if ptr.is_null() {
                return fail_null(name);
            }
        }
        let points = unsafe { std::slice::from_raw_parts(landmarks, n_landmarks * 2) };
        let points = match Array2::from_shape_vec((n_landmarks, 2), points.to_vec()) {
            Ok(a) => a,
            Err(e) => return fail_arg(e.to_string()),
        };
        let targets = match LandmarkSet::new(points) {
            Ok(l) => l,
            Err(err) => return fail(err),
        };
        let mut options = FitOptions::default();
        if max_iterations > 0 {
            options.max_iterations = max_iterations;
        }
        let report = match fit_3dmm(m, &targets, None, &options) {
            Ok(r) => r,
            Err(err) => return fail(err),
        };
        let p = &report.params;
        unsafe {
            std::slice::from_raw_parts_mut(shape_out, m.shape_dim())
                .copy_from_slice(p.shape.as_slice().expect("contiguous"));
            std::slice::from_raw_parts_mut(expression_out, m.expr_dim())
                .copy_from_slice(p.expression.as_slice().expect("contiguous"));
            std::slice::from_raw_parts_mut(pose_out, m.pose_dim())
                .copy_from_slice(p.pose.as_slice().expect("contiguous"));
            let camera = std::slice::from_raw_parts_mut(camera_out, 3);
            camera[0] = p.camera_scale;
            camera[1] = p.camera_translation[0];
            camera[2] = p.camera_translation[1];
            if !final_loss_out.is_null() {
                *final_loss_out = report.final_loss;
            }
            if !iterations_out.is_null() {
                *iterations_out = report.iterations;
            }
        }
        SafaStatus::Ok
    })
}

/// Backward-warp an image by an absolute sampling map.
///
/// `source` is `height * width * channels` doubles; `map` is
/// `height * width * 2` normalized sampling coordinates; `out` receives
/// `height * width * channels` doubles.
///
/// # Safety
/// Buffers must match the declared dimensions.
#[no_mangle]
pub unsafe extern "C" fn safa_warp_image(
    source: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    map: *const f64,
    out: *mut f64,
) -> SafaStatus {
    guarded(|| {
        if source.is_null() {
            return fail_null("source");
        }
        if map.is_null() {
            return fail_null("map");
        }
        if out.is_null() {
            return fail_null("out");
        }
        if height == 0 || width == 0 || channels == 0 {
            return fail_arg(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        let n = height * width;
        let image = unsafe { std::slice::from_raw_parts(source, n * channels) };
        let image = Array3::from_shape_vec((height, width, channels), image.to_vec())
            .expect("length checked");
        let map = unsafe { std::slice::from_raw_parts(map, n * 2) };
        let map =
            Array3::from_shape_vec((height, width, 2), map.to_vec()).expect("length checked");
        let field = match MotionField::new(map) {
            Ok(f) => f,
            Err(err) => return fail(err),
        };
        match warp(&image, &field) {
            Ok(result) => {
                let flat = result.as_slice().expect("warp output is contiguous");
                unsafe { std::slice::from_raw_parts_mut(out, flat.len()) }.copy_from_slice(flat);
                SafaStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// First-order affine motion field for one keypoint pair, written as a
/// `height * width * 2` absolute sampling map.
///
/// Keypoints are 2 doubles; Jacobians are 2 x 2 row-major.
///
/// # Safety
/// Buffers must match the declared dimensions.
#[no_mangle]
pub unsafe extern "C" fn safa_affine_motion(
    p_source: *const f64,
    j_source: *const f64,
    p_driving: *const f64,
    j_driving: *const f64,
    height: usize,
    width: usize,
    map_out: *mut f64,
) -> SafaStatus {
    guarded(|| {
        for (ptr, name) in [
            (p_source, "p_source"),
            (j_source, "j_source"),
            (p_driving, "p_driving"),
            (j_driving, "j_driving"),
        ] {
            if ptr.is_null() {
                return fail_null(name);
            }
        }
        if map_out.is_null() {
            return fail_null("map_out");
        }
        let grid = match ImageGrid::new(height, width) {
            Ok(g) => g,
            Err(err) => return fail(err),
        };
        let point = |ptr: *const f64| {
            let s = unsafe { std::slice::from_raw_parts(ptr, 2) };
            [s[0], s[1]]
        };
        let matrix = |ptr: *const f64| {
            let s = unsafe { std::slice::from_raw_parts(ptr, 4) };
            Matrix2::new(s[0], s[1], s[2], s[3])
        };
        match affine_motion(
            point(p_source),
            &matrix(j_source),
            point(p_driving),
            &matrix(j_driving),
            &grid,
        ) {
            Ok(field) => {
                let flat = field.map().as_slice().expect("field map is contiguous");
                unsafe { std::slice::from_raw_parts_mut(map_out, flat.len()) }
                    .copy_from_slice(flat);
                SafaStatus::Ok
            }
            Err(err) => fail(err),
        }
    })
}

/// L1, PSNR (capped at 100 dB), and SSIM between two images of identical
/// shape. Any output pointer may be null to skip that metric.
///
/// # Safety
/// Buffers must match the declared dimensions.
#[no_mangle]
pub unsafe extern "C" fn safa_image_metrics(
    image_a: *const f64,
    image_b: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    l1_out: *mut f64,
    psnr_out: *mut f64,
    ssim_out: *mut f64,
) -> SafaStatus {
    guarded(|| {
        if image_a.is_null() {
            return fail_null("image_a");
        }
        if image_b.is_null() {
            return fail_null("image_b");
        }
        if height == 0 || width == 0 || channels == 0 {
            return fail_arg(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        let n = height * width * channels;
        let to_array = |ptr: *const f64| {
            let s = unsafe { std::slice::from_raw_parts(ptr, n) };
            Array3::from_shape_vec((height, width, channels), s.to_vec()).expect("length checked")
        };
        let a = to_array(image_a);
        let b = to_array(image_b);
        unsafe {
            if !l1_out.is_null() {
                match metrics::l1_distance(&a, &b) {
                    Ok(v) => *l1_out = v,
                    Err(err) => return fail(err),
                }
            }
            if !psnr_out.is_null() {
                match metrics::psnr(&a, &b, 1.0) {
                    Ok(v) => *psnr_out = v.min(metrics::PSNR_CAP),
                    Err(err) => return fail(err),
                }
            }
            if !ssim_out.is_null() {
                match metrics::ssim(&a, &b) {
                    Ok(v) => *ssim_out = v,
                    Err(err) => return fail(err),
                }
            }
        }
        SafaStatus::Ok
    })
}
