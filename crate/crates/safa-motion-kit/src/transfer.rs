//! Relative motion transfer: animate a source identity by the *change* of
//! the driving sequence against a reference frame rather than by absolute
//! driving state, which preserves the source's geometry and framing.
//!
//! Deltas are grouped and applied first (for example beta_S + (beta_t -
//! beta_r), s_S * (s_t / s_r)), so a driving frame equal to the reference
//! transfers to exactly the source parameters.

use nalgebra::Matrix2;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::model::{MorphableModel, ParamSet};
use crate::motion::{MotionField, JACOBIAN_DET_TOL};

/// Relative first-order keypoint motion. With the driving keypoint state
/// (p_t, J_t) taken relative to its reference (p_r, J_r), the backward map
/// is T(z) = p_S + J_r J_t^-1 (z - p_S + (p_r - p_t)).
pub fn relative_affine(
    p_source: [f64; 2],
    p_ref: [f64; 2],
    j_ref: &Matrix2<f64>,
    p_driving: [f64; 2],
    j_driving: &Matrix2<f64>,
    grid: &ImageGrid,
) -> Result<MotionField> {
    let det = j_driving[(0, 0)] * j_driving[(1, 1)] - j_driving[(0, 1)] * j_driving[(1, 0)];
    if !det.is_finite() || det.abs() <= JACOBIAN_DET_TOL {
        return Err(Error::SingularTransform { det });
    }
    let inv = Matrix2::new(
        j_driving[(1, 1)],
        -j_driving[(0, 1)],
        -j_driving[(1, 0)],
        j_driving[(0, 0)],
    ) / det;
    let a = j_ref * inv;
    // Delta first: zero when the driving frame equals the reference.
    let dp = [p_ref[0] - p_driving[0], p_ref[1] - p_driving[1]];
    let (h, w) = (grid.height(), grid.width());
    let mut map = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let [x, y] = grid.pixel_center(i, j);
            let zx = x - p_source[0] + dp[0];
            let zy = y - p_source[1] + dp[1];
            map[[i, j, 0]] = p_source[0] + a[(0, 0)] * zx + a[(0, 1)] * zy;
            map[[i, j, 1]] = p_source[1] + a[(1, 0)] * zx + a[(1, 1)] * zy;
        }
    }
    MotionField::new(map)
}

fn check_same_dims(a: &ParamSet, b: &ParamSet, what: &str) -> Result<()> {
    if a.shape.len() != b.shape.len()
        || a.expression.len() != b.expression.len()
        || a.pose.len() != b.pose.len()
    {
        return Err(Error::dim(format!(
            "{what}: parameter dimensions disagree ({}/{}/{} vs {}/{}/{})",
            a.shape.len(),
            a.expression.len(),
            a.pose.len(),
            b.shape.len(),
            b.expression.len(),
            b.pose.len()
        )));
    }
    Ok(())
}

/// Transfer the driving delta onto the source parameters: shape is kept
/// from the source, expression / pose / translation move by their driving
/// deltas, and scale moves by the driving ratio. Axis-angle pose
/// coordinates are differenced directly.
pub fn relative_params(
    source: &ParamSet,
    driving_ref: &ParamSet,
    driving: &ParamSet,
) -> Result<ParamSet> {
    check_same_dims(source, driving_ref, "source vs reference")?;
    check_same_dims(source, driving, "source vs driving")?;
    if !(driving_ref.camera_scale > 0.0) || !(driving.camera_scale > 0.0) {
        return Err(Error::arg(format!(
            "driving scales must be positive, got reference {} and driving {}",
            driving_ref.camera_scale, driving.camera_scale
        )));
    }
    let expression = &source.expression + &(&driving.expression - &driving_ref.expression);
    let pose = &source.pose + &(&driving.pose - &driving_ref.pose);
    let camera_scale = source.camera_scale * (driving.camera_scale / driving_ref.camera_scale);
    let camera_translation = [
        source.camera_translation[0]
            + (driving.camera_translation[0] - driving_ref.camera_translation[0]),
        source.camera_translation[1]
            + (driving.camera_translation[1] - driving_ref.camera_translation[1]),
    ];
    if !camera_scale.is_finite() {
        return Err(Error::arg(format!(
            "transferred scale is not finite: {camera_scale}"
        )));
    }
    Ok(ParamSet {
        shape: source.shape.clone(),
        expression,
        pose,
        camera_scale,
        camera_translation,
    })
}

/// Rendered 3D motion for a transferred frame: the source mesh moves to the
/// transferred parameters, and the field is rasterized on the transferred
/// (driving-side) geometry. Returns the field and its coverage.
pub fn relative_3d_motion(
    model: &MorphableModel,
    source: &ParamSet,
    driving_ref: &ParamSet,
    driving: &ParamSet,
    grid: &ImageGrid,
) -> Result<(MotionField, Array2<f64>)> {
    let transferred = relative_params(source, driving_ref, driving)?;
    crate::camera::render_3d_motion(model, source, &transferred, grid)
}

/// Weights of the root-rotation and translation terms in the pose distance.
#[derive(Clone, Copy, Debug)]
pub struct PoseDistance {
    pub rotation_weight: f64,
    pub translation_weight: f64,
}

impl Default for PoseDistance {
    fn default() -> Self {
        PoseDistance {
            rotation_weight: 1.0,
            translation_weight: 1.0,
        }
    }
}

impl PoseDistance {
    pub fn validate(&self) -> Result<()> {
        if !self.rotation_weight.is_finite()
            || !self.translation_weight.is_finite()
            || self.rotation_weight < 0.0
            || self.translation_weight < 0.0
        {
            return Err(Error::arg(
                "pose distance weights must be finite and non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// w_r |root rotation difference|_2 + w_t |translation difference|_2.
pub fn pose_distance(a: &ParamSet, b: &ParamSet, metric: &PoseDistance) -> Result<f64> {
    metric.validate()?;
    if a.pose.len() < 3 || b.pose.len() < 3 {
        return Err(Error::dim("pose vectors need a root rotation".to_string()));
    }
    let mut rot = 0.0;
    for c in 0..3 {
        rot += (a.pose[c] - b.pose[c]).powi(2);
    }
    let mut tr = 0.0;
    for c in 0..2 {
        tr += (a.camera_translation[c] - b.camera_translation[c]).powi(2);
    }
    Ok(metric.rotation_weight * rot.sqrt() + metric.translation_weight * tr.sqrt())
}

/// Index of the driving frame nearest the source in pose; exact ties go to
/// the lowest index.
pub fn select_reference_frame(
    source: &ParamSet,
    frames: &[ParamSet],
    metric: &PoseDistance,
) -> Result<usize> {
    if frames.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, frame) in frames.iter().enumerate() {
        let d = pose_distance(source, frame, metric)?;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}
