//! Axis-angle rotation math shared by the skinning decoder and the fitting
//! Jacobians.

use nalgebra::{Matrix3, Vector3};

/// Angle below which the Rodrigues coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-4;

#[inline]
pub fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of an axis-angle vector via the exponential map:
/// R = I + sin(t)/t K + (1 - cos(t))/t^2 K^2 with K = [r]x, t = |r|.
pub fn rotation_from_axis_angle(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2 to O(t^4)
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = cross_matrix(r);
    Matrix3::identity() + k * a + k * k * b
}

/// SO(3) right Jacobian J_r(r): exp([r + d]x) ~ exp([r]x) exp([J_r d]x).
/// J_r = I - (1 - cos t)/t^2 K + (t - sin t)/t^3 K^2.
pub fn right_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let theta = theta2.sqrt();
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = cross_matrix(r);
    Matrix3::identity() - k * b + k * k * c
}

/// Partial derivatives of R(r) with respect to each axis-angle component:
/// dR/dr_c = R [J_r(r) e_c]x.
pub fn rotation_partials(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let rot = rotation_from_axis_angle(r);
    let jr = right_jacobian(r);
    [0, 1, 2].map(|c| rot * cross_matrix(&Vector3::from(jr.column(c))))
}
