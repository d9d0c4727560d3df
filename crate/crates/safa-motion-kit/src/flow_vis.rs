//! Flow-field visualization with the 55-entry Middlebury color wheel.
//! Hue encodes direction, saturation encodes magnitude: zero flow is
//! white, and a normalized magnitude of one reaches the fully saturated
//! wheel color. Every wheel color (and every blend of adjacent entries)
//! has one channel at zero, so the magnitude of an encoded pixel can be
//! read back as one minus its smallest channel.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::motion::MotionField;

const SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    // (count, start color, end color): linear ramps between the primaries.
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), // red to yellow
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),  // yellow to green
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),  // green to cyan
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]), // cyan to blue
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]), // blue to magenta
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),  // magenta to red
];

pub const WHEEL_SIZE: usize = 55;

/// The color wheel rows, values in [0, 1].
pub fn color_wheel() -> Array2<f64> {
    let mut wheel = Array2::zeros((WHEEL_SIZE, 3));
    let mut row = 0;
    for (count, start, end) in SEGMENTS {
        for i in 0..count {
            let f = i as f64 / count as f64;
            for c in 0..3 {
                wheel[[row, c]] = start[c] + f * (end[c] - start[c]);
            }
            row += 1;
        }
    }
    debug_assert_eq!(row, WHEEL_SIZE);
    wheel
}

/// Color for one flow vector whose magnitude has already been normalized;
/// radii above one are marked by darkening the raw wheel color.
pub fn flow_color(u: f64, v: f64) -> [f64; 3] {
    let wheel = color_wheel();
    flow_color_with(&wheel, u, v)
}

fn flow_color_with(wheel: &Array2<f64>, u: f64, v: f64) -> [f64; 3] {
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (WHEEL_SIZE - 1) as f64;
    let k0 = (fk.floor() as usize) % WHEEL_SIZE;
    let k1 = (k0 + 1) % WHEEL_SIZE;
    let f = fk - fk.floor();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[[k0, c]] + f * wheel[[k1, c]];
        out[c] = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
    }
    out
}

/// Colorize an H x W x 2 displacement. Magnitudes are normalized by
/// `max_magnitude` when given, otherwise by the largest magnitude present
/// (floored to avoid dividing by zero on all-zero fields).
pub fn colorize_displacement(
    displacement: &Array3<f64>,
    max_magnitude: Option<f64>,
) -> Result<Array3<f64>> {
    let (h, w, c) = displacement.dim();
    if c != 2 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "displacement must be H x W x 2, got {:?}",
            displacement.shape()
        )));
    }
    let max = match max_magnitude {
        Some(m) => {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::arg(format!(
                    "max magnitude must be positive and finite, got {m}"
                )));
            }
            m
        }
        None => {
            let mut m = 0.0f64;
            for i in 0..h {
                for j in 0..w {
                    let u = displacement[[i, j, 0]];
                    let v = displacement[[i, j, 1]];
                    m = m.max((u * u + v * v).sqrt());
                }
            }
            m.max(1e-9)
        }
    };
    let wheel = color_wheel();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let col = flow_color_with(
                &wheel,
                displacement[[i, j, 0]] / max,
                displacement[[i, j, 1]] / max,
            );
            for ch in 0..3 {
                out[[i, j, ch]] = col[ch];
            }
        }
    }
    Ok(out)
}

/// Colorize the displacement part of a motion field.
pub fn visualize_flow(field: &MotionField, max_magnitude: Option<f64>) -> Result<Array3<f64>> {
    colorize_displacement(&field.displacement(), max_magnitude)
}
