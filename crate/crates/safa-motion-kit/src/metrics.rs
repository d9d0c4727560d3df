//! Image comparison metrics on H x W x C tensors with values nominally in
//! [0, 1]: mean absolute difference, PSNR against a caller-chosen peak,
//! and SSIM with the standard 11 x 11 Gaussian window over valid
//! positions.

use ndarray::Array3;

use crate::error::{Error, Result};

/// PSNR of identical images is infinite; file outputs cap it here so
/// reports stay representable.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dim(format!(
            "image shapes disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::dim("images must be non-empty".to_string()));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_distance(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// 10 log10(peak^2 / mse); peak 1.0 suits [0, 1] images. Returns infinity
/// for identical images; values are not clamped to [0, peak] first.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::arg(format!(
            "psnr peak must be positive and finite, got {peak}"
        )));
    }
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, slot) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *slot = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *slot;
    }
    for slot in g.iter_mut() {
        *slot /= sum;
    }
    g
}

/// Valid-mode separable Gaussian filter of one channel plane.
fn blur_valid(plane: &[Vec<f64>], kernel: &[f64; SSIM_WINDOW]) -> Vec<Vec<f64>> {
    let h = plane.len();
    let w = plane[0].len();
    let wv = w - SSIM_WINDOW + 1;
    let hv = h - SSIM_WINDOW + 1;
    let mut horiz = vec![vec![0.0; wv]; h];
    for i in 0..h {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * plane[i][j + t];
            }
            horiz[i][j] = acc;
        }
    }
    let mut out = vec![vec![0.0; wv]; hv];
    for i in 0..hv {
        for j in 0..wv {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * horiz[i + t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged across channels.
/// Unit dynamic range; both images must be at least the window size.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, channels) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..channels {
        let x: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..w).map(|j| a[[i, j, ch]]).collect())
            .collect();
        let y: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..w).map(|j| b[[i, j, ch]]).collect())
            .collect();
        let xx: Vec<Vec<f64>> = x
            .iter()
            .map(|row| row.iter().map(|v| v * v).collect())
            .collect();
        let yy: Vec<Vec<f64>> = y
            .iter()
            .map(|row| row.iter().map(|v| v * v).collect())
            .collect();
        let xy: Vec<Vec<f64>> = x
            .iter()
            .zip(&y)
            .map(|(rx, ry)| rx.iter().zip(ry).map(|(u, v)| u * v).collect())
            .collect();
        let mx = blur_valid(&x, &kernel);
        let my = blur_valid(&y, &kernel);
        let mxx = blur_valid(&xx, &kernel);
        let myy = blur_valid(&yy, &kernel);
        let mxy = blur_valid(&xy, &kernel);
        let hv = mx.len();
        let wv = mx[0].len();
        let mut acc = 0.0;
        for i in 0..hv {
            for j in 0..wv {
                let mu_x = mx[i][j];
                let mu_y = my[i][j];
                let var_x = mxx[i][j] - mu_x * mu_x;
                let var_y = myy[i][j] - mu_y * mu_y;
                let cov = mxy[i][j] - mu_x * mu_y;
                acc += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                    / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            }
        }
        total += acc / (hv * wv) as f64;
    }
    Ok(total / channels as f64)
}
