//! Occlusion-aware feature recombination: geometry-adaptive denormalization
//! of warped features and patch-based contextual attention that borrows
//! visible structure to fill occluded regions.
//!
//! Feature tensors are H x W x C, matching the image layout used elsewhere.
//! Occlusion maps use 1 for visible and 0 for occluded throughout.

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{MorphableModel, ParamSet};
use crate::motion::OcclusionMap;

/// Average parameter norms used to balance the normalized vector; fixed
/// statistics shipped with the modulation weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvgNorms {
    pub shape: f64,
    pub expression: f64,
    pub scale: f64,
}

impl AvgNorms {
    pub fn unit() -> Self {
        AvgNorms {
            shape: 1.0,
            expression: 1.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("shape", self.shape),
            ("expression", self.expression),
            ("scale", self.scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::arg(format!(
                    "average {name} norm must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Length of the normalized parameter vector for a model:
/// shape + expression + pose + scale + 2D translation.
pub fn normalized_dim(model: &MorphableModel) -> usize {
    model.shape_dim() + model.expr_dim() + model.pose_dim() + 3
}

/// Flatten parameters into the conditioning vector (alpha, beta, theta, s,
/// t) with shape, expression, and scale divided by their average norms.
pub fn normalize_params(params: &ParamSet, norms: &AvgNorms) -> Result<Array1<f64>> {
    norms.validate()?;
    let na = params.shape.len();
    let nb = params.expression.len();
    let np = params.pose.len();
    let mut v = Array1::zeros(na + nb + np + 3);
    for (i, a) in params.shape.iter().enumerate() {
        v[i] = a / norms.shape;
    }
    for (i, b) in params.expression.iter().enumerate() {
        v[na + i] = b / norms.expression;
    }
    for (i, t) in params.pose.iter().enumerate() {
        v[na + nb + i] = *t;
    }
    v[na + nb + np] = params.camera_scale / norms.scale;
    v[na + nb + np + 1] = params.camera_translation[0];
    v[na + nb + np + 2] = params.camera_translation[1];
    Ok(v)
}

/// Affine per-channel modulation weights: gamma = W_g v + b_g and
/// delta = W_d v + b_d over the normalized parameter vector v.
#[derive(Clone, Debug)]
pub struct GadeWeights {
    pub w_gamma: Array2<f64>,
    pub b_gamma: Array1<f64>,
    pub w_delta: Array2<f64>,
    pub b_delta: Array1<f64>,
    pub avg_norms: AvgNorms,
}

impl GadeWeights {
    /// Weights that make the denormalized features equal the input:
    /// gamma = 1 and delta = 0 for every parameter vector.
    pub fn identity(channels: usize, param_dim: usize) -> Self {
        GadeWeights {
            w_gamma: Array2::zeros((channels, param_dim)),
            b_gamma: Array1::ones(channels),
            w_delta: Array2::zeros((channels, param_dim)),
            b_delta: Array1::zeros(channels),
            avg_norms: AvgNorms::unit(),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_gamma.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.w_gamma.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.avg_norms.validate()?;
        let (c, d) = self.w_gamma.dim();
        if self.w_delta.dim() != (c, d) {
            return Err(Error::dim(format!(
                "w_delta shape {:?} does not match w_gamma {:?}",
                self.w_delta.shape(),
                self.w_gamma.shape()
            )));
        }
        if self.b_gamma.len() != c || self.b_delta.len() != c {
            return Err(Error::dim(format!(
                "bias lengths {} / {} do not match {c} channels",
                self.b_gamma.len(),
                self.b_delta.len()
            )));
        }
        let finite = self
            .w_gamma
            .iter()
            .chain(self.w_delta.iter())
            .chain(self.b_gamma.iter())
            .chain(self.b_delta.iter())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::arg("non-finite modulation weights".to_string()));
        }
        Ok(())
    }
}

/// Per-channel (gamma, delta) for one parameter vector.
pub fn gade_modulation(
    weights: &GadeWeights,
    normalized: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    weights.validate()?;
    if normalized.len() != weights.param_dim() {
        return Err(Error::dim(format!(
            "normalized vector length {} does not match weight columns {}",
            normalized.len(),
            weights.param_dim()
        )));
    }
    let gamma = weights.w_gamma.dot(normalized) + &weights.b_gamma;
    let delta = weights.w_delta.dot(normalized) + &weights.b_delta;
    Ok((gamma, delta))
}

/// Occlusion-gated denormalization: visible pixels keep the warped feature,
/// occluded pixels take the modulated one.
/// F_out = O * F + (1 - O) * (gamma * F + delta), all per channel.
pub fn gade_apply(
    features: &Array3<f64>,
    gamma: &Array1<f64>,
    delta: &Array1<f64>,
    occlusion: &OcclusionMap,
) -> Result<Array3<f64>> {
    let (h, w, c) = features.dim();
    if gamma.len() != c || delta.len() != c {
        return Err(Error::dim(format!(
            "modulation has {} / {} channels but features have {c}",
            gamma.len(),
            delta.len()
        )));
    }
    if (occlusion.height(), occlusion.width()) != (h, w) {
        return Err(Error::dim(format!(
            "occlusion map {}x{} does not match features {h}x{w}",
            occlusion.height(),
            occlusion.width()
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let o = occlusion.values()[[i, j]];
            for ch in 0..c {
                let f = features[[i, j, ch]];
                let modulated = gamma[ch] * f + delta[ch];
                out[[i, j, ch]] = o * f + (1.0 - o) * modulated;
            }
        }
    }
    Ok(out)
}

/// Patches of a feature tensor flattened row-major (row, column, channel),
/// with their top-left positions.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub data: Array2<f64>,
    pub positions: Vec<(usize, usize)>,
    pub patch: usize,
}

pub fn extract_patches(features: &Array3<f64>, patch: usize, stride: usize) -> Result<PatchSet> {
    let (h, w, c) = features.dim();
    if patch == 0 || stride == 0 {
        return Err(Error::arg(format!(
            "patch size and stride must be positive, got {patch} / {stride}"
        )));
    }
    if patch > h || patch > w {
        return Err(Error::dim(format!(
            "patch size {patch} exceeds feature extent {h}x{w}"
        )));
    }
    let mut positions = Vec::new();
    for r in (0..=h - patch).step_by(stride) {
        for col in (0..=w - patch).step_by(stride) {
            positions.push((r, col));
        }
    }
    let dim = patch * patch * c;
    let mut data = Array2::zeros((positions.len(), dim));
    for (n, &(r, col)) in positions.iter().enumerate() {
        let mut k = 0;
        for dr in 0..patch {
            for dc in 0..patch {
                for ch in 0..c {
                    data[[n, k]] = features[[r + dr, col + dc, ch]];
                    k += 1;
                }
            }
        }
    }
    Ok(PatchSet {
        data,
        positions,
        patch,
    })
}

/// Attention output plus whether the visibility-weighted softmax had to
/// fall back to the input because every patch weight was zero.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub features: Array3<f64>,
    pub fallback: bool,
}

const NCC_NORM_FLOOR: f64 = 1e-12;

/// Contextual attention over stride-1 patches. Every query patch is
/// rebuilt as a visibility-weighted softmax combination of all patches,
/// scored by normalized cross-correlation scaled by `scale`; patch
/// visibility is the mean occlusion value over its window, and zero-weight
/// patches are excluded from the softmax exactly rather than multiplied
/// away. Overlapping reconstructions are averaged, and the final output
/// keeps visible pixels from the input:
/// F_out = O * F + (1 - O) * attention(F).
pub fn contextual_attention(
    features: &Array3<f64>,
    occlusion: &OcclusionMap,
    patch: usize,
    scale: f64,
) -> Result<AttentionOutput> {
    let (h, w, c) = features.dim();
    if (occlusion.height(), occlusion.width()) != (h, w) {
        return Err(Error::dim(format!(
            "occlusion map {}x{} does not match features {h}x{w}",
            occlusion.height(),
            occlusion.width()
        )));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!(
            "attention scale must be positive and finite, got {scale}"
        )));
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("non-finite features".to_string()));
    }
    let patches = extract_patches(features, patch, 1)?;
    let n = patches.positions.len();
    let dim = patch * patch * c;

    let mut visibility = vec![0.0f64; n];
    let mut norms = vec![0.0f64; n];
    for (idx, &(r, col)) in patches.positions.iter().enumerate() {
        let mut vis = 0.0;
        for dr in 0..patch {
            for dc in 0..patch {
                vis += occlusion.values()[[r + dr, col + dc]];
            }
        }
        visibility[idx] = vis / (patch * patch) as f64;
        norms[idx] = patches.data.row(idx).dot(&patches.data.row(idx)).sqrt();
    }
    if visibility.iter().all(|&m| m == 0.0) {
        return Ok(AttentionOutput {
            features: features.clone(),
            fallback: true,
        });
    }
    let visible: Vec<usize> = (0..n).filter(|&idx| visibility[idx] > 0.0).collect();

    // Reconstruct every query patch from the visible bank.
    let recon: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let qrow = patches.data.row(q);
            let qnorm = norms[q].max(NCC_NORM_FLOOR);
            let mut logits = Vec::with_capacity(visible.len());
            let mut max_logit = f64::NEG_INFINITY;
            for &b in &visible {
                let ncc = qrow.dot(&patches.data.row(b)) / (qnorm * norms[b].max(NCC_NORM_FLOOR));
                let logit = scale * ncc;
                max_logit = max_logit.max(logit);
                logits.push(logit);
            }
            let mut out = vec![0.0; dim];
            let mut denom = 0.0;
            for (&b, &logit) in visible.iter().zip(&logits) {
                let a = visibility[b] * (logit - max_logit).exp();
                denom += a;
                let brow = patches.data.row(b);
                for (slot, v) in out.iter_mut().zip(brow.iter()) {
                    *slot += a * v;
                }
            }
            for slot in out.iter_mut() {
                *slot /= denom;
            }
            out
        })
        .collect();

    let mut canvas = Array3::<f64>::zeros((h, w, c));
    let mut counts = Array2::<f64>::zeros((h, w));
    for (idx, &(r, col)) in patches.positions.iter().enumerate() {
        let mut k = 0;
        for dr in 0..patch {
            for dc in 0..patch {
                counts[[r + dr, col + dc]] += 1.0;
                for ch in 0..c {
                    canvas[[r + dr, col + dc, ch]] += recon[idx][k];
                    k += 1;
                }
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let o = occlusion.values()[[i, j]];
            for ch in 0..c {
                let rebuilt = canvas[[i, j, ch]] / counts[[i, j]];
                out[[i, j, ch]] = o * features[[i, j, ch]] + (1.0 - o) * rebuilt;
            }
        }
    }
    Ok(AttentionOutput {
        features: out,
        fallback: false,
    })
}

/// Channel concatenation of two aligned feature tensors, the join between
/// the attention branch and the plain decoding branch.
pub fn channel_concat(a: &Array3<f64>, b: &Array3<f64>) -> Result<Array3<f64>> {
    let (ha, wa, _) = a.dim();
    let (hb, wb, _) = b.dim();
    if (ha, wa) != (hb, wb) {
        return Err(Error::dim(format!(
            "cannot concatenate {ha}x{wa} with {hb}x{wb} features"
        )));
    }
    Ok(ndarray::concatenate![Axis(2), a.view(), b.view()])
}
