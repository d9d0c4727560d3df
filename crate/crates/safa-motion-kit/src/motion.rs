//! Dense motion machinery: keypoint-driven affine motion fields, heatmap
//! differences, mask-weighted fusion, backward warping, and the
//! equivariance discrepancy used to sanity-check keypoint extractors.
//!
//! Motion fields are absolute: `map[i, j]` is the normalized source
//! location that destination pixel (i, j) samples. The identity field is
//! the grid of pixel centers.

use nalgebra::{Matrix2, Vector2};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::camera::{bilinear_sample, AttributeImage};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Determinant magnitude below which a keypoint Jacobian counts as singular.
pub const JACOBIAN_DET_TOL: f64 = 1e-8;
/// Allowed deviation of a per-pixel mask sum from one.
pub const MASK_SUM_TOL: f64 = 1e-6;

/// K keypoints with their local 2x2 motion Jacobians.
#[derive(Clone, Debug)]
pub struct KeypointSet {
    points: Array2<f64>,
    jacobians: Array3<f64>,
}

impl KeypointSet {
    pub fn new(points: Array2<f64>, jacobians: Array3<f64>) -> Result<Self> {
        let k = points.nrows();
        if points.ncols() != 2 {
            return Err(Error::dim(format!(
                "keypoints must be K x 2, got {:?}",
                points.shape()
            )));
        }
        if jacobians.dim() != (k, 2, 2) {
            return Err(Error::dim(format!(
                "jacobians must be {k} x 2 x 2, got {:?}",
                jacobians.shape()
            )));
        }
        if points.iter().chain(jacobians.iter()).any(|x| !x.is_finite()) {
            return Err(Error::arg("non-finite keypoint data".to_string()));
        }
        Ok(KeypointSet { points, jacobians })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.points[[k, 0]], self.points[[k, 1]]]
    }

    pub fn jacobian(&self, k: usize) -> Matrix2<f64> {
        Matrix2::new(
            self.jacobians[[k, 0, 0]],
            self.jacobians[[k, 0, 1]],
            self.jacobians[[k, 1, 0]],
            self.jacobians[[k, 1, 1]],
        )
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn jacobians(&self) -> &Array3<f64> {
        &self.jacobians
    }

    /// Every Jacobian must be comfortably invertible.
    pub fn validate_invertible(&self) -> Result<()> {
        for k in 0..self.len() {
            let det = det2(&self.jacobian(k));
            if det.abs() <= JACOBIAN_DET_TOL {
                return Err(Error::SingularJacobian { index: k, det });
            }
        }
        Ok(())
    }
}

/// Absolute backward-sampling field over an image grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    map: Array3<f64>,
}

impl MotionField {
    pub fn new(map: Array3<f64>) -> Result<Self> {
        let (h, w, c) = map.dim();
        if h == 0 || w == 0 || c != 2 {
            return Err(Error::dim(format!(
                "motion field must be H x W x 2 with H, W >= 1, got {:?}",
                map.shape()
            )));
        }
        if map.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("non-finite motion field".to_string()));
        }
        Ok(MotionField { map })
    }

    /// Field that maps every pixel to its own center.
    pub fn identity(grid: &ImageGrid) -> Self {
        MotionField {
            map: grid.centers(),
        }
    }

    pub fn from_displacement(displacement: &Array3<f64>, grid: &ImageGrid) -> Result<Self> {
        let (h, w, c) = displacement.dim();
        if (h, w) != (grid.height(), grid.width()) || c != 2 {
            return Err(Error::dim(format!(
                "displacement must be {} x {} x 2, got {:?}",
                grid.height(),
                grid.width(),
                displacement.shape()
            )));
        }
        MotionField::new(grid.centers() + displacement)
    }

    pub fn map(&self) -> &Array3<f64> {
        &self.map
    }

    pub fn into_map(self) -> Array3<f64> {
        self.map
    }

    pub fn height(&self) -> usize {
        self.map.len_of(Axis(0))
    }

    pub fn width(&self) -> usize {
        self.map.len_of(Axis(1))
    }

    pub fn grid(&self) -> ImageGrid {
        // Dimensions are at least one by construction.
        ImageGrid::new(self.height(), self.width()).unwrap()
    }

    pub fn displacement(&self) -> Array3<f64> {
        &self.map - &self.grid().centers()
    }
}

/// Per-pixel soft assignment over 2 + K motion channels, ordered
/// (background, rendered 3D motion, affine keypoint motions). Sums to one
/// at every pixel within [`MASK_SUM_TOL`].
#[derive(Clone, Debug)]
pub struct MaskStack {
    masks: Array3<f64>,
}

impl MaskStack {
    pub fn new(masks: Array3<f64>) -> Result<Self> {
        let (c, h, w) = masks.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "mask stack must be C x H x W with all dims >= 1, got {:?}",
                masks.shape()
            )));
        }
        for value in masks.iter() {
            if !value.is_finite() || *value < -1e-9 || *value > 1.0 + 1e-9 {
                return Err(Error::arg(format!("mask value {value} outside [0, 1]")));
            }
        }
        for i in 0..h {
            for j in 0..w {
                let sum: f64 = (0..c).map(|ch| masks[[ch, i, j]]).sum();
                if (sum - 1.0).abs() > MASK_SUM_TOL {
                    return Err(Error::MaskSum {
                        row: i,
                        col: j,
                        sum,
                    });
                }
            }
        }
        Ok(MaskStack { masks })
    }

    pub fn n_channels(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.masks.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.masks.len_of(Axis(2))
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.masks.index_axis(Axis(0), c)
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.masks
    }
}

/// Soft visibility in [0, 1]; 1 means visible to the warp, 0 occluded.
#[derive(Clone, Debug)]
pub struct OcclusionMap {
    values: Array2<f64>,
}

impl OcclusionMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::dim("occlusion map must be non-empty".to_string()));
        }
        for ((i, j), value) in values.indexed_iter() {
            if !value.is_finite() || *value < 0.0 || *value > 1.0 {
                return Err(Error::OcclusionRange {
                    row: i,
                    col: j,
                    value: *value,
                });
            }
        }
        Ok(OcclusionMap { values })
    }

    pub fn full(grid: &ImageGrid, value: f64) -> Result<Self> {
        OcclusionMap::new(Array2::from_elem((grid.height(), grid.width()), value))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

fn det2(m: &Matrix2<f64>) -> f64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

fn invert2(m: &Matrix2<f64>, tol: f64) -> Result<Matrix2<f64>> {
    let det = det2(m);
    if !det.is_finite() || det.abs() <= tol {
        return Err(Error::SingularTransform { det });
    }
    Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// First-order keypoint motion T(z) = p_S + J_S J_D^-1 (z - p_D) sampled at
/// every pixel center.
pub fn affine_motion(
    p_source: [f64; 2],
    j_source: &Matrix2<f64>,
    p_driving: [f64; 2],
    j_driving: &Matrix2<f64>,
    grid: &ImageGrid,
) -> Result<MotionField> {
    let a = j_source * invert2(j_driving, JACOBIAN_DET_TOL)?;
    let (h, w) = (grid.height(), grid.width());
    let mut map = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let [x, y] = grid.pixel_center(i, j);
            let dx = x - p_driving[0];
            let dy = y - p_driving[1];
            map[[i, j, 0]] = p_source[0] + a[(0, 0)] * dx + a[(0, 1)] * dy;
            map[[i, j, 1]] = p_source[1] + a[(1, 0)] * dx + a[(1, 1)] * dy;
        }
    }
    MotionField::new(map)
}

/// [`affine_motion`] for keypoint k of a source/driving pair; a singular
/// driving Jacobian names the offending keypoint.
pub fn keypoint_affine_motion(
    source: &KeypointSet,
    driving: &KeypointSet,
    k: usize,
    grid: &ImageGrid,
) -> Result<MotionField> {
    if k >= source.len() || source.len() != driving.len() {
        return Err(Error::dim(format!(
            "keypoint index {k} out of range for sets of {} / {} keypoints",
            source.len(),
            driving.len()
        )));
    }
    affine_motion(
        source.point(k),
        &source.jacobian(k),
        driving.point(k),
        &driving.jacobian(k),
        grid,
    )
    .map_err(|e| match e {
        Error::SingularTransform { det } => Error::SingularJacobian { index: k, det },
        other => other,
    })
}

/// One affine field per keypoint.
pub fn all_affine_motions(
    source: &KeypointSet,
    driving: &KeypointSet,
    grid: &ImageGrid,
) -> Result<Vec<MotionField>> {
    if source.len() != driving.len() {
        return Err(Error::dim(format!(
            "keypoint sets disagree: {} vs {}",
            source.len(),
            driving.len()
        )));
    }
    (0..source.len())
        .map(|k| keypoint_affine_motion(source, driving, k, grid))
        .collect()
}

/// Difference of Gaussians centered on the driving and source keypoints:
/// exp(-|p_D - z|^2 / 2 sigma) - exp(-|p_S - z|^2 / 2 sigma). `sigma`
/// scales the squared distance directly, so it plays the role of a
/// variance.
pub fn gaussian_heatmap_diff(
    p_source: [f64; 2],
    p_driving: [f64; 2],
    sigma: f64,
    grid: &ImageGrid,
) -> Result<Array2<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!(
            "heatmap sigma must be positive and finite, got {sigma}"
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let [x, y] = grid.pixel_center(i, j);
            let dd = (p_driving[0] - x).powi(2) + (p_driving[1] - y).powi(2);
            let ds = (p_source[0] - x).powi(2) + (p_source[1] - y).powi(2);
            out[[i, j]] = (-dd / (2.0 * sigma)).exp() - (-ds / (2.0 * sigma)).exp();
        }
    }
    Ok(out)
}

/// Difference of the z channels of two rendered normal maps
/// (driving minus source), the heatmap analogue for the rendered 3D motion.
pub fn normal_z_heatmap(
    driving: &AttributeImage,
    source: &AttributeImage,
) -> Result<Array2<f64>> {
    if driving.attribute_dim() < 3 || source.attribute_dim() < 3 {
        return Err(Error::dim(
            "normal maps need at least 3 attribute channels".to_string(),
        ));
    }
    if (driving.height(), driving.width()) != (source.height(), source.width()) {
        return Err(Error::dim(format!(
            "normal map sizes disagree: {}x{} vs {}x{}",
            driving.height(),
            driving.width(),
            source.height(),
            source.width()
        )));
    }
    let d = driving.data.index_axis(Axis(2), 2);
    let s = source.data.index_axis(Axis(2), 2);
    Ok(&d - &s)
}

/// Per-pixel softmax over the channel axis of raw logits, with the usual
/// max subtraction so large logits cannot overflow.
pub fn softmax_masks(logits: &Array3<f64>) -> Result<MaskStack> {
    let (c, h, w) = logits.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "logits must be C x H x W with all dims >= 1, got {:?}",
            logits.shape()
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("non-finite mask logits".to_string()));
    }
    let mut masks = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let max = (0..c)
                .map(|ch| logits[[ch, i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (logits[[ch, i, j]] - max).exp();
                masks[[ch, i, j]] = e;
                total += e;
            }
            for ch in 0..c {
                masks[[ch, i, j]] /= total;
            }
        }
    }
    MaskStack::new(masks)
}

/// Mask-weighted combination of the identity field, the rendered 3D motion,
/// and the K affine fields. Mask channel order is (background, 3D motion,
/// affine 0..K).
pub fn fuse_dense_motion(
    masks: &MaskStack,
    motion_3d: &MotionField,
    affine: &[MotionField],
    grid: &ImageGrid,
) -> Result<MotionField> {
    let (h, w) = (grid.height(), grid.width());
    if masks.n_channels() != 2 + affine.len() {
        return Err(Error::dim(format!(
            "mask stack has {} channels but 2 + {} motions were supplied",
            masks.n_channels(),
            affine.len()
        )));
    }
    if (masks.height(), masks.width()) != (h, w)
        || (motion_3d.height(), motion_3d.width()) != (h, w)
        || affine
            .iter()
            .any(|f| (f.height(), f.width()) != (h, w))
    {
        return Err(Error::dim(
            "mask and motion field sizes must all match the grid".to_string(),
        ));
    }
    let mut map = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let [x, y] = grid.pixel_center(i, j);
            for (c, z) in [(0, x), (1, y)] {
                let mut acc = masks.as_array()[[0, i, j]] * z
                    + masks.as_array()[[1, i, j]] * motion_3d.map()[[i, j, c]];
                for (k, field) in affine.iter().enumerate() {
                    acc += masks.as_array()[[2 + k, i, j]] * field.map()[[i, j, c]];
                }
                map[[i, j, c]] = acc;
            }
        }
    }
    MotionField::new(map)
}

/// Backward-warp an image through a motion field with bilinear sampling and
/// border clamping. The identity field reproduces the input bit for bit.
pub fn warp(source: &Array3<f64>, field: &MotionField) -> Result<Array3<f64>> {
    let (h, w, c) = source.dim();
    if c == 0 {
        return Err(Error::dim("cannot warp an image with 0 channels".to_string()));
    }
    if (field.height(), field.width()) != (h, w) {
        return Err(Error::dim(format!(
            "field size {}x{} does not match image {h}x{w}",
            field.height(),
            field.width()
        )));
    }
    let view = source.view();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; w * c];
            for j in 0..w {
                bilinear_sample(
                    &view,
                    field.map()[[i, j, 0]],
                    field.map()[[i, j, 1]],
                    &mut row[j * c..(j + 1) * c],
                );
            }
            row
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array3::from_shape_vec((h, w, c), flat).expect("shape is consistent by construction"))
}

/// Invertible 2D affine map z -> A z + b.
#[derive(Clone, Copy, Debug)]
pub struct AffineTransform2 {
    pub linear: Matrix2<f64>,
    pub offset: Vector2<f64>,
}

impl AffineTransform2 {
    pub fn identity() -> Self {
        AffineTransform2 {
            linear: Matrix2::identity(),
            offset: Vector2::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.linear * Vector2::new(p[0], p[1]) + self.offset;
        [q.x, q.y]
    }

    pub fn inverse(&self) -> Result<AffineTransform2> {
        let inv = invert2(&self.linear, 1e-12)?;
        Ok(AffineTransform2 {
            linear: inv,
            offset: -(inv * self.offset),
        })
    }
}

/// Mean deviations from keypoint equivariance under a known deformation:
/// the deformed keypoints pulled back through the transform should land on
/// the originals, and optionally the pulled-back Jacobians should match.
#[derive(Clone, Copy, Debug)]
pub struct EquivarianceLoss {
    pub keypoints: f64,
    pub jacobians: Option<f64>,
}

pub fn equivariance_loss(
    original: &KeypointSet,
    deformed: &KeypointSet,
    transform: &AffineTransform2,
    include_jacobians: bool,
) -> Result<EquivarianceLoss> {
    let k = original.len();
    if k != deformed.len() {
        return Err(Error::dim(format!(
            "keypoint sets disagree: {k} vs {}",
            deformed.len()
        )));
    }
    if k == 0 {
        return Err(Error::arg(
            "equivariance loss needs at least one keypoint".to_string(),
        ));
    }
    let inv = transform.inverse()?;
    let mut kp_loss = 0.0;
    let mut jac_loss = 0.0;
    for idx in 0..k {
        let pulled = inv.apply(deformed.point(idx));
        let p = original.point(idx);
        kp_loss += (p[0] - pulled[0]).abs() + (p[1] - pulled[1]).abs();
        if include_jacobians {
            let diff = original.jacobian(idx) - inv.linear * deformed.jacobian(idx);
            jac_loss += diff.iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    Ok(EquivarianceLoss {
        keypoints: kp_loss / k as f64,
        jacobians: include_jacobians.then_some(jac_loss / k as f64),
    })
}
