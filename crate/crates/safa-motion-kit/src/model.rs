//! Morphable head model: blendshape decoding, linear blend skinning,
//! landmark and normal queries, and deterministic toy-model generators.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::rotation_from_axis_angle;

/// Tolerance for the stochastic-row invariants (blendweights, joint
/// regressor, barycentric weights).
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Articulated linear face model.
///
/// Joint 0 is the root and carries the global rotation; every other joint has
/// a parent with a smaller index. `pose_corrective_basis`, when present, is
/// driven by the flattened `R(theta_j) - I` deviations of the non-root
/// joints, so its last axis has length `9 * (n_joints - 1)`.
#[derive(Clone, Debug)]
pub struct MorphableModel {
    pub template: Array2<f64>,
    pub faces: Array2<u32>,
    pub shape_basis: Array3<f64>,
    pub expr_basis: Array3<f64>,
    pub pose_corrective_basis: Option<Array3<f64>>,
    pub joint_regressor: Array2<f64>,
    pub blendweights: Array2<f64>,
    pub kinematic_parents: Vec<Option<usize>>,
    pub landmark_faces: Vec<u32>,
    pub landmark_bary: Array2<f64>,
    pub uv_face_mask: Vec<bool>,
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.template.nrows()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.nrows()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_regressor.nrows()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_basis.len_of(Axis(2))
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_basis.len_of(Axis(2))
    }

    /// Length of the pose vector: three rotation components per joint,
    /// including the root.
    pub fn pose_dim(&self) -> usize {
        3 * self.n_joints()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmark_faces.len()
    }

    /// Check every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        let f = self.n_faces();
        let k = self.n_joints();

        if self.template.ncols() != 3 {
            return Err(Error::ModelFormat {
                field: "template",
                detail: format!("expected v x 3, got {:?}", self.template.shape()),
            });
        }
        if self.faces.ncols() != 3 {
            return Err(Error::ModelFormat {
                field: "faces",
                detail: format!("expected f x 3, got {:?}", self.faces.shape()),
            });
        }
        for (i, row) in self.faces.outer_iter().enumerate() {
            for &idx in row {
                if idx as usize >= v {
                    return Err(Error::ModelFormat {
                        field: "faces",
                        detail: format!("face {i} references vertex {idx} but v = {v}"),
                    });
                }
            }
        }
        for (name, basis) in [("shapedirs", &self.shape_basis), ("exprdirs", &self.expr_basis)] {
            if basis.shape()[0] != v || basis.shape()[1] != 3 {
                return Err(Error::ModelFormat {
                    field: if name == "shapedirs" { "shapedirs" } else { "exprdirs" },
                    detail: format!("expected {v} x 3 x n, got {:?}", basis.shape()),
                });
            }
        }
        if let Some(basis) = &self.pose_corrective_basis {
            let want = 9 * (k - 1);
            if basis.shape()[0] != v || basis.shape()[1] != 3 || basis.shape()[2] != want {
                return Err(Error::ModelFormat {
                    field: "posedirs",
                    detail: format!("expected {v} x 3 x {want}, got {:?}", basis.shape()),
                });
            }
        }
        if self.joint_regressor.ncols() != v {
            return Err(Error::ModelFormat {
                field: "J_regressor",
                detail: format!("expected {k} x {v}, got {:?}", self.joint_regressor.shape()),
            });
        }
        for (j, row) in self.joint_regressor.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::ModelFormat {
                    field: "J_regressor",
                    detail: format!("row {j} is not stochastic (sums to {sum})"),
                });
            }
        }
        if self.blendweights.shape() != [v, k] {
            return Err(Error::ModelFormat {
                field: "blendweights",
                detail: format!("expected {v} x {k}, got {:?}", self.blendweights.shape()),
            });
        }
        for (i, row) in self.blendweights.outer_iter().enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if w < -1e-9 {
                    return Err(Error::ModelFormat {
                        field: "blendweights",
                        detail: format!("negative weight {w} at vertex {i}"),
                    });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::ModelFormat {
                    field: "blendweights",
                    detail: format!("row {i} sums to {sum}"),
                });
            }
        }
        if self.kinematic_parents.len() != k {
            return Err(Error::ModelFormat {
                field: "parents",
                detail: format!("expected {k} entries, got {}", self.kinematic_parents.len()),
            });
        }
        if k > 0 && self.kinematic_parents[0].is_some() {
            return Err(Error::ModelFormat {
                field: "parents",
                detail: "joint 0 must be the root (parent -1)".to_string(),
            });
        }
        for (j, parent) in self.kinematic_parents.iter().enumerate().skip(1) {
            match parent {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::ModelFormat {
                        field: "parents",
                        detail: format!("joint {j} has parent {p}, expected a smaller index"),
                    });
                }
                None => {
                    return Err(Error::ModelFormat {
                        field: "parents",
                        detail: format!("joint {j} is a second root; only joint 0 may be"),
                    });
                }
            }
        }
        let l = self.landmark_faces.len();
        if self.landmark_bary.shape() != [l, 3] {
            return Err(Error::ModelFormat {
                field: "landmark_bary",
                detail: format!("expected {l} x 3, got {:?}", self.landmark_bary.shape()),
            });
        }
        for (i, &fi) in self.landmark_faces.iter().enumerate() {
            if fi as usize >= f {
                return Err(Error::ModelFormat {
                    field: "landmark_faces",
                    detail: format!("landmark {i} references face {fi} but f = {f}"),
                });
            }
        }
        for (i, row) in self.landmark_bary.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::ModelFormat {
                    field: "landmark_bary",
                    detail: format!("row {i} sums to {sum}"),
                });
            }
        }
        if self.uv_face_mask.len() != f {
            return Err(Error::ModelFormat {
                field: "uv_face_mask",
                detail: format!("expected {f} entries, got {}", self.uv_face_mask.len()),
            });
        }
        Ok(())
    }
}

// ────────────────────────────────────────────────────────────────────────────
// Parameters

/// All parameters describing one image: shape, expression, pose, and the
/// weak-perspective camera (scale, translation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamSetRepr", into = "ParamSetRepr")]
pub struct ParamSet {
    pub shape: Array1<f64>,
    pub expression: Array1<f64>,
    /// Axis-angle per joint, root first; length 3 * n_joints.
    pub pose: Array1<f64>,
    pub camera_scale: f64,
    pub camera_translation: [f64; 2],
}

/// Plain-vector mirror of [`ParamSet`] for JSON round trips.
#[derive(Serialize, Deserialize)]
struct ParamSetRepr {
    shape: Vec<f64>,
    expression: Vec<f64>,
    pose: Vec<f64>,
    camera_scale: f64,
    camera_translation: [f64; 2],
}

impl From<ParamSetRepr> for ParamSet {
    fn from(r: ParamSetRepr) -> Self {
        ParamSet {
            shape: Array1::from(r.shape),
            expression: Array1::from(r.expression),
            pose: Array1::from(r.pose),
            camera_scale: r.camera_scale,
            camera_translation: r.camera_translation,
        }
    }
}

impl From<ParamSet> for ParamSetRepr {
    fn from(p: ParamSet) -> Self {
        ParamSetRepr {
            shape: p.shape.to_vec(),
            expression: p.expression.to_vec(),
            pose: p.pose.to_vec(),
            camera_scale: p.camera_scale,
            camera_translation: p.camera_translation,
        }
    }
}

impl ParamSet {
    /// Neutral parameters (zero coefficients, identity camera).
    pub fn neutral(shape_dim: usize, expr_dim: usize, n_joints: usize) -> Self {
        ParamSet {
            shape: Array1::zeros(shape_dim),
            expression: Array1::zeros(expr_dim),
            pose: Array1::zeros(3 * n_joints),
            camera_scale: 1.0,
            camera_translation: [0.0, 0.0],
        }
    }

    pub fn neutral_for(model: &MorphableModel) -> Self {
        Self::neutral(model.shape_dim(), model.expr_dim(), model.n_joints())
    }

    pub fn validate_for(&self, model: &MorphableModel) -> Result<()> {
        if self.shape.len() != model.shape_dim() {
            return Err(Error::dim(format!(
                "shape coefficients: expected {}, got {}",
                model.shape_dim(),
                self.shape.len()
            )));
        }
        if self.expression.len() != model.expr_dim() {
            return Err(Error::dim(format!(
                "expression coefficients: expected {}, got {}",
                model.expr_dim(),
                self.expression.len()
            )));
        }
        if self.pose.len() != model.pose_dim() {
            return Err(Error::dim(format!(
                "pose vector: expected {}, got {}",
                model.pose_dim(),
                self.pose.len()
            )));
        }
        if !(self.camera_scale > 0.0) || !self.camera_scale.is_finite() {
            return Err(Error::arg(format!(
                "camera_scale must be positive and finite, got {}",
                self.camera_scale
            )));
        }
        let finite = self.shape.iter().all(|x| x.is_finite())
            && self.expression.iter().all(|x| x.is_finite())
            && self.pose.iter().all(|x| x.is_finite())
            && self.camera_translation.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::arg("non-finite parameter value".to_string()));
        }
        Ok(())
    }

    /// Axis-angle of one joint (root is joint 0).
    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        Vector3::new(
            self.pose[3 * joint],
            self.pose[3 * joint + 1],
            self.pose[3 * joint + 2],
        )
    }
}

/// Posed mesh produced by [`decode`].
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Array2<f64>,
    pub faces: Array2<u32>,
}

// ────────────────────────────────────────────────────────────────────────────
// Decoding

pub(crate) fn add_blendshapes(
    base: &Array2<f64>,
    basis: &Array3<f64>,
    coeffs: ArrayView1<f64>,
) -> Array2<f64> {
    let mut out = base.clone();
    for (a, &c) in coeffs.iter().enumerate() {
        // Skipping zero coefficients keeps neutral decoding bitwise equal to
        // the template.
        if c != 0.0 {
            out.scaled_add(c, &basis.index_axis(Axis(2), a));
        }
    }
    out
}

/// Flattened `R_j - I` for the non-root joints, row-major per joint.
pub(crate) fn pose_feature(rotations: &[Matrix3<f64>]) -> Array1<f64> {
    let k = rotations.len();
    let mut feature = Array1::zeros(9 * k.saturating_sub(1));
    for (j, rot) in rotations.iter().enumerate().skip(1) {
        let dev = rot - Matrix3::identity();
        for r in 0..3 {
            for c in 0..3 {
                feature[9 * (j - 1) + 3 * r + c] = dev[(r, c)];
            }
        }
    }
    feature
}

/// Per-joint world transforms `x -> A_j x + c_j` for the given local
/// rotations and rest-pose joint locations.
pub(crate) fn chain_transforms(
    parents: &[Option<usize>],
    rotations: &[Matrix3<f64>],
    joints: &[Vector3<f64>],
) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    let k = parents.len();
    let mut linear = vec![Matrix3::identity(); k];
    let mut origin = vec![Vector3::zeros(); k];
    for j in 0..k {
        match parents[j] {
            None => {
                linear[j] = rotations[j];
                origin[j] = joints[j];
            }
            Some(p) => {
                linear[j] = linear[p] * rotations[j];
                origin[j] = origin[p] + linear[p] * (joints[j] - joints[p]);
            }
        }
    }
    let offset: Vec<Vector3<f64>> = (0..k).map(|j| origin[j] - linear[j] * joints[j]).collect();
    (linear, offset)
}

pub(crate) fn regress_from(model: &MorphableModel, shaped: &Array2<f64>) -> Vec<Vector3<f64>> {
    let j = model.joint_regressor.dot(shaped);
    (0..model.n_joints())
        .map(|r| Vector3::new(j[[r, 0]], j[[r, 1]], j[[r, 2]]))
        .collect()
}

/// Decode parameters into a posed mesh: blendshapes, pose correctives, then
/// linear blend skinning about the regressed joints.
pub fn decode(model: &MorphableModel, params: &ParamSet) -> Result<Mesh> {
    params.validate_for(model)?;
    let shaped_alpha = add_blendshapes(&model.template, &model.shape_basis, params.shape.view());
    let mut shaped = add_blendshapes(&shaped_alpha, &model.expr_basis, params.expression.view());

    // At exactly zero pose, skinning and correctives are the identity by
    // construction; returning early keeps the neutral decode bitwise exact.
    if params.pose.iter().all(|&c| c == 0.0) {
        return Ok(Mesh {
            vertices: shaped,
            faces: model.faces.clone(),
        });
    }

    let k = model.n_joints();
    let rotations: Vec<Matrix3<f64>> = (0..k)
        .map(|j| rotation_from_axis_angle(&params.joint_rotation(j)))
        .collect();

    if let Some(basis) = &model.pose_corrective_basis {
        let feature = pose_feature(&rotations);
        shaped = add_blendshapes(&shaped, basis, feature.view());
    }

    let joints = regress_from(model, &shaped_alpha);
    let (linear, offset) = chain_transforms(&model.kinematic_parents, &rotations, &joints);

    let v = model.n_vertices();
    let mut out = Array2::zeros((v, 3));
    for vi in 0..v {
        let p = Vector3::new(shaped[[vi, 0]], shaped[[vi, 1]], shaped[[vi, 2]]);
        let mut acc = Vector3::zeros();
        for j in 0..k {
            let w = model.blendweights[[vi, j]];
            if w != 0.0 {
                acc += (linear[j] * p + offset[j]) * w;
            }
        }
        out[[vi, 0]] = acc.x;
        out[[vi, 1]] = acc.y;
        out[[vi, 2]] = acc.z;
    }
    Ok(Mesh {
        vertices: out,
        faces: model.faces.clone(),
    })
}

/// Rest-pose joint locations for a shape coefficient vector (expression held
/// at zero).
pub fn regress_joints(model: &MorphableModel, shape: &Array1<f64>) -> Result<Array2<f64>> {
    if shape.len() != model.shape_dim() {
        return Err(Error::dim(format!(
            "shape coefficients: expected {}, got {}",
            model.shape_dim(),
            shape.len()
        )));
    }
    let shaped = add_blendshapes(&model.template, &model.shape_basis, shape.view());
    Ok(model.joint_regressor.dot(&shaped))
}

/// Area-weighted vertex normals. Vertices without incident area get the zero
/// vector; the rasterizer treats the faces they span as degenerate anyway.
pub fn vertex_normals(mesh: &Mesh) -> Array2<f64> {
    let v = mesh.vertices.nrows();
    let mut acc = Array2::<f64>::zeros((v, 3));
    for face in mesh.faces.outer_iter() {
        let [ia, ib, ic] = [face[0] as usize, face[1] as usize, face[2] as usize];
        let a = Vector3::new(mesh.vertices[[ia, 0]], mesh.vertices[[ia, 1]], mesh.vertices[[ia, 2]]);
        let b = Vector3::new(mesh.vertices[[ib, 0]], mesh.vertices[[ib, 1]], mesh.vertices[[ib, 2]]);
        let c = Vector3::new(mesh.vertices[[ic, 0]], mesh.vertices[[ic, 1]], mesh.vertices[[ic, 2]]);
        // Cross-product magnitude is twice the face area, so summing raw
        // cross products is exactly area weighting.
        let n = (b - a).cross(&(c - a));
        for idx in [ia, ib, ic] {
            acc[[idx, 0]] += n.x;
            acc[[idx, 1]] += n.y;
            acc[[idx, 2]] += n.z;
        }
    }
    for mut row in acc.outer_iter_mut() {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if norm > 1e-12 {
            row[0] /= norm;
            row[1] /= norm;
            row[2] /= norm;
        } else {
            row.fill(0.0);
        }
    }
    acc
}

/// 3D landmark positions: barycentric combinations of the embedding faces.
pub fn select_landmarks(model: &MorphableModel, mesh: &Mesh) -> Result<Array2<f64>> {
    let f = mesh.faces.nrows();
    let l = model.n_landmarks();
    let mut out = Array2::zeros((l, 3));
    for i in 0..l {
        let fi = model.landmark_faces[i] as usize;
        if fi >= f {
            return Err(Error::arg(format!(
                "landmark {i} references face {fi}, but the mesh has {f} faces"
            )));
        }
        for m in 0..3 {
            let vi = mesh.faces[[fi, m]] as usize;
            let w = model.landmark_bary[[i, m]];
            for c in 0..3 {
                out[[i, c]] += w * mesh.vertices[[vi, c]];
            }
        }
    }
    Ok(out)
}

// ────────────────────────────────────────────────────────────────────────────
// Toy model generators

fn random_simplex_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Deterministic random toy model for tests: scattered vertices, random
/// faces and bases, a parent chain of `k_joints` joints with the root pinned
/// to the template centroid.
pub fn make_toy_model(
    seed: u64,
    v: usize,
    k_joints: usize,
    dims: (usize, usize),
) -> Result<MorphableModel> {
    if v < 4 {
        return Err(Error::arg(format!("toy model needs v >= 4, got {v}")));
    }
    if k_joints < 1 {
        return Err(Error::arg("toy model needs k_joints >= 1".to_string()));
    }
    let (na, nb) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut template = Array2::from_shape_fn((v, 3), |_| rng.random_range(-0.5..0.5));
    let mean = template.mean_axis(Axis(0)).unwrap();
    for mut row in template.outer_iter_mut() {
        row[0] -= mean[0];
        row[1] -= mean[1];
        row[2] -= mean[2];
    }

    let f = 2 * v;
    let mut faces = Array2::zeros((f, 3));
    for i in 0..f {
        let a = rng.random_range(0..v);
        let mut b = rng.random_range(0..v);
        while b == a {
            b = rng.random_range(0..v);
        }
        let mut c = rng.random_range(0..v);
        while c == a || c == b {
            c = rng.random_range(0..v);
        }
        faces[[i, 0]] = a as u32;
        faces[[i, 1]] = b as u32;
        faces[[i, 2]] = c as u32;
    }

    // Zero-mean shape columns keep the root joint (centroid) at the origin
    // for every shape coefficient, which global-rotation equivariance needs.
    let mut shape_basis = Array3::from_shape_fn((v, 3, na), |_| rng.random_range(-0.1..0.1));
    center_basis_columns(&mut shape_basis);
    let expr_basis = Array3::from_shape_fn((v, 3, nb), |_| rng.random_range(-0.1..0.1));
    let pose_corrective_basis = if k_joints >= 2 {
        Some(Array3::from_shape_fn((v, 3, 9 * (k_joints - 1)), |_| {
            rng.random_range(-0.05..0.05)
        }))
    } else {
        None
    };

    let mut joint_regressor = Array2::zeros((k_joints, v));
    for i in 0..v {
        // Uniform root row keeps the root joint at the centroid, i.e. the
        // origin after centering.
        joint_regressor[[0, i]] = 1.0 / v as f64;
    }
    for j in 1..k_joints {
        for (i, w) in random_simplex_row(&mut rng, v).into_iter().enumerate() {
            joint_regressor[[j, i]] = w;
        }
    }

    let mut blendweights = Array2::zeros((v, k_joints));
    for i in 0..v {
        for (j, w) in random_simplex_row(&mut rng, k_joints).into_iter().enumerate() {
            blendweights[[i, j]] = w;
        }
    }

    let kinematic_parents: Vec<Option<usize>> =
        (0..k_joints).map(|j| if j == 0 { None } else { Some(j - 1) }).collect();

    let n_landmarks = 68;
    let landmark_faces: Vec<u32> = (0..n_landmarks).map(|_| rng.random_range(0..f) as u32).collect();
    let mut landmark_bary = Array2::zeros((n_landmarks, 3));
    for i in 0..n_landmarks {
        for (m, w) in random_simplex_row(&mut rng, 3).into_iter().enumerate() {
            landmark_bary[[i, m]] = w;
        }
    }

    let model = MorphableModel {
        template,
        faces,
        shape_basis,
        expr_basis,
        pose_corrective_basis,
        joint_regressor,
        blendweights,
        kinematic_parents,
        landmark_faces,
        landmark_bary,
        uv_face_mask: vec![true; f],
    };
    model.validate()?;
    Ok(model)
}

fn center_basis_columns(basis: &mut Array3<f64>) {
    let v = basis.shape()[0];
    for a in 0..basis.shape()[2] {
        for c in 0..3 {
            let mean: f64 = (0..v).map(|vi| basis[[vi, c, a]]).sum::<f64>() / v as f64;
            for vi in 0..v {
                basis[[vi, c, a]] -= mean;
            }
        }
    }
}

fn smoothstep01(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic head-shaped toy model: a closed ellipsoid with two joints
/// (root plus a jaw driven by the lower vertices), smooth low-frequency
/// bases, and landmarks embedded on the camera-facing hemisphere. Unlike
/// [`make_toy_model`] this renders with full coverage, which the pipeline's
/// synthetic assets need.
pub fn make_toy_sphere_model(
    seed: u64,
    rings: usize,
    segments: usize,
    dims: (usize, usize),
) -> Result<MorphableModel> {
    if rings < 2 || segments < 3 {
        return Err(Error::arg(format!(
            "sphere model needs rings >= 2 and segments >= 3, got {rings}/{segments}"
        )));
    }
    let (na, nb) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rx, ry, rz) = (0.36, 0.46, 0.30);

    // Vertex 0: top pole (-y is up in image coordinates); vertex 1: bottom.
    let v = rings * segments + 2;
    let mut template = Array2::zeros((v, 3));
    template[[0, 1]] = -ry;
    template[[1, 1]] = ry;
    for i in 0..rings {
        let phi = std::f64::consts::PI * (i + 1) as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let theta = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let row = 2 + i * segments + s;
            template[[row, 0]] = rx * phi.sin() * theta.cos();
            template[[row, 1]] = -ry * phi.cos();
            template[[row, 2]] = rz * phi.sin() * theta.sin();
        }
    }
    let ring = |i: usize, s: usize| (2 + i * segments + s % segments) as u32;

    let mut faces_vec: Vec<[u32; 3]> = Vec::new();
    for s in 0..segments {
        faces_vec.push([0, ring(0, s), ring(0, s + 1)]);
    }
    for i in 0..rings - 1 {
        for s in 0..segments {
            let (a, b) = (ring(i, s), ring(i, s + 1));
            let (c, d) = (ring(i + 1, s), ring(i + 1, s + 1));
            faces_vec.push([a, c, b]);
            faces_vec.push([b, c, d]);
        }
    }
    for s in 0..segments {
        faces_vec.push([1, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    let f = faces_vec.len();
    let mut faces = Array2::zeros((f, 3));
    for (i, tri) in faces_vec.iter().enumerate() {
        for m in 0..3 {
            faces[[i, m]] = tri[m];
        }
    }

    // Smooth sinusoidal bases so landmark fitting sees a well-conditioned
    // problem; amplitudes shrink with column index.
    let mut smooth_basis = |n: usize, amp0: f64| -> Array3<f64> {
        let phases: Vec<[f64; 3]> = (0..n)
            .map(|_| [0.0, 1.0, 2.0].map(|_| rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Array3::from_shape_fn((v, 3, n), |(vi, c, a)| {
            let p = [template[[vi, 0]], template[[vi, 1]], template[[vi, 2]]];
            let freq = 1.0 + 0.9 * a as f64;
            let amp = amp0 / (1.0 + 0.35 * a as f64);
            amp * (freq * std::f64::consts::PI * p[(c + a) % 3] + phases[a][c]).sin()
        })
    };
    let mut shape_basis = smooth_basis(na, 0.05);
    center_basis_columns(&mut shape_basis);
    let expr_basis = smooth_basis(nb, 0.03);
    let pose_corrective_basis = Some(Array3::from_shape_fn((v, 3, 9), |_| {
        rng.random_range(-0.01..0.01)
    }));

    // Joint 1 is a jaw pinned to the chin region (large +y).
    let mut joint_regressor = Array2::zeros((2, v));
    let mut jaw_raw = vec![0.0; v];
    let mut jaw_sum = 0.0;
    for i in 0..v {
        joint_regressor[[0, i]] = 1.0 / v as f64;
        let w = (template[[i, 1]] - 0.15).max(0.0).powi(2);
        jaw_raw[i] = w;
        jaw_sum += w;
    }
    for i in 0..v {
        joint_regressor[[1, i]] = jaw_raw[i] / jaw_sum;
    }

    let mut blendweights = Array2::zeros((v, 2));
    for i in 0..v {
        let jaw = 0.8 * smoothstep01((template[[i, 1]] - 0.05) / 0.3);
        blendweights[[i, 0]] = 1.0 - jaw;
        blendweights[[i, 1]] = jaw;
    }

    // Landmarks: spread over the faces whose centroids face the camera
    // (largest z first).
    let mut order: Vec<usize> = (0..f).collect();
    let centroid_z = |fi: usize| {
        (0..3)
            .map(|m| template[[faces[[fi, m]] as usize, 2]])
            .sum::<f64>()
            / 3.0
    };
    order.sort_by(|&a, &b| centroid_z(b).partial_cmp(&centroid_z(a)).unwrap());
    let n_landmarks = 68;
    let front = (f / 2).max(n_landmarks);
    let stride = (front / n_landmarks).max(1);
    let landmark_faces: Vec<u32> = (0..n_landmarks).map(|i| order[(i * stride) % f] as u32).collect();
    let mut landmark_bary = Array2::zeros((n_landmarks, 3));
    for i in 0..n_landmarks {
        for (m, w) in random_simplex_row(&mut rng, 3).into_iter().enumerate() {
            landmark_bary[[i, m]] = w;
        }
    }

    let model = MorphableModel {
        template,
        faces,
        shape_basis,
        expr_basis,
        pose_corrective_basis,
        joint_regressor,
        blendweights,
        kinematic_parents: vec![None, Some(0)],
        landmark_faces,
        landmark_bary,
        uv_face_mask: vec![true; f],
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn vertex_rows<'a>(
        vertices: &'a ndarray::ArrayView2<'a, f64>,
    ) -> impl Iterator<Item = Vector3<f64>> + 'a {
        vertices
            .outer_iter()
            .map(|r| Vector3::new(r[0], r[1], r[2]))
    }

    fn toy() -> MorphableModel {
        make_toy_model(7, 16, 2, (4, 2)).unwrap()
    }

    #[test]
    fn toy_model_is_deterministic_and_seed_sensitive() {
        let a = make_toy_model(1, 12, 2, (4, 2)).unwrap();
        let b = make_toy_model(1, 12, 2, (4, 2)).unwrap();
        assert_eq!(a.template, b.template);
        assert_eq!(a.shape_basis, b.shape_basis);
        assert_eq!(a.blendweights, b.blendweights);
        let c = make_toy_model(2, 12, 2, (4, 2)).unwrap();
        assert_ne!(a.shape_basis, c.shape_basis);
    }

    #[test]
    fn toy_model_rejects_tiny_vertex_count() {
        assert!(make_toy_model(1, 3, 1, (2, 2)).is_err());
    }

    #[test]
    fn toy_blendweight_rows_sum_to_one() {
        let m = toy();
        for row in m.blendweights.outer_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn neutral_decode_is_the_template_bitwise() {
        let m = toy();
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        assert_eq!(mesh.vertices, m.template);
    }

    #[test]
    fn unit_shape_coefficient_adds_first_basis_column() {
        let m = toy();
        let mut params = ParamSet::neutral_for(&m);
        params.shape[0] = 1.0;
        let mesh = decode(&m, &params).unwrap();
        // Oracle: direct matrix add of the first shape column.
        for vi in 0..m.n_vertices() {
            for c in 0..3 {
                let want = m.template[[vi, c]] + m.shape_basis[[vi, c, 0]];
                assert_abs_diff_eq!(mesh.vertices[[vi, c]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn global_quarter_turn_rotates_the_template() {
        let m = toy();
        let mut params = ParamSet::neutral_for(&m);
        params.pose[2] = std::f64::consts::FRAC_PI_2;
        let mesh = decode(&m, &params).unwrap();
        let mut worst: f64 = 0.0;
        for vi in 0..m.n_vertices() {
            let (x, y, z) = (m.template[[vi, 0]], m.template[[vi, 1]], m.template[[vi, 2]]);
            worst = worst
                .max((mesh.vertices[[vi, 0]] + y).abs())
                .max((mesh.vertices[[vi, 1]] - x).abs())
                .max((mesh.vertices[[vi, 2]] - z).abs());
        }
        assert!(worst < 1e-9, "max rotation error {worst}");
    }

    #[test]
    fn blendshape_linearity_at_zero_pose() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..8 {
            let a1 = Array1::from_shape_fn(m.shape_dim(), |_| rng.random_range(-1.0..1.0));
            let a2 = Array1::from_shape_fn(m.shape_dim(), |_| rng.random_range(-1.0..1.0));
            let dec = |a: &Array1<f64>| {
                let mut p = ParamSet::neutral_for(&m);
                p.shape = a.clone();
                decode(&m, &p).unwrap().vertices
            };
            let combined = dec(&(&a1 + &a2)) - &m.template;
            let separate = (dec(&a1) - &m.template) + (dec(&a2) - &m.template);
            let worst = (&combined - &separate)
                .iter()
                .fold(0.0f64, |acc, d| acc.max(d.abs()));
            assert!(worst < 1e-12, "linearity violation {worst}");
        }
    }

    #[test]
    fn extra_global_rotation_is_equivariant() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..6 {
            let mut base = ParamSet::neutral_for(&m);
            base.shape = Array1::from_shape_fn(m.shape_dim(), |_| rng.random_range(-0.5..0.5));
            // Non-root pose only; the root slot carries the extra rotation.
            for c in 3..base.pose.len() {
                base.pose[c] = rng.random_range(-0.4..0.4);
            }
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let rot = rotation_from_axis_angle(&axis);

            let plain = decode(&m, &base).unwrap();
            let mut rotated_params = base.clone();
            for c in 0..3 {
                rotated_params.pose[c] = axis[c];
            }
            let posed = decode(&m, &rotated_params).unwrap();
            let mut worst: f64 = 0.0;
            for (got, p) in vertex_rows(&posed.vertices.view()).zip(vertex_rows(&plain.vertices.view()))
            {
                worst = worst.max((got - rot * p).norm());
            }
            assert!(worst < 1e-9, "equivariance error {worst}");
        }
    }

    #[test]
    fn regress_joints_matches_triple_loop_oracle() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha = Array1::from_shape_fn(m.shape_dim(), |_| rng.random_range(-1.0..1.0));
        let got = regress_joints(&m, &alpha).unwrap();

        let mut shaped = m.template.clone();
        for vi in 0..m.n_vertices() {
            for c in 0..3 {
                for a in 0..m.shape_dim() {
                    shaped[[vi, c]] += m.shape_basis[[vi, c, a]] * alpha[a];
                }
            }
        }
        let mut want = Array2::<f64>::zeros((m.n_joints(), 3));
        for j in 0..m.n_joints() {
            for c in 0..3 {
                for vi in 0..m.n_vertices() {
                    want[[j, c]] += m.joint_regressor[[j, vi]] * shaped[[vi, c]];
                }
            }
        }
        for (g, w) in got.iter().zip(want.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_hot_regressor_row_selects_the_vertex() {
        let mut m = make_toy_model(5, 8, 1, (2, 1)).unwrap();
        m.joint_regressor.fill(0.0);
        m.joint_regressor[[0, 3]] = 1.0;
        let alpha = Array1::zeros(2);
        let j = regress_joints(&m, &alpha).unwrap();
        for c in 0..3 {
            assert_eq!(j[[0, c]], m.template[[3, c]]);
        }
    }

    #[test]
    fn normals_of_ccw_plane_triangle_point_up() {
        let mesh = Mesh {
            vertices: array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: array![[0u32, 1, 2]],
        };
        let n = vertex_normals(&mesh);
        for row in n.outer_iter() {
            assert_abs_diff_eq!(row[0], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(row[1], 0.0, epsilon = 1e-15);
            assert_abs_diff_eq!(row[2], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn cube_corner_normal_is_diagonal() {
        // Three equal-area faces around the corner (1,1,1) with outward
        // normals +x, +y, +z; the corner normal is their normalized sum.
        let mesh = Mesh {
            vertices: array![
                [1.0, 1.0, 1.0],
                [2.0, 1.0, 1.0],
                [1.0, 2.0, 1.0],
                [1.0, 1.0, 2.0]
            ],
            faces: array![[0u32, 1, 2], [0, 2, 3], [0, 3, 1]],
        };
        let n = vertex_normals(&mesh);
        let want = 1.0 / 3f64.sqrt();
        for c in 0..3 {
            assert_abs_diff_eq!(n[[0, c]], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn degenerate_face_contributes_nothing() {
        let mesh = Mesh {
            vertices: array![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [2.0, 2.0, 5.0]
            ],
            // Second face is a zero-area sliver on one vertex.
            faces: array![[0u32, 1, 2], [3, 3, 3]],
        };
        let n = vertex_normals(&mesh);
        assert_eq!(n[[3, 0]], 0.0);
        assert_eq!(n[[3, 1]], 0.0);
        assert_eq!(n[[3, 2]], 0.0);
        assert_abs_diff_eq!(n[[0, 2]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn normals_rotate_with_the_mesh() {
        let m = toy();
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let n0 = vertex_normals(&mesh);
        let rot = rotation_from_axis_angle(&Vector3::new(0.3, -0.8, 0.5));
        let mut rotated = mesh.vertices.clone();
        for mut row in rotated.outer_iter_mut() {
            let p = rot * Vector3::new(row[0], row[1], row[2]);
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        let n1 = vertex_normals(&Mesh {
            vertices: rotated,
            faces: mesh.faces.clone(),
        });
        for (r0, r1) in n0.outer_iter().zip(n1.outer_iter()) {
            let want = rot * Vector3::new(r0[0], r0[1], r0[2]);
            let got = Vector3::new(r1[0], r1[1], r1[2]);
            assert!((want - got).norm() < 1e-9);
        }
    }

    #[test]
    fn landmark_selection_matches_weighted_sum_oracle() {
        let m = toy();
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let lm = select_landmarks(&m, &mesh).unwrap();
        for i in 0..m.n_landmarks() {
            let fi = m.landmark_faces[i] as usize;
            for c in 0..3 {
                let mut want = 0.0;
                for mcorner in 0..3 {
                    want += m.landmark_bary[[i, mcorner]]
                        * mesh.vertices[[mesh.faces[[fi, mcorner]] as usize, c]];
                }
                assert_abs_diff_eq!(lm[[i, c]], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn one_hot_barycentric_picks_the_vertex() {
        let mut m = toy();
        m.landmark_bary.fill(0.0);
        for i in 0..m.n_landmarks() {
            m.landmark_bary[[i, 0]] = 1.0;
        }
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let lm = select_landmarks(&m, &mesh).unwrap();
        for i in 0..m.n_landmarks() {
            let vi = mesh.faces[[m.landmark_faces[i] as usize, 0]] as usize;
            for c in 0..3 {
                assert_eq!(lm[[i, c]], mesh.vertices[[vi, c]]);
            }
        }
    }

    #[test]
    fn centroid_barycentric_is_the_face_centroid() {
        let mut m = toy();
        m.landmark_bary.fill(1.0 / 3.0);
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let lm = select_landmarks(&m, &mesh).unwrap();
        let fi = m.landmark_faces[0] as usize;
        for c in 0..3 {
            let centroid: f64 = (0..3)
                .map(|mc| mesh.vertices[[mesh.faces[[fi, mc]] as usize, c]])
                .sum::<f64>()
                / 3.0;
            assert_abs_diff_eq!(lm[[0, c]], centroid, epsilon = 1e-14);
        }
    }

    #[test]
    fn landmark_selection_commutes_with_rigid_transform() {
        let m = toy();
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let lm = select_landmarks(&m, &mesh).unwrap();
        let rot = rotation_from_axis_angle(&Vector3::new(-0.2, 0.4, 1.1));
        let shift = Vector3::new(0.3, -0.1, 0.25);
        let mut moved = mesh.vertices.clone();
        for mut row in moved.outer_iter_mut() {
            let p = rot * Vector3::new(row[0], row[1], row[2]) + shift;
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
        }
        let lm_moved = select_landmarks(
            &m,
            &Mesh {
                vertices: moved,
                faces: mesh.faces.clone(),
            },
        )
        .unwrap();
        for i in 0..m.n_landmarks() {
            let want = rot * Vector3::new(lm[[i, 0]], lm[[i, 1]], lm[[i, 2]]) + shift;
            let got = Vector3::new(lm_moved[[i, 0]], lm_moved[[i, 1]], lm_moved[[i, 2]]);
            assert!((want - got).norm() < 1e-12);
        }
    }

    #[test]
    fn landmark_face_out_of_range_is_an_error() {
        let mut m = toy();
        m.landmark_faces[5] = 10_000;
        let mesh = Mesh {
            vertices: m.template.clone(),
            faces: m.faces.clone(),
        };
        let err = select_landmarks(&m, &mesh).unwrap_err();
        assert!(err.to_string().contains("face 10000"));
    }

    #[test]
    fn sphere_model_faces_point_outward() {
        let m = make_toy_sphere_model(7, 10, 14, (6, 4)).unwrap();
        for face in m.faces.outer_iter() {
            let p = |i: usize| {
                let vi = face[i] as usize;
                Vector3::new(m.template[[vi, 0]], m.template[[vi, 1]], m.template[[vi, 2]])
            };
            let n = (p(1) - p(0)).cross(&(p(2) - p(0)));
            let centroid = (p(0) + p(1) + p(2)) / 3.0;
            assert!(
                n.dot(&centroid) > 0.0,
                "inward-facing face {:?}",
                face.to_vec()
            );
        }
    }

    #[test]
    fn sphere_model_passes_validation_and_has_camera_facing_landmarks() {
        let m = make_toy_sphere_model(3, 8, 12, (4, 3)).unwrap();
        assert_eq!(m.n_joints(), 2);
        let mesh = decode(&m, &ParamSet::neutral_for(&m)).unwrap();
        let lm = select_landmarks(&m, &mesh).unwrap();
        let front = lm.column(2).iter().filter(|&&z| z > 0.0).count();
        assert!(front * 10 >= lm.nrows() * 9, "landmarks mostly front-facing");
    }

    #[test]
    fn validation_flags_bad_regressor_rows() {
        let mut m = toy();
        m.joint_regressor[[1, 0]] += 0.5;
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("J_regressor"));
        assert!(err.to_string().contains("not stochastic"));
    }

    #[test]
    fn param_set_json_round_trip() {
        let p = ParamSet {
            shape: array![0.1, -0.2],
            expression: array![0.3],
            pose: array![0.0, 0.1, 0.2, 0.0, 0.0, -0.1],
            camera_scale: 1.25,
            camera_translation: [0.05, -0.02],
        };
        let json = serde_json::to_string(&p).unwrap();
        let back: ParamSet = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = toy();
        let mut p = ParamSet::neutral_for(&m);
        p.shape = Array1::zeros(m.shape_dim() + 1);
        let err = decode(&m, &p).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }
}
