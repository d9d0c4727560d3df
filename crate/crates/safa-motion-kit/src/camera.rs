//! Weak-perspective projection and software rasterization of per-vertex
//! attributes.
//!
//! Depth convention: larger camera-space z is nearer. Front-facing means
//! positive signed area of the projected triangle, which coincides with the
//! geometric face normal having positive z, so outward-oriented meshes
//! render their camera-facing side.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::model::{decode, vertex_normals, Mesh, MorphableModel, ParamSet};
use crate::motion::MotionField;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Camera {
    pub fn new(scale: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::arg(format!(
                "camera scale must be positive and finite, got {scale}"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::arg("non-finite camera translation".to_string()));
        }
        Ok(Camera { scale, translation })
    }
}

impl From<&ParamSet> for Camera {
    /// Assumes the parameter set has been validated (positive finite scale).
    fn from(p: &ParamSet) -> Self {
        Camera {
            scale: p.camera_scale,
            translation: p.camera_translation,
        }
    }
}

/// Project vertices: p = s (x, y) + t. Returns normalized image points and
/// the camera-space depths used for ordering.
pub fn project(vertices: &Array2<f64>, camera: &Camera) -> Result<(Array2<f64>, Array1<f64>)> {
    if vertices.ncols() != 3 {
        return Err(Error::dim(format!(
            "project expects n x 3 vertices, got {:?}",
            vertices.shape()
        )));
    }
    let n = vertices.nrows();
    let mut xy = Array2::zeros((n, 2));
    let mut depth = Array1::zeros(n);
    for i in 0..n {
        xy[[i, 0]] = camera.scale * vertices[[i, 0]] + camera.translation[0];
        xy[[i, 1]] = camera.scale * vertices[[i, 1]] + camera.translation[1];
        depth[i] = vertices[[i, 2]];
    }
    Ok((xy, depth))
}

/// Analytic Jacobian of the projection of one vertex with respect to camera
/// scale, camera translation, and the vertex position.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionJacobian {
    /// d p / d s = (x, y)
    pub d_scale: [f64; 2],
    /// d p / d t is the 2x2 identity.
    /// d p / d vertex: rows are image coordinates, columns vertex coordinates.
    pub d_vertex: [[f64; 3]; 2],
}

pub fn projection_jacobian(vertex: [f64; 3], camera: &Camera) -> ProjectionJacobian {
    ProjectionJacobian {
        d_scale: [vertex[0], vertex[1]],
        d_vertex: [[camera.scale, 0.0, 0.0], [0.0, camera.scale, 0.0]],
    }
}

/// Rasterized attribute buffer plus hard coverage mask.
#[derive(Clone, Debug)]
pub struct AttributeImage {
    /// H x W x a; uncovered pixels are all-zero.
    pub data: Array3<f64>,
    /// H x W in {0, 1}.
    pub coverage: Array2<f64>,
}

impl AttributeImage {
    pub fn zeros(grid: &ImageGrid, attribute_dim: usize) -> Self {
        AttributeImage {
            data: Array3::zeros((grid.height(), grid.width(), attribute_dim)),
            coverage: Array2::zeros((grid.height(), grid.width())),
        }
    }

    pub fn attribute_dim(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(1))
    }
}

// Faces stay in index order within the Vec, which is what makes the
// lower-face-index tie-break fall out of the strict depth comparison.
struct PreparedFace {
    corners: [[f64; 2]; 3],
    depths: [f64; 3],
    verts: [usize; 3],
    area2: f64,
    row_range: (usize, usize),
    col_range: (usize, usize),
}

/// Rasterize per-vertex attributes over the grid. Among masked-in,
/// front-facing triangles covering a pixel center the nearest (greatest
/// depth) wins; exact depth ties go to the lower face index. Edge-touching
/// pixels (barycentric coordinate exactly zero) count as covered.
pub fn rasterize(
    mesh: &Mesh,
    camera: &Camera,
    attributes: &Array2<f64>,
    face_mask: &[bool],
    grid: &ImageGrid,
) -> Result<AttributeImage> {
    let v = mesh.vertices.nrows();
    if attributes.nrows() != v {
        return Err(Error::dim(format!(
            "attribute rows ({}) must match vertex count ({v})",
            attributes.nrows()
        )));
    }
    if face_mask.len() != mesh.faces.nrows() {
        return Err(Error::dim(format!(
            "face mask length ({}) must match face count ({})",
            face_mask.len(),
            mesh.faces.nrows()
        )));
    }
    if mesh.vertices.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("mesh has non-finite vertices".to_string()));
    }
    let a_dim = attributes.ncols();
    let (h, w) = (grid.height(), grid.width());
    let (xy, depth) = project(&mesh.vertices, camera)?;

    let mut faces = Vec::new();
    for (fi, face) in mesh.faces.outer_iter().enumerate() {
        if !face_mask[fi] {
            continue;
        }
        let verts = [face[0] as usize, face[1] as usize, face[2] as usize];
        let corners = verts.map(|vi| [xy[[vi, 0]], xy[[vi, 1]]]);
        let [a, b, c] = corners;
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        // Back-face and degenerate cull in one comparison.
        if !(area2 > 0.0) {
            continue;
        }
        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        // First/last pixel centers inside the bounding box.
        let col0 = ((min_x + 1.0) * w as f64 / 2.0 - 0.5).ceil().max(0.0) as usize;
        let col1 = ((max_x + 1.0) * w as f64 / 2.0 - 0.5).floor().min(w as f64 - 1.0);
        let row0 = ((min_y + 1.0) * h as f64 / 2.0 - 0.5).ceil().max(0.0) as usize;
        let row1 = ((max_y + 1.0) * h as f64 / 2.0 - 0.5).floor().min(h as f64 - 1.0);
        if col1 < 0.0 || row1 < 0.0 || col0 >= w || row0 >= h {
            continue;
        }
        faces.push(PreparedFace {
            corners,
            depths: verts.map(|vi| depth[vi]),
            verts,
            area2,
            row_range: (row0, row1 as usize),
            col_range: (col0, col1 as usize),
        });
    }

    // Rows are independent, so process them in parallel and stitch.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut row_data = vec![0.0; w * a_dim];
            let mut row_cov = vec![0.0; w];
            let mut row_depth = vec![f64::NEG_INFINITY; w];
            let y = grid.pixel_center(i, 0)[1];
            for face in &faces {
                if i < face.row_range.0 || i > face.row_range.1 {
                    continue;
                }
                let [a, b, c] = face.corners;
                for j in face.col_range.0..=face.col_range.1 {
                    let x = grid.pixel_center(i, j)[0];
                    let w0 = (b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y);
                    let w1 = (c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y);
                    let w2 = (a[0] - x) * (b[1] - y) - (b[0] - x) * (a[1] - y);
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let l0 = w0 / face.area2;
                    let l1 = w1 / face.area2;
                    let l2 = w2 / face.area2;
                    let z = l0 * face.depths[0] + l1 * face.depths[1] + l2 * face.depths[2];
                    // Strict comparison: an exact tie keeps the earlier
                    // (lower-index) face.
                    if z > row_depth[j] {
                        row_depth[j] = z;
                        row_cov[j] = 1.0;
                        for (ch, slot) in row_data[j * a_dim..(j + 1) * a_dim].iter_mut().enumerate()
                        {
                            *slot = l0 * attributes[[face.verts[0], ch]]
                                + l1 * attributes[[face.verts[1], ch]]
                                + l2 * attributes[[face.verts[2], ch]];
                        }
                    }
                }
            }
            (row_data, row_cov)
        })
        .collect();

    let mut out = AttributeImage::zeros(grid, a_dim);
    for (i, (row_data, row_cov)) in rows.into_iter().enumerate() {
        for j in 0..w {
            out.coverage[[i, j]] = row_cov[j];
            for ch in 0..a_dim {
                out.data[[i, j, ch]] = row_data[j * a_dim + ch];
            }
        }
    }
    Ok(out)
}

/// Bilinear sample at one normalized point with replicate-border clamping.
/// Points exactly on pixel centers read the stored value bit-for-bit.
pub(crate) fn bilinear_sample(image: &ArrayView3<f64>, x: f64, y: f64, out: &mut [f64]) {
    let (h, w, ch) = image.dim();
    let u = ((x + 1.0) * w as f64 / 2.0 - 0.5).clamp(0.0, (w - 1) as f64);
    let v = ((y + 1.0) * h as f64 / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
    let uf = u.floor();
    let vf = v.floor();
    let fx = u - uf;
    let fy = v - vf;
    let j0 = uf as usize;
    let i0 = vf as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    for c in 0..ch {
        let top = (1.0 - fx) * image[[i0, j0, c]] + fx * image[[i0, j1, c]];
        let bottom = (1.0 - fx) * image[[i1, j0, c]] + fx * image[[i1, j1, c]];
        out[c] = (1.0 - fy) * top + fy * bottom;
    }
}

/// Bilinear colors of an image at the given normalized points.
pub fn sample_texture(image: &Array3<f64>, points: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w, ch) = image.dim();
    if h == 0 || w == 0 || ch == 0 {
        return Err(Error::arg("cannot sample an empty image".to_string()));
    }
    if points.ncols() != 2 {
        return Err(Error::dim(format!(
            "sample points must be n x 2, got {:?}",
            points.shape()
        )));
    }
    let n = points.nrows();
    let mut out = Array2::zeros((n, ch));
    let view = image.view();
    for i in 0..n {
        bilinear_sample(
            &view,
            points[[i, 0]],
            points[[i, 1]],
            out.row_mut(i).as_slice_mut().unwrap(),
        );
    }
    Ok(out)
}

/// Texture-transferred rendering: colors sampled from the source image at
/// the projected source mesh, rasterized on the driving mesh under the
/// driving camera.
pub fn render_reenactment(
    model: &MorphableModel,
    params_source: &ParamSet,
    params_driving: &ParamSet,
    source_image: &Array3<f64>,
    grid: &ImageGrid,
) -> Result<AttributeImage> {
    let mesh_s = decode(model, params_source)?;
    let (xy_s, _) = project(&mesh_s.vertices, &Camera::from(params_source))?;
    let texture = sample_texture(source_image, &xy_s)?;
    let mesh_d = decode(model, params_driving)?;
    rasterize(
        &mesh_d,
        &Camera::from(params_driving),
        &texture,
        &model.uv_face_mask,
        grid,
    )
}

/// Vertex normals of the decoded mesh rasterized under that mesh's camera.
pub fn render_normal_map(
    model: &MorphableModel,
    params: &ParamSet,
    grid: &ImageGrid,
) -> Result<AttributeImage> {
    let mesh = decode(model, params)?;
    let normals = vertex_normals(&mesh);
    rasterize(&mesh, &Camera::from(params), &normals, &model.uv_face_mask, grid)
}

/// Rendered 3D motion: the per-vertex displacement from driving projection
/// to source projection, rasterized on the driving mesh and converted to an
/// absolute sampling field. Uncovered pixels map to themselves.
pub fn render_3d_motion(
    model: &MorphableModel,
    params_source: &ParamSet,
    params_driving: &ParamSet,
    grid: &ImageGrid,
) -> Result<(MotionField, Array2<f64>)> {
    let mesh_s = decode(model, params_source)?;
    let (xy_s, _) = project(&mesh_s.vertices, &Camera::from(params_source))?;
    let mesh_d = decode(model, params_driving)?;
    let (xy_d, _) = project(&mesh_d.vertices, &Camera::from(params_driving))?;
    let displacement = &xy_s - &xy_d;
    let rendered = rasterize(
        &mesh_d,
        &Camera::from(params_driving),
        &displacement,
        &model.uv_face_mask,
        grid,
    )?;
    let (h, w) = (grid.height(), grid.width());
    let mut map = Array3::zeros((h, w, 2));
    for i in 0..h {
        for j in 0..w {
            let [x, y] = grid.pixel_center(i, j);
            map[[i, j, 0]] = x + rendered.data[[i, j, 0]];
            map[[i, j, 1]] = y + rendered.data[[i, j, 1]];
        }
    }
    Ok((MotionField::new(map)?, rendered.coverage))
}
