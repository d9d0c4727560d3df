//! Fixture I/O: model archives and tensor bundles as NPZ, single tensors
//! as NPY, images as PNG (u8, scaled to [0, 1]), and parameters / reports
//! as JSON.
//!
//! NPZ integer fields are stored as little-endian i32; kinematic parents
//! use -1 for the root. All float tensors are f64.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use ndarray_npy::{NpzReader, NpzWriter, ReadNpyError, ReadableElement, WritableElement};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::{AvgNorms, GadeWeights};
use crate::model::{MorphableModel, ParamSet};
use crate::motion::KeypointSet;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

struct Npz {
    reader: NpzReader<File>,
    names: Vec<String>,
    path: std::path::PathBuf,
}

impl Npz {
    fn open(path: &Path) -> Result<Self> {
        let reader = NpzReader::new(open(path)?)
            .map_err(|e| Error::file(path, format!("not an npz archive: {e}")))?;
        let mut reader = reader;
        let names = reader
            .names()
            .map_err(|e| Error::file(path, format!("unreadable npz directory: {e}")))?;
        Ok(Npz {
            reader,
            names,
            path: path.to_path_buf(),
        })
    }

    fn has(&self, key: &str) -> bool {
        let with_ext = format!("{key}.npy");
        self.names.iter().any(|n| n == key || *n == with_ext)
    }

    fn require<S, D>(&mut self, key: &str, field: &'static str) -> Result<ndarray::ArrayBase<S, D>>
    where
        S: ndarray::DataOwned,
        S::Elem: ReadableElement,
        D: ndarray::Dimension,
    {
        if !self.has(key) {
            return Err(Error::MissingTensor { field });
        }
        self.reader
            .by_name(key)
            .map_err(|e| Error::file(&self.path, format!("tensor `{key}`: {e}")))
    }

    fn optional<S, D>(&mut self, key: &str) -> Result<Option<ndarray::ArrayBase<S, D>>>
    where
        S: ndarray::DataOwned,
        S::Elem: ReadableElement,
        D: ndarray::Dimension,
    {
        if !self.has(key) {
            return Ok(None);
        }
        self.reader
            .by_name(key)
            .map(Some)
            .map_err(|e| Error::file(&self.path, format!("tensor `{key}`: {e}")))
    }
}

struct NpzOut {
    writer: NpzWriter<File>,
    path: std::path::PathBuf,
}

impl NpzOut {
    fn create(path: &Path) -> Result<Self> {
        Ok(NpzOut {
            writer: NpzWriter::new(create(path)?),
            path: path.to_path_buf(),
        })
    }

    fn add<S, D>(&mut self, key: &str, array: &ndarray::ArrayBase<S, D>) -> Result<()>
    where
        S: ndarray::Data,
        S::Elem: WritableElement,
        D: ndarray::Dimension,
    {
        self.writer
            .add_array(key, array)
            .map_err(|e| Error::file(&self.path, format!("writing tensor `{key}`: {e}")))
    }

    fn finish(self) -> Result<()> {
        self.writer
            .finish()
            .map(|_| ())
            .map_err(|e| Error::file(&self.path, format!("finalizing archive: {e}")))
    }
}

fn faces_to_u32(path: &Path, faces: Array2<i32>) -> Result<Array2<u32>> {
    if let Some(neg) = faces.iter().find(|x| **x < 0) {
        return Err(Error::ModelFormat {
            field: "faces",
            detail: format!("negative vertex index {neg} in {}", path.display()),
        });
    }
    Ok(faces.mapv(|x| x as u32))
}

/// Load a morphable model archive and check every structural invariant.
pub fn load_model(path: &Path) -> Result<MorphableModel> {
    let mut npz = Npz::open(path)?;
    let template: Array2<f64> = npz.require("template", "template")?;
    let faces_raw: Array2<i32> = npz.require("faces", "faces")?;
    let shape_basis: Array3<f64> = npz.require("shapedirs", "shape basis")?;
    let expr_basis: Array3<f64> = npz.require("exprdirs", "expression basis")?;
    let pose_corrective_basis: Option<Array3<f64>> = npz.optional("posedirs")?;
    let joint_regressor: Array2<f64> = npz.require("J_regressor", "joint regressor")?;
    let blendweights: Array2<f64> = npz.require("weights", "blendweights")?;
    let parents_raw: Array1<i32> = npz.require("parents", "kinematic parents")?;
    let landmark_faces_raw: Array1<i32> = npz.require("landmark_faces", "landmark faces")?;
    let landmark_bary: Array2<f64> = npz.require("landmark_bary", "landmark barycentrics")?;
    let uv_mask_raw: Array1<bool> = npz.require("uv_face_mask", "uv face mask")?;

    let faces = faces_to_u32(path, faces_raw)?;
    let mut kinematic_parents = Vec::with_capacity(parents_raw.len());
    for (j, &p) in parents_raw.iter().enumerate() {
        kinematic_parents.push(match p {
            -1 => None,
            p if p >= 0 => Some(p as usize),
            p => {
                return Err(Error::ModelFormat {
                    field: "kinematic parents",
                    detail: format!("joint {j} has parent {p}"),
                })
            }
        });
    }
    let mut landmark_faces = Vec::with_capacity(landmark_faces_raw.len());
    for (i, &f) in landmark_faces_raw.iter().enumerate() {
        if f < 0 {
            return Err(Error::ModelFormat {
                field: "landmark faces",
                detail: format!("landmark {i} references face {f}"),
            });
        }
        landmark_faces.push(f as u32);
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
        uv_face_mask: uv_mask_raw.to_vec(),
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &MorphableModel) -> Result<()> {
    model.validate()?;
    let mut npz = NpzOut::create(path)?;
    npz.add("template", &model.template)?;
    npz.add("faces", &model.faces.mapv(|x| x as i32))?;
    npz.add("shapedirs", &model.shape_basis)?;
    npz.add("exprdirs", &model.expr_basis)?;
    if let Some(basis) = &model.pose_corrective_basis {
        npz.add("posedirs", basis)?;
    }
    npz.add("J_regressor", &model.joint_regressor)?;
    npz.add("weights", &model.blendweights)?;
    let parents: Array1<i32> = model
        .kinematic_parents
        .iter()
        .map(|p| p.map_or(-1, |x| x as i32))
        .collect();
    npz.add("parents", &parents)?;
    let lfaces: Array1<i32> = model.landmark_faces.iter().map(|f| *f as i32).collect();
    npz.add("landmark_faces", &lfaces)?;
    npz.add("landmark_bary", &model.landmark_bary)?;
    let mask: Array1<bool> = model.uv_face_mask.iter().copied().collect();
    npz.add("uv_face_mask", &mask)?;
    npz.finish()
}

/// Keypoint archive: `points` (K x 2) and `jacobians` (K x 2 x 2).
pub fn load_keypoints(path: &Path) -> Result<KeypointSet> {
    let mut npz = Npz::open(path)?;
    let points: Array2<f64> = npz.require("points", "keypoint positions")?;
    let jacobians: Array3<f64> = npz.require("jacobians", "keypoint jacobians")?;
    KeypointSet::new(points, jacobians)
}

pub fn save_keypoints(path: &Path, keypoints: &KeypointSet) -> Result<()> {
    let mut npz = NpzOut::create(path)?;
    npz.add("points", keypoints.points())?;
    npz.add("jacobians", keypoints.jacobians())?;
    npz.finish()
}

/// Modulation weight archive: `w_gamma`, `b_gamma`, `w_delta`, `b_delta`,
/// and `avg_norms` as (shape, expression, scale).
pub fn load_gade_weights(path: &Path) -> Result<GadeWeights> {
    let mut npz = Npz::open(path)?;
    let w_gamma: Array2<f64> = npz.require("w_gamma", "gamma weights")?;
    let b_gamma: Array1<f64> = npz.require("b_gamma", "gamma bias")?;
    let w_delta: Array2<f64> = npz.require("w_delta", "delta weights")?;
    let b_delta: Array1<f64> = npz.require("b_delta", "delta bias")?;
    let norms: Array1<f64> = npz.require("avg_norms", "average norms")?;
    if norms.len() != 3 {
        return Err(Error::file(
            path,
            format!("avg_norms must have 3 entries, got {}", norms.len()),
        ));
    }
    let weights = GadeWeights {
        w_gamma,
        b_gamma,
        w_delta,
        b_delta,
        avg_norms: AvgNorms {
            shape: norms[0],
            expression: norms[1],
            scale: norms[2],
        },
    };
    weights.validate()?;
    Ok(weights)
}

pub fn save_gade_weights(path: &Path, weights: &GadeWeights) -> Result<()> {
    weights.validate()?;
    let mut npz = NpzOut::create(path)?;
    npz.add("w_gamma", &weights.w_gamma)?;
    npz.add("b_gamma", &weights.b_gamma)?;
    npz.add("w_delta", &weights.w_delta)?;
    npz.add("b_delta", &weights.b_delta)?;
    let norms = ndarray::array![
        weights.avg_norms.shape,
        weights.avg_norms.expression,
        weights.avg_norms.scale
    ];
    npz.add("avg_norms", &norms)?;
    npz.finish()
}

fn map_npy_read(path: &Path, e: ReadNpyError) -> Error {
    match e {
        ReadNpyError::Io(io) => Error::io(path, io),
        other => Error::file(path, format!("{other}")),
    }
}

pub fn load_npy1(path: &Path) -> Result<Array1<f64>> {
    ndarray_npy::read_npy(path).map_err(|e| map_npy_read(path, e))
}

pub fn load_npy2(path: &Path) -> Result<Array2<f64>> {
    ndarray_npy::read_npy(path).map_err(|e| map_npy_read(path, e))
}

pub fn load_npy3(path: &Path) -> Result<Array3<f64>> {
    ndarray_npy::read_npy(path).map_err(|e| map_npy_read(path, e))
}

pub fn save_npy1(path: &Path, array: &Array1<f64>) -> Result<()> {
    ndarray_npy::write_npy(path, array).map_err(|e| Error::file(path, format!("{e}")))
}

pub fn save_npy2(path: &Path, array: &Array2<f64>) -> Result<()> {
    ndarray_npy::write_npy(path, array).map_err(|e| Error::file(path, format!("{e}")))
}

pub fn save_npy3(path: &Path, array: &Array3<f64>) -> Result<()> {
    ndarray_npy::write_npy(path, array).map_err(|e| Error::file(path, format!("{e}")))
}

/// Load a PNG as floats in [0, 1]: grayscale images give one channel,
/// everything else is converted to RGB.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::file(path, format!("{e}")))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 1),
                |(i, j, _)| g.get_pixel(j as u32, i as u32)[0] as f64 / 255.0,
            ))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Ok(Array3::from_shape_fn(
                (h as usize, w as usize, 3),
                |(i, j, c)| rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0,
            ))
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save one- or three-channel float images as 8-bit PNG, clamping to
/// [0, 1].
pub fn save_png(path: &Path, image_data: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image_data.dim();
    if h == 0 || w == 0 {
        return Err(Error::dim("cannot save an empty image".to_string()));
    }
    let result = match c {
        1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([quantize(image_data[[y as usize, x as usize, 0]])])
        })
        .save(path),
        3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([
                quantize(image_data[[y as usize, x as usize, 0]]),
                quantize(image_data[[y as usize, x as usize, 1]]),
                quantize(image_data[[y as usize, x as usize, 2]]),
            ])
        })
        .save(path),
        other => {
            return Err(Error::dim(format!(
                "png images must have 1 or 3 channels, got {other}"
            )))
        }
    };
    result.map_err(|e| Error::file(path, format!("{e}")))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::file(path, format!("{e}")))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)
        .map_err(|e| Error::file(path, format!("{e}")))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    load_json(path)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    save_json(path, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_sphere_model;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn model_archive_round_trips_every_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.npz");
        let model = make_toy_sphere_model(42, 6, 9, (2, 3)).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.template, model.template);
        assert_eq!(back.faces, model.faces);
        assert_eq!(back.shape_basis, model.shape_basis);
        assert_eq!(back.expr_basis, model.expr_basis);
        assert_eq!(back.pose_corrective_basis, model.pose_corrective_basis);
        assert_eq!(back.joint_regressor, model.joint_regressor);
        assert_eq!(back.blendweights, model.blendweights);
        assert_eq!(back.kinematic_parents, model.kinematic_parents);
        assert_eq!(back.landmark_faces, model.landmark_faces);
        assert_eq!(back.landmark_bary, model.landmark_bary);
        assert_eq!(back.uv_face_mask, model.uv_face_mask);
    }

    #[test]
    fn full_scale_archive_loads_with_the_expected_counts() {
        // The released head asset this loader targets has 5023 vertices
        // and 9976 faces; synthesize an archive at that size to prove the
        // loader and validator handle it.
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.npz");
        let mut model = crate::model::make_toy_model(7, 5023, 4, (8, 6)).unwrap();
        let f = 9976;
        let mut faces = Array2::<u32>::zeros((f, 3));
        for i in 0..f {
            let a = (i * 3) % 5023;
            faces[[i, 0]] = a as u32;
            faces[[i, 1]] = ((a + 1) % 5023) as u32;
            faces[[i, 2]] = ((a + 2) % 5023) as u32;
        }
        model.faces = faces;
        model.uv_face_mask = vec![true; f];
        for lf in &mut model.landmark_faces {
            *lf %= f as u32;
        }
        model.validate().unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.n_vertices(), 5023);
        assert_eq!(back.n_faces(), 9976);
    }

    #[test]
    fn missing_blendweights_use_the_field_name() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.npz");
        let model = make_toy_sphere_model(42, 6, 9, (2, 2)).unwrap();
        // Write the archive by hand, leaving the weights out.
        let mut npz = NpzOut::create(&path).unwrap();
        npz.add("template", &model.template).unwrap();
        npz.add("faces", &model.faces.mapv(|x| x as i32)).unwrap();
        npz.add("shapedirs", &model.shape_basis).unwrap();
        npz.add("exprdirs", &model.expr_basis).unwrap();
        npz.add("J_regressor", &model.joint_regressor).unwrap();
        npz.finish().unwrap();
        let err = load_model(&path).unwrap_err();
        assert_eq!(err.to_string(), "blendweights absent");
    }

    #[test]
    fn negative_face_indices_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.npz");
        let model = make_toy_sphere_model(42, 6, 9, (2, 2)).unwrap();
        let mut faces = model.faces.mapv(|x| x as i32);
        faces[[0, 0]] = -3;
        let mut npz = NpzOut::create(&path).unwrap();
        npz.add("template", &model.template).unwrap();
        npz.add("faces", &faces).unwrap();
        npz.add("shapedirs", &model.shape_basis).unwrap();
        npz.add("exprdirs", &model.expr_basis).unwrap();
        npz.add("J_regressor", &model.joint_regressor).unwrap();
        npz.add("weights", &model.blendweights).unwrap();
        npz.add("parents", &array![-1i32, 0]).unwrap();
        npz.add(
            "landmark_faces",
            &model.landmark_faces.iter().map(|f| *f as i32).collect::<Array1<i32>>(),
        )
        .unwrap();
        npz.add("landmark_bary", &model.landmark_bary).unwrap();
        npz.add(
            "uv_face_mask",
            &model.uv_face_mask.iter().copied().collect::<Array1<bool>>(),
        )
        .unwrap();
        npz.finish().unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("faces"), "{err}");
    }

    #[test]
    fn keypoints_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("kp.npz");
        let points = array![[0.1, -0.2], [0.3, 0.4]];
        let mut jac = Array3::zeros((2, 2, 2));
        for k in 0..2 {
            jac[[k, 0, 0]] = 1.0 + k as f64;
            jac[[k, 1, 1]] = 1.0;
        }
        let kp = KeypointSet::new(points.clone(), jac.clone()).unwrap();
        save_keypoints(&path, &kp).unwrap();
        let back = load_keypoints(&path).unwrap();
        assert_eq!(back.points(), &points);
        assert_eq!(back.jacobians(), &jac);
    }

    #[test]
    fn gade_weights_round_trip_with_norms() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gade.npz");
        let mut weights = GadeWeights::identity(4, 7);
        weights.avg_norms = AvgNorms {
            shape: 2.5,
            expression: 0.5,
            scale: 1.5,
        };
        weights.w_gamma[[2, 3]] = 0.25;
        save_gade_weights(&path, &weights).unwrap();
        let back = load_gade_weights(&path).unwrap();
        assert_eq!(back.w_gamma, weights.w_gamma);
        assert_eq!(back.b_gamma, weights.b_gamma);
        assert_eq!(back.avg_norms, weights.avg_norms);
    }

    #[test]
    fn png_round_trips_quantized_values_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.png");
        // Values on the u8 grid survive the round trip bit for bit.
        let img = Array3::from_shape_fn((5, 7, 3), |(i, j, c)| {
            ((i * 31 + j * 11 + c * 77) % 256) as f64 / 255.0
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_png_keeps_one_channel() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = Array3::from_shape_fn((4, 6, 1), |(i, j, _)| ((i * 40 + j) % 256) as f64 / 255.0);
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.dim(), (4, 6, 1));
        assert_eq!(back, img);
    }

    #[test]
    fn out_of_range_values_clamp_on_save() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clamp.png");
        let img = array![[[1.7, -0.3, 0.5]]];
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back[[0, 0, 0]], 1.0);
        assert_eq!(back[[0, 0, 1]], 0.0);
    }

    #[test]
    fn npy_arrays_round_trip() {
        let dir = tempdir().unwrap();
        let p2 = dir.path().join("a2.npy");
        let p3 = dir.path().join("a3.npy");
        let a2 = array![[1.0, 2.0], [3.0, 4.0]];
        let a3 = Array3::from_shape_fn((2, 3, 2), |(i, j, k)| (i + 10 * j + 100 * k) as f64);
        save_npy2(&p2, &a2).unwrap();
        save_npy3(&p3, &a3).unwrap();
        assert_eq!(load_npy2(&p2).unwrap(), a2);
        assert_eq!(load_npy3(&p3).unwrap(), a3);
    }

    #[test]
    fn params_json_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut p = ParamSet::neutral(2, 3, 2);
        p.shape = array![0.25, -0.5];
        p.camera_scale = 1.75;
        save_params(&path, &p).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.shape, p.shape);
        assert_eq!(back.expression, p.expression);
        assert_eq!(back.pose, p.pose);
        assert_eq!(back.camera_scale, p.camera_scale);
        assert_eq!(back.camera_translation, p.camera_translation);
    }

    #[test]
    fn missing_and_corrupt_files_error_cleanly() {
        let dir = tempdir().unwrap();
        let missing = dir.path().join("nope.npz");
        assert!(matches!(load_model(&missing), Err(Error::Io { .. })));
        let garbage = dir.path().join("bad.npz");
        std::fs::write(&garbage, b"definitely not a zip").unwrap();
        assert!(matches!(load_model(&garbage), Err(Error::FileFormat { .. })));
        let missing_npy = dir.path().join("nope.npy");
        assert!(load_npy2(&missing_npy).is_err());
    }
}
