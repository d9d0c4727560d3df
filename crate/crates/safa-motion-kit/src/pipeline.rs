//! File-level pipelines: self-reenactment and relative motion transfer
//! over fixture archives, plus a synthetic asset generator so everything
//! runs without external downloads.
//!
//! Each phase runs under a stage tag (load-assets, fit, render, motion,
//! fusion, warp, gade, attention, write) so failures name the phase that
//! produced them. Outputs are PNG for images and NPY for tensors; reports
//! carry no timestamps or absolute paths, so a rerun with identical inputs
//! writes byte-identical bundles.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::assets;
use crate::camera::{
    bilinear_sample, render_3d_motion, render_normal_map, render_reenactment, AttributeImage,
};
use crate::error::{stage, Error, Result};
use crate::fitting::{fit_3dmm, FitOptions, FitReport, LandmarkSet};
use crate::flow_vis::visualize_flow;
use crate::generator::{
    contextual_attention, gade_apply, gade_modulation, normalize_params, normalized_dim,
    GadeWeights,
};
use crate::grid::ImageGrid;
use crate::metrics;
use crate::model::{
    decode, make_toy_sphere_model, select_landmarks, vertex_normals, MorphableModel, ParamSet,
};
use crate::motion::{
    all_affine_motions, fuse_dense_motion, gaussian_heatmap_diff, normal_z_heatmap,
    softmax_masks, warp, KeypointSet, MaskStack, MotionField, OcclusionMap,
};
use crate::transfer::{
    pose_distance, relative_affine, relative_params, select_reference_frame, PoseDistance,
};

fn default_grid() -> [usize; 2] {
    [256, 256]
}

fn default_keypoints() -> usize {
    10
}

fn default_sigma() -> f64 {
    0.01
}

fn default_patch() -> usize {
    3
}

fn default_attention_scale() -> f64 {
    10.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a pipeline run needs, read from one JSON file. Relative
/// paths are resolved against the config file's directory on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub source_image: PathBuf,
    pub source_landmarks: PathBuf,
    pub source_keypoints: PathBuf,
    /// Driving inputs for `reenact`.
    #[serde(default)]
    pub driving_landmarks: Option<PathBuf>,
    #[serde(default)]
    pub driving_keypoints: Option<PathBuf>,
    /// Frame list for `transfer`.
    #[serde(default)]
    pub driving_sequence: Option<PathBuf>,
    pub mask_logits: PathBuf,
    pub occlusion_gade: PathBuf,
    pub occlusion_attention: PathBuf,
    pub gade_weights: PathBuf,
    #[serde(default = "default_grid")]
    pub grid: [usize; 2],
    #[serde(default = "default_keypoints")]
    pub keypoints: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_attention_scale")]
    pub attention_scale: f64,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn resolve_path(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        let joined = base.join(p.as_path());
        *p = joined;
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by the config"),
        ))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: PipelineConfig = assets::load_json(path)?;
        if let Some(base) = path.parent() {
            config.resolve(base);
        }
        config.validate()?;
        Ok(config)
    }

    /// Rewrite every relative input path against `base`. The output
    /// directory resolves against the current working directory instead,
    /// so `--output` behaves like any other CLI path.
    pub fn resolve(&mut self, base: &Path) {
        resolve_path(&mut self.model, base);
        resolve_path(&mut self.source_image, base);
        resolve_path(&mut self.source_landmarks, base);
        resolve_path(&mut self.source_keypoints, base);
        if let Some(p) = &mut self.driving_landmarks {
            resolve_path(p, base);
        }
        if let Some(p) = &mut self.driving_keypoints {
            resolve_path(p, base);
        }
        if let Some(p) = &mut self.driving_sequence {
            resolve_path(p, base);
        }
        resolve_path(&mut self.mask_logits, base);
        resolve_path(&mut self.occlusion_gade, base);
        resolve_path(&mut self.occlusion_attention, base);
        resolve_path(&mut self.gade_weights, base);
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return Err(Error::arg(format!(
                "grid must be at least 1x1, got {:?}",
                self.grid
            )));
        }
        if self.keypoints == 0 {
            return Err(Error::arg("keypoint count must be at least 1".to_string()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::arg(format!(
                "sigma must be positive and finite, got {}",
                self.sigma
            )));
        }
        if self.patch == 0 {
            return Err(Error::arg("patch size must be at least 1".to_string()));
        }
        if !self.attention_scale.is_finite() {
            return Err(Error::arg("attention scale must be finite".to_string()));
        }
        self.fit.validate()?;
        for path in [
            &self.model,
            &self.source_image,
            &self.source_landmarks,
            &self.source_keypoints,
            &self.mask_logits,
            &self.occlusion_gade,
            &self.occlusion_attention,
            &self.gade_weights,
        ] {
            require_exists(path)?;
        }
        for path in [
            &self.driving_landmarks,
            &self.driving_keypoints,
            &self.driving_sequence,
        ]
        .into_iter()
        .flatten()
        {
            require_exists(path)?;
        }
        Ok(())
    }

    pub fn image_grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(self.grid[0], self.grid[1])
    }
}

/// One driving frame of a transfer sequence: landmarks to fit and the
/// frame's predicted keypoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FramePaths {
    pub landmarks: PathBuf,
    pub keypoints: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrivingSequence {
    pub frames: Vec<FramePaths>,
}

impl DrivingSequence {
    pub fn load(path: &Path) -> Result<Self> {
        let mut seq: DrivingSequence = assets::load_json(path)?;
        if let Some(base) = path.parent() {
            for frame in &mut seq.frames {
                resolve_path(&mut frame.landmarks, base);
                resolve_path(&mut frame.keypoints, base);
            }
        }
        Ok(seq)
    }
}

/// Landmark files are n x 2 (unit confidence) or n x 3 with per-landmark
/// confidence in the third column.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let arr = assets::load_npy2(path)?;
    match arr.ncols() {
        2 => LandmarkSet::new(arr),
        3 => {
            let points = arr.slice(s![.., 0..2]).to_owned();
            let confidence = arr.column(2).to_owned();
            LandmarkSet::with_confidence(points, confidence)
        }
        other => Err(Error::dim(format!(
            "landmarks must have 2 or 3 columns, got {other} in {}",
            path.display()
        ))),
    }
}

/// Occlusion maps come as grayscale PNG or as a 2-D NPY, at one quarter of
/// the working resolution.
pub fn load_occlusion(path: &Path, quarter: &ImageGrid) -> Result<OcclusionMap> {
    let values: Array2<f64> = if path.extension().is_some_and(|e| e == "npy") {
        assets::load_npy2(path)?
    } else {
        let img = assets::load_png(path)?;
        let (h, w, c) = img.dim();
        if c != 1 {
            return Err(Error::file(
                path,
                format!("occlusion maps must be grayscale, got {c} channels"),
            ));
        }
        img.into_shape_with_order((h, w))
            .map_err(|e| Error::dim(e.to_string()))?
    };
    if values.dim() != (quarter.height(), quarter.width()) {
        return Err(Error::dim(format!(
            "occlusion map {} is {}x{}, expected the quarter grid {}x{}",
            path.display(),
            values.nrows(),
            values.ncols(),
            quarter.height(),
            quarter.width()
        )));
    }
    OcclusionMap::new(values)
}

struct CommonAssets {
    model: MorphableModel,
    source_image: Array3<f64>,
    source_landmarks: LandmarkSet,
    source_keypoints: KeypointSet,
    mask_logits: Array3<f64>,
    occlusion_gade: OcclusionMap,
    occlusion_attention: OcclusionMap,
    gade: GadeWeights,
    grid: ImageGrid,
    quarter: ImageGrid,
}

fn load_common(config: &PipelineConfig) -> Result<CommonAssets> {
    let grid = config.image_grid()?;
    let quarter = grid.quarter();
    let model = assets::load_model(&config.model)?;
    let source_image = assets::load_png(&config.source_image)?;
    let (h, w, channels) = source_image.dim();
    if (h, w) != (grid.height(), grid.width()) {
        return Err(Error::dim(format!(
            "source image is {h}x{w}, config grid is {}x{}",
            grid.height(),
            grid.width()
        )));
    }
    let source_landmarks = load_landmarks(&config.source_landmarks)?;
    let source_keypoints = assets::load_keypoints(&config.source_keypoints)?;
    if source_keypoints.len() != config.keypoints {
        return Err(Error::dim(format!(
            "source keypoint file has {} keypoints, config says {}",
            source_keypoints.len(),
            config.keypoints
        )));
    }
    let mask_logits = assets::load_npy3(&config.mask_logits)?;
    let expected_channels = 2 + config.keypoints;
    if mask_logits.dim() != (expected_channels, grid.height(), grid.width()) {
        return Err(Error::dim(format!(
            "mask logits are {:?}, expected ({expected_channels}, {}, {})",
            mask_logits.dim(),
            grid.height(),
            grid.width()
        )));
    }
    let occlusion_gade = load_occlusion(&config.occlusion_gade, &quarter)?;
    let occlusion_attention = load_occlusion(&config.occlusion_attention, &quarter)?;
    let gade = assets::load_gade_weights(&config.gade_weights)?;
    if gade.channels() != channels {
        return Err(Error::dim(format!(
            "modulation weights cover {} channels, source image has {channels}",
            gade.channels()
        )));
    }
    if gade.param_dim() != normalized_dim(&model) {
        return Err(Error::dim(format!(
            "modulation weights expect {} parameters, model provides {}",
            gade.param_dim(),
            normalized_dim(&model)
        )));
    }
    Ok(CommonAssets {
        model,
        source_image,
        source_landmarks,
        source_keypoints,
        mask_logits,
        occlusion_gade,
        occlusion_attention,
        gade,
        grid,
        quarter,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FitSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&FitReport> for FitSummary {
    fn from(report: &FitReport) -> Self {
        FitSummary {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            iterations: report.iterations,
            converged: report.converged,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImageMetrics {
    pub l1: f64,
    /// Capped so that identical images stay representable in JSON.
    pub psnr: f64,
    pub ssim: f64,
}

/// Unit-peak metrics for the [0, 1] images the pipeline exchanges.
pub fn image_metrics(a: &Array3<f64>, b: &Array3<f64>) -> Result<ImageMetrics> {
    image_metrics_with_peak(a, b, 1.0)
}

pub fn image_metrics_with_peak(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        l1: metrics::l1_distance(a, b)?,
        psnr: metrics::psnr(a, b, peak)?.min(metrics::PSNR_CAP),
        ssim: metrics::ssim(a, b)?,
    })
}

#[derive(Debug, Serialize)]
pub struct ReenactReport {
    pub source_fit: FitSummary,
    pub driving_fit: FitSummary,
    pub source_params: ParamSet,
    pub driving_params: ParamSet,
    /// Driving expression, pose, and camera on the source identity; the
    /// geometry every rendered artifact uses.
    pub reenact_params: ParamSet,
    pub attention_fallback: bool,
    pub warped_vs_source: ImageMetrics,
}

#[derive(Debug, Serialize)]
pub struct TransferReport {
    pub reference_index: usize,
    pub source_fit: FitSummary,
    pub frames: Vec<FrameReport>,
}

#[derive(Debug, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub fit: FitSummary,
    pub pose_distance_to_source: f64,
    pub transferred_params: ParamSet,
    pub attention_fallback: bool,
    pub warped_vs_source: ImageMetrics,
}

/// Resample an H x W x C image at the pixel centers of `target`.
fn sample_at_grid(image: &Array3<f64>, target: &ImageGrid) -> Array3<f64> {
    let c = image.dim().2;
    let mut out = Array3::<f64>::zeros((target.height(), target.width(), c));
    let view: ArrayView3<f64> = image.view();
    let mut buf = vec![0.0; c];
    for i in 0..target.height() {
        for j in 0..target.width() {
            let [x, y] = target.pixel_center(i, j);
            bilinear_sample(&view, x, y, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                out[[i, j, k]] = *v;
            }
        }
    }
    out
}

/// Motion field at `target` resolution, bilinearly interpolating the
/// full-resolution sampling map.
fn downsample_field(field: &MotionField, target: &ImageGrid) -> Result<MotionField> {
    MotionField::new(sample_at_grid(field.map(), target))
}

struct GeneratedFeatures {
    warped_image: Array3<f64>,
    features_warped: Array3<f64>,
    features_gade: Array3<f64>,
    features_attention: Array3<f64>,
    attention_fallback: bool,
}

/// Warp the image and the quarter-resolution feature copy, then run the
/// occlusion-aware modulation and attention repair conditioned on the
/// animated parameters.
fn generate(
    assets: &CommonAssets,
    fused: &MotionField,
    animated: &ParamSet,
    config: &PipelineConfig,
) -> Result<GeneratedFeatures> {
    let (warped_image, features_warped) = stage("warp", || {
        let warped = warp(&assets.source_image, fused)?;
        let features = sample_at_grid(&assets.source_image, &assets.quarter);
        let quarter_field = downsample_field(fused, &assets.quarter)?;
        let features_warped = warp(&features, &quarter_field)?;
        Ok((warped, features_warped))
    })?;
    let features_gade = stage("gade", || {
        let v = normalize_params(animated, &assets.gade.avg_norms)?;
        let (gamma, delta) = gade_modulation(&assets.gade, &v)?;
        gade_apply(&features_warped, &gamma, &delta, &assets.occlusion_gade)
    })?;
    let attention = stage("attention", || {
        contextual_attention(
            &features_gade,
            &assets.occlusion_attention,
            config.patch,
            config.attention_scale,
        )
    })?;
    Ok(GeneratedFeatures {
        warped_image,
        features_warped,
        features_gade,
        features_attention: attention.features,
        attention_fallback: attention.fallback,
    })
}

const MASK_PALETTE: [[f64; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.60, 0.90],
    [0.95, 0.75, 0.10],
    [0.20, 0.80, 0.30],
    [0.70, 0.30, 0.90],
    [0.95, 0.45, 0.10],
    [0.15, 0.85, 0.80],
    [0.90, 0.30, 0.60],
    [0.55, 0.75, 0.15],
    [0.35, 0.40, 0.95],
    [0.80, 0.60, 0.45],
    [0.45, 0.85, 0.55],
];

/// Argmax-channel visualization: background dark gray, rendered 3D motion
/// white, each affine channel a palette color. Ties go to the lower
/// channel.
pub fn mask_composite(masks: &MaskStack) -> Array3<f64> {
    let (c, h, w) = masks.as_array().dim();
    let mut out = Array3::<f64>::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let mut best = 0;
            let mut best_v = masks.as_array()[[0, i, j]];
            for ch in 1..c {
                let v = masks.as_array()[[ch, i, j]];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            let color = match best {
                0 => [0.25, 0.25, 0.25],
                1 => [1.0, 1.0, 1.0],
                k => MASK_PALETTE[(k - 2) % MASK_PALETTE.len()],
            };
            for ch in 0..3 {
                out[[i, j, ch]] = color[ch];
            }
        }
    }
    out
}

fn to_rgb(image: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = image.dim();
    if c == 3 {
        return image.clone();
    }
    Array3::from_shape_fn((h, w, 3), |(i, j, _)| image[[i, j, 0]])
}

fn splat_cross(out: &mut Array3<f64>, grid: &ImageGrid, p: [f64; 2], color: [f64; 3]) {
    let [u, v] = grid.continuous_position(p[0], p[1]);
    let (cj, ci) = (u.round() as i64, v.round() as i64);
    let arm = 2i64;
    for d in -arm..=arm {
        for (i, j) in [(ci + d, cj), (ci, cj + d)] {
            if i >= 0 && j >= 0 && (i as usize) < out.dim().0 && (j as usize) < out.dim().1 {
                for c in 0..3 {
                    out[[i as usize, j as usize, c]] = color[c];
                }
            }
        }
    }
}

/// Source image with source keypoints drawn red and driving keypoints
/// green.
pub fn keypoint_overlay(
    image: &Array3<f64>,
    source: &KeypointSet,
    driving: &KeypointSet,
    grid: &ImageGrid,
) -> Array3<f64> {
    let mut out = to_rgb(image);
    for k in 0..source.len() {
        splat_cross(&mut out, grid, source.point(k), [0.95, 0.15, 0.15]);
    }
    for k in 0..driving.len() {
        splat_cross(&mut out, grid, driving.point(k), [0.15, 0.90, 0.25]);
    }
    out
}

/// Rendered normals mapped to RGB as (n + 1) / 2 where covered, black
/// elsewhere.
pub fn normal_image(rendered: &AttributeImage) -> Array3<f64> {
    let (h, w) = (rendered.height(), rendered.width());
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        if rendered.coverage[[i, j]] > 0.0 {
            (rendered.data[[i, j, c]] + 1.0) / 2.0
        } else {
            0.0
        }
    })
}

fn gray_image(values: &Array2<f64>) -> Array3<f64> {
    let (h, w) = values.dim();
    Array3::from_shape_fn((h, w, 1), |(i, j, _)| values[[i, j]])
}

/// K per-keypoint Gaussian difference heatmaps plus the rendered-motion
/// normal-z difference, stacked as (K + 1, H, W).
fn heatmap_stack(
    source_kp: &KeypointSet,
    driving_kp: &KeypointSet,
    normal_driving: &AttributeImage,
    normal_source: &AttributeImage,
    sigma: f64,
    grid: &ImageGrid,
) -> Result<Array3<f64>> {
    let k = source_kp.len();
    let mut out = Array3::<f64>::zeros((k + 1, grid.height(), grid.width()));
    for n in 0..k {
        let map = gaussian_heatmap_diff(source_kp.point(n), driving_kp.point(n), sigma, grid)?;
        out.slice_mut(s![n, .., ..]).assign(&map);
    }
    let nz = normal_z_heatmap(normal_driving, normal_source)?;
    out.slice_mut(s![k, .., ..]).assign(&nz);
    Ok(out)
}

fn write_field(dir: &Path, stem: &str, field: &MotionField) -> Result<()> {
    assets::save_npy3(&dir.join(format!("{stem}.npy")), field.map())?;
    let png = visualize_flow(field, None)?;
    assets::save_png(&dir.join(format!("{stem}.png")), &png)
}

/// Self-reenactment: fit both frames, animate the source identity with the
/// driving expression, pose, and camera, fuse the rendered and keypoint
/// motions, and warp. Writes the full intermediate bundle into
/// `config.output`.
pub fn run_reenact(config: &PipelineConfig) -> Result<ReenactReport> {
    config.validate()?;
    let (assets_bundle, driving_landmarks, driving_keypoints) = stage("load-assets", || {
        let common = load_common(config)?;
        let lm_path = config.driving_landmarks.as_ref().ok_or_else(|| {
            Error::arg("reenact needs driving_landmarks in the config".to_string())
        })?;
        let kp_path = config.driving_keypoints.as_ref().ok_or_else(|| {
            Error::arg("reenact needs driving_keypoints in the config".to_string())
        })?;
        let landmarks = load_landmarks(lm_path)?;
        let keypoints = assets::load_keypoints(kp_path)?;
        if keypoints.len() != common.source_keypoints.len() {
            return Err(Error::dim(format!(
                "driving keypoint file has {} keypoints, source has {}",
                keypoints.len(),
                common.source_keypoints.len()
            )));
        }
        Ok((common, landmarks, keypoints))
    })?;
    let a = &assets_bundle;

    let (source_fit, driving_fit) = stage("fit", || {
        let source = fit_3dmm(&a.model, &a.source_landmarks, None, &config.fit)?;
        let driving = fit_3dmm(&a.model, &driving_landmarks, None, &config.fit)?;
        Ok((source, driving))
    })?;
    let source_params = source_fit.params.clone();
    let driving_params = driving_fit.params.clone();
    // The animated geometry: driving motion on the source identity.
    let animated = ParamSet {
        shape: source_params.shape.clone(),
        expression: driving_params.expression.clone(),
        pose: driving_params.pose.clone(),
        camera_scale: driving_params.camera_scale,
        camera_translation: driving_params.camera_translation,
    };

    let (reenact_render, normal_source, normal_driving) = stage("render", || {
        let render =
            render_reenactment(&a.model, &source_params, &animated, &a.source_image, &a.grid)?;
        let n_source = render_normal_map(&a.model, &source_params, &a.grid)?;
        let n_driving = render_normal_map(&a.model, &animated, &a.grid)?;
        Ok((render, n_source, n_driving))
    })?;

    let (motion_3d, coverage_3d, affine, heatmaps) = stage("motion", || {
        let (field, coverage) = render_3d_motion(&a.model, &source_params, &animated, &a.grid)?;
        let affine = all_affine_motions(&a.source_keypoints, &driving_keypoints, &a.grid)?;
        let heatmaps = heatmap_stack(
            &a.source_keypoints,
            &driving_keypoints,
            &normal_driving,
            &normal_source,
            config.sigma,
            &a.grid,
        )?;
        Ok((field, coverage, affine, heatmaps))
    })?;

    let (masks, fused) = stage("fusion", || {
        let masks = softmax_masks(&a.mask_logits)?;
        let fused = fuse_dense_motion(&masks, &motion_3d, &affine, &a.grid)?;
        Ok((masks, fused))
    })?;

    let generated = generate(a, &fused, &animated, config)?;
    let warped_vs_source = image_metrics(&generated.warped_image, &a.source_image)?;

    let report = ReenactReport {
        source_fit: FitSummary::from(&source_fit),
        driving_fit: FitSummary::from(&driving_fit),
        source_params,
        driving_params,
        reenact_params: animated,
        attention_fallback: generated.attention_fallback,
        warped_vs_source,
    };

    stage("write", || {
        let dir = &config.output;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        assets::save_png(
            &dir.join("keypoints_overlay.png"),
            &keypoint_overlay(&a.source_image, &a.source_keypoints, &driving_keypoints, &a.grid),
        )?;
        assets::save_png(
            &dir.join("occlusion_gade.png"),
            &gray_image(a.occlusion_gade.values()),
        )?;
        assets::save_png(
            &dir.join("occlusion_attention.png"),
            &gray_image(a.occlusion_attention.values()),
        )?;
        assets::save_png(&dir.join("reenactment.png"), &reenact_render.data)?;
        assets::save_png(&dir.join("normal_source.png"), &normal_image(&normal_source))?;
        assets::save_png(
            &dir.join("normal_driving.png"),
            &normal_image(&normal_driving),
        )?;
        assets::save_npy3(&dir.join("heatmaps.npy"), &heatmaps)?;
        write_field(dir, "motion_3d", &motion_3d)?;
        assets::save_npy2(&dir.join("motion_3d_coverage.npy"), &coverage_3d)?;
        assets::save_npy3(&dir.join("masks.npy"), masks.as_array())?;
        assets::save_png(&dir.join("masks.png"), &mask_composite(&masks))?;
        write_field(dir, "dense_motion", &fused)?;
        assets::save_npy3(&dir.join("warped.npy"), &generated.warped_image)?;
        assets::save_png(&dir.join("warped.png"), &generated.warped_image)?;
        assets::save_npy3(&dir.join("features_warped.npy"), &generated.features_warped)?;
        assets::save_npy3(&dir.join("features_gade.npy"), &generated.features_gade)?;
        assets::save_npy3(
            &dir.join("features_attention.npy"),
            &generated.features_attention,
        )?;
        assets::save_json(&dir.join("report.json"), &report)?;
        Ok(())
    })?;
    Ok(report)
}

struct FrameInputs {
    landmarks: LandmarkSet,
    keypoints: KeypointSet,
}

fn transfer_frame(
    a: &CommonAssets,
    config: &PipelineConfig,
    source_params: &ParamSet,
    reference_params: &ParamSet,
    reference_keypoints: &KeypointSet,
    frame_params: &ParamSet,
    frame_keypoints: &KeypointSet,
    dir: &Path,
) -> Result<(ParamSet, bool, ImageMetrics)> {
    let transferred = relative_params(source_params, reference_params, frame_params)?;
    let (motion_3d, affine) = stage("motion", || {
        let (field, _) = render_3d_motion(&a.model, source_params, &transferred, &a.grid)?;
        let mut affine = Vec::with_capacity(a.source_keypoints.len());
        for k in 0..a.source_keypoints.len() {
            affine.push(relative_affine(
                a.source_keypoints.point(k),
                reference_keypoints.point(k),
                &reference_keypoints.jacobian(k),
                frame_keypoints.point(k),
                &frame_keypoints.jacobian(k),
                &a.grid,
            )?);
        }
        Ok((field, affine))
    })?;
    let (masks, fused) = stage("fusion", || {
        let masks = softmax_masks(&a.mask_logits)?;
        let fused = fuse_dense_motion(&masks, &motion_3d, &affine, &a.grid)?;
        Ok((masks, fused))
    })?;
    let generated = generate(a, &fused, &transferred, config)?;
    let metrics = image_metrics(&generated.warped_image, &a.source_image)?;
    stage("write", || {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        assets::save_params(&dir.join("params.json"), &transferred)?;
        write_field(dir, "motion_3d", &motion_3d)?;
        write_field(dir, "dense_motion", &fused)?;
        assets::save_png(&dir.join("masks.png"), &mask_composite(&masks))?;
        assets::save_npy3(&dir.join("warped.npy"), &generated.warped_image)?;
        assets::save_png(&dir.join("warped.png"), &generated.warped_image)?;
        Ok(())
    })?;
    Ok((transferred, generated.attention_fallback, metrics))
}

/// Relative motion transfer over a driving sequence: fit every frame, pick
/// the reference nearest the source pose, then animate the source with each
/// frame's deltas. Frames run in parallel, at most `jobs` at a time when
/// given.
pub fn run_transfer(config: &PipelineConfig, jobs: Option<usize>) -> Result<TransferReport> {
    config.validate()?;
    let (a, frames) = stage("load-assets", || {
        let common = load_common(config)?;
        let seq_path = config.driving_sequence.as_ref().ok_or_else(|| {
            Error::arg("transfer needs driving_sequence in the config".to_string())
        })?;
        let sequence = DrivingSequence::load(seq_path)?;
        if sequence.frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut frames = Vec::with_capacity(sequence.frames.len());
        for frame in &sequence.frames {
            let landmarks = load_landmarks(&frame.landmarks)?;
            let keypoints = assets::load_keypoints(&frame.keypoints)?;
            if keypoints.len() != common.source_keypoints.len() {
                return Err(Error::dim(format!(
                    "frame keypoint file {} has {} keypoints, source has {}",
                    frame.keypoints.display(),
                    keypoints.len(),
                    common.source_keypoints.len()
                )));
            }
            frames.push(FrameInputs {
                landmarks,
                keypoints,
            });
        }
        Ok((common, frames))
    })?;

    let run = |a: &CommonAssets, frames: &[FrameInputs]| -> Result<TransferReport> {
        use rayon::prelude::*;

        let source_fit = stage("fit", || {
            fit_3dmm(&a.model, &a.source_landmarks, None, &config.fit)
        })?;
        let source_params = source_fit.params.clone();
        let frame_fits: Vec<FitReport> = stage("fit", || {
            frames
                .par_iter()
                .map(|f| fit_3dmm(&a.model, &f.landmarks, None, &config.fit))
                .collect::<Result<Vec<_>>>()
        })?;
        let frame_params: Vec<ParamSet> = frame_fits.iter().map(|f| f.params.clone()).collect();
        let metric = PoseDistance::default();
        let reference_index = select_reference_frame(&source_params, &frame_params, &metric)?;
        let reference_params = frame_params[reference_index].clone();
        let reference_keypoints = &frames[reference_index].keypoints;

        let per_frame: Vec<(ParamSet, bool, ImageMetrics)> = frames
            .par_iter()
            .enumerate()
            .map(|(i, frame)| {
                let dir = config.output.join(format!("frame_{i:03}"));
                transfer_frame(
                    a,
                    config,
                    &source_params,
                    &reference_params,
                    reference_keypoints,
                    &frame_params[i],
                    &frame.keypoints,
                    &dir,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut frame_reports = Vec::with_capacity(frames.len());
        for (i, (transferred, fallback, metrics)) in per_frame.into_iter().enumerate() {
            frame_reports.push(FrameReport {
                index: i,
                fit: FitSummary::from(&frame_fits[i]),
                pose_distance_to_source: pose_distance(&source_params, &frame_params[i], &metric)?,
                transferred_params: transferred,
                attention_fallback: fallback,
                warped_vs_source: metrics,
            });
        }
        let report = TransferReport {
            reference_index,
            source_fit: FitSummary::from(&source_fit),
            frames: frame_reports,
        };
        stage("write", || {
            fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
            assets::save_json(&config.output.join("transfer_report.json"), &report)
        })?;
        Ok(report)
    };

    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::arg(format!("cannot build a {n}-thread pool: {e}")))?;
            pool.install(|| run(&a, &frames))
        }
        None => run(&a, &frames),
    }
}

/// Background logit large enough that the per-pixel softmax underflows to
/// an exact one-hot, which makes the fused field exactly the identity.
const TOY_BACKGROUND_LOGIT: f64 = 800.0;

/// Ground-truth parameters the synthetic source image is rendered with.
fn toy_truth_params() -> ParamSet {
    let mut p = ParamSet::neutral(3, 2, 2);
    p.shape = ndarray::array![0.25, -0.15, 0.10];
    p.expression = ndarray::array![0.20, -0.10];
    p.pose = ndarray::array![0.04, -0.07, 0.03, 0.12, 0.0, 0.0];
    p.camera_scale = 1.06;
    p.camera_translation = [0.02, -0.03];
    p
}

/// Write a complete synthetic asset set (model, source image, landmarks,
/// keypoints, masks, occlusions, modulation weights, a three-frame driving
/// sequence, and a ready-to-run config) into `dir`. Returns the config
/// path. The fixtures are the identity case: driving equals source, masks
/// select the background, occlusions are fully visible.
pub fn generate_toy_assets(dir: &Path, grid_size: [usize; 2], k: usize) -> Result<PathBuf> {
    if k == 0 {
        return Err(Error::arg("keypoint count must be at least 1".to_string()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = ImageGrid::new(grid_size[0], grid_size[1])?;
    let quarter = grid.quarter();

    let model = make_toy_sphere_model(20260823, 10, 12, (3, 2))?;
    assets::save_model(&dir.join("model.npz"), &model)?;

    let truth = toy_truth_params();
    assets::save_params(&dir.join("params.json"), &truth)?;

    let mesh = decode(&model, &truth)?;
    let camera = crate::camera::Camera::from(&truth);
    let normals = vertex_normals(&mesh);
    let colors = normals.mapv(|n| (n + 1.0) / 2.0);
    let rendered = crate::camera::rasterize(&mesh, &camera, &colors, &model.uv_face_mask, &grid)?;
    let mut source = Array3::<f64>::zeros((grid.height(), grid.width(), 3));
    for i in 0..grid.height() {
        for j in 0..grid.width() {
            if rendered.coverage[[i, j]] > 0.0 {
                for c in 0..3 {
                    source[[i, j, c]] = rendered.data[[i, j, c]];
                }
            } else {
                let fx = j as f64 / (grid.width() - 1).max(1) as f64;
                let fy = i as f64 / (grid.height() - 1).max(1) as f64;
                source[[i, j, 0]] = 0.10 + 0.20 * fx;
                source[[i, j, 1]] = 0.15 + 0.10 * fy;
                source[[i, j, 2]] = 0.30 + 0.15 * (1.0 - fy);
            }
        }
    }
    assets::save_png(&dir.join("source.png"), &source)?;

    let landmarks_3d = select_landmarks(&model, &mesh)?;
    let (landmarks_2d, _) = crate::camera::project(&landmarks_3d, &camera)?;
    assets::save_npy2(&dir.join("landmarks.npy"), &landmarks_2d)?;

    // Keypoints: landmark projections at an even stride, identity
    // jacobians. The same file serves source and driving, so every affine
    // candidate field is exactly the identity.
    let n_landmarks = landmarks_2d.nrows();
    let mut points = Array2::<f64>::zeros((k, 2));
    for i in 0..k {
        let row = (i * n_landmarks) / k;
        points[[i, 0]] = landmarks_2d[[row, 0]];
        points[[i, 1]] = landmarks_2d[[row, 1]];
    }
    let mut jacobians = Array3::<f64>::zeros((k, 2, 2));
    for i in 0..k {
        jacobians[[i, 0, 0]] = 1.0;
        jacobians[[i, 1, 1]] = 1.0;
    }
    let keypoints = KeypointSet::new(points, jacobians)?;
    assets::save_keypoints(&dir.join("keypoints.npz"), &keypoints)?;

    let mut logits = Array3::<f64>::zeros((2 + k, grid.height(), grid.width()));
    logits
        .slice_mut(s![0, .., ..])
        .fill(TOY_BACKGROUND_LOGIT);
    assets::save_npy3(&dir.join("mask_logits.npy"), &logits)?;

    let ones = Array3::<f64>::ones((quarter.height(), quarter.width(), 1));
    assets::save_png(&dir.join("occlusion_gade.png"), &ones)?;
    assets::save_png(&dir.join("occlusion_attention.png"), &ones)?;

    let gade = GadeWeights::identity(3, normalized_dim(&model));
    assets::save_gade_weights(&dir.join("gade.npz"), &gade)?;

    let sequence = DrivingSequence {
        frames: (0..3)
            .map(|_| FramePaths {
                landmarks: PathBuf::from("landmarks.npy"),
                keypoints: PathBuf::from("keypoints.npz"),
            })
            .collect(),
    };
    assets::save_json(&dir.join("driving_sequence.json"), &sequence)?;

    let config = PipelineConfig {
        model: PathBuf::from("model.npz"),
        source_image: PathBuf::from("source.png"),
        source_landmarks: PathBuf::from("landmarks.npy"),
        source_keypoints: PathBuf::from("keypoints.npz"),
        driving_landmarks: Some(PathBuf::from("landmarks.npy")),
        driving_keypoints: Some(PathBuf::from("keypoints.npz")),
        driving_sequence: Some(PathBuf::from("driving_sequence.json")),
        mask_logits: PathBuf::from("mask_logits.npy"),
        occlusion_gade: PathBuf::from("occlusion_gade.png"),
        occlusion_attention: PathBuf::from("occlusion_attention.png"),
        gade_weights: PathBuf::from("gade.npz"),
        grid: grid_size,
        keypoints: k,
        sigma: default_sigma(),
        patch: default_patch(),
        attention_scale: default_attention_scale(),
        fit: FitOptions {
            max_iterations: 120,
            stage_one_iterations: 20,
            ..FitOptions::default()
        },
        output: PathBuf::from("out"),
    };
    let config_path = dir.join("config.json");
    assets::save_json(&config_path, &config)?;
    Ok(config_path)
}
