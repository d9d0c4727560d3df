//! Landmark-based parameter fitting: a robust L1 reprojection objective
//! with quadratic shape and expression regularizers, minimized by damped
//! Gauss-Newton steps on an IRLS (Huber) approximation with analytic
//! Jacobians through blendshapes, pose correctives, the kinematic chain,
//! skinning, and the weak-perspective projection.
//!
//! The flat parameter vector is ordered (shape, expression, pose, scale,
//! translation); a step is accepted only if it strictly decreases the true
//! L1 objective, so the recorded loss trace is non-increasing.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::{
    add_blendshapes, chain_transforms, pose_feature, regress_from, select_landmarks,
    MorphableModel, ParamSet,
};
use crate::model::decode;
use crate::rotation::{rotation_from_axis_angle, rotation_partials};

/// Target 2D landmarks with per-landmark confidences.
#[derive(Clone, Debug)]
pub struct LandmarkSet {
    points: Array2<f64>,
    confidence: Array1<f64>,
}

impl LandmarkSet {
    /// Unit confidence for every landmark.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        LandmarkSet::with_confidence(points, Array1::ones(n))
    }

    pub fn with_confidence(points: Array2<f64>, confidence: Array1<f64>) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::dim(format!(
                "landmarks must be n x 2, got {:?}",
                points.shape()
            )));
        }
        if confidence.len() != points.nrows() {
            return Err(Error::dim(format!(
                "{} confidences for {} landmarks",
                confidence.len(),
                points.nrows()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("non-finite landmark coordinates".to_string()));
        }
        if confidence.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::arg(
                "landmark confidences must be finite and non-negative".to_string(),
            ));
        }
        if confidence.iter().all(|c| *c == 0.0) {
            return Err(Error::arg(
                "at least one landmark confidence must be positive".to_string(),
            ));
        }
        Ok(LandmarkSet { points, confidence })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn confidence(&self) -> &Array1<f64> {
        &self.confidence
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Weight of the squared shape-coefficient penalty.
    pub lambda_shape: f64,
    /// Weight of the squared expression-coefficient penalty.
    pub lambda_expr: f64,
    pub max_iterations: usize,
    pub damping_init: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Accepted-improvement threshold that declares convergence.
    pub loss_tolerance: f64,
    /// Huber corner of the smoothed L1 surrogate used for the step model.
    pub huber_delta: f64,
    /// Fit global rotation, scale, and translation first.
    pub staged: bool,
    pub stage_one_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda_shape: 1e-2,
            lambda_expr: 8e-3,
            max_iterations: 200,
            damping_init: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.1,
            loss_tolerance: 1e-10,
            huber_delta: 1e-3,
            staged: true,
            stage_one_iterations: 30,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_shape < 0.0 || self.lambda_expr < 0.0 {
            return Err(Error::arg(
                "regularizer weights must be non-negative".to_string(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::arg("max_iterations must be at least 1".to_string()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::arg("huber_delta must be positive".to_string()));
        }
        if !(self.damping_init > 0.0)
            || !(self.damping_increase > 1.0)
            || !(self.damping_decrease > 0.0)
            || !(self.damping_decrease < 1.0)
        {
            return Err(Error::arg(
                "damping schedule must satisfy init > 0, increase > 1, 0 < decrease < 1"
                    .to_string(),
            ));
        }
        if self.loss_tolerance < 0.0 {
            return Err(Error::arg("loss_tolerance must be non-negative".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub params: ParamSet,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Objective after every iteration, starting with the initial value;
    /// rejected steps repeat the previous entry.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn param_dim(model: &MorphableModel) -> usize {
    model.shape_dim() + model.expr_dim() + model.pose_dim() + 3
}

fn pack(params: &ParamSet) -> DVector<f64> {
    let na = params.shape.len();
    let nb = params.expression.len();
    let np = params.pose.len();
    let mut v = DVector::zeros(na + nb + np + 3);
    for (i, x) in params.shape.iter().enumerate() {
        v[i] = *x;
    }
    for (i, x) in params.expression.iter().enumerate() {
        v[na + i] = *x;
    }
    for (i, x) in params.pose.iter().enumerate() {
        v[na + nb + i] = *x;
    }
    v[na + nb + np] = params.camera_scale;
    v[na + nb + np + 1] = params.camera_translation[0];
    v[na + nb + np + 2] = params.camera_translation[1];
    v
}

fn unpack(model: &MorphableModel, v: &DVector<f64>) -> ParamSet {
    let na = model.shape_dim();
    let nb = model.expr_dim();
    let np = model.pose_dim();
    ParamSet {
        shape: Array1::from_iter((0..na).map(|i| v[i])),
        expression: Array1::from_iter((0..nb).map(|i| v[na + i])),
        pose: Array1::from_iter((0..np).map(|i| v[na + nb + i])),
        camera_scale: v[na + nb + np],
        camera_translation: [v[na + nb + np + 1], v[na + nb + np + 2]],
    }
}

fn check_landmark_count(model: &MorphableModel, landmarks: &LandmarkSet) -> Result<()> {
    if landmarks.len() != model.n_landmarks() {
        return Err(Error::dim(format!(
            "{} landmarks supplied but the model embeds {}",
            landmarks.len(),
            model.n_landmarks()
        )));
    }
    Ok(())
}

/// r_i = k_i - (s l_i + t) over the model's projected 3D landmarks.
pub fn reprojection_residuals(
    model: &MorphableModel,
    params: &ParamSet,
    landmarks: &LandmarkSet,
) -> Result<Array2<f64>> {
    check_landmark_count(model, landmarks)?;
    let mesh = decode(model, params)?;
    let l3 = select_landmarks(model, &mesh)?;
    let n = landmarks.len();
    let mut r = Array2::zeros((n, 2));
    for i in 0..n {
        for c in 0..2 {
            r[[i, c]] = landmarks.points()[[i, c]]
                - (params.camera_scale * l3[[i, c]] + params.camera_translation[c]);
        }
    }
    Ok(r)
}

/// True objective: sum_i c_i |r_i|_1 + lambda_shape |alpha|^2
/// + lambda_expr |beta|^2.
pub fn loss_3dmm(
    model: &MorphableModel,
    params: &ParamSet,
    landmarks: &LandmarkSet,
    options: &FitOptions,
) -> Result<f64> {
    options.validate()?;
    let r = reprojection_residuals(model, params, landmarks)?;
    let mut loss = 0.0;
    for i in 0..landmarks.len() {
        loss += landmarks.confidence()[i] * (r[[i, 0]].abs() + r[[i, 1]].abs());
    }
    loss += options.lambda_shape * params.shape.iter().map(|a| a * a).sum::<f64>();
    loss += options.lambda_expr * params.expression.iter().map(|b| b * b).sum::<f64>();
    Ok(loss)
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x * x / (2.0 * delta)
    } else {
        x.abs() - delta / 2.0
    }
}

fn huber_deriv(x: f64, delta: f64) -> f64 {
    (x / delta).clamp(-1.0, 1.0)
}

/// Huber-smoothed objective; differentiable everywhere, used to validate
/// the analytic gradient.
pub fn smoothed_loss(
    model: &MorphableModel,
    params: &ParamSet,
    landmarks: &LandmarkSet,
    options: &FitOptions,
) -> Result<f64> {
    options.validate()?;
    let r = reprojection_residuals(model, params, landmarks)?;
    let mut loss = 0.0;
    for i in 0..landmarks.len() {
        loss += landmarks.confidence()[i]
            * (huber(r[[i, 0]], options.huber_delta) + huber(r[[i, 1]], options.huber_delta));
    }
    loss += options.lambda_shape * params.shape.iter().map(|a| a * a).sum::<f64>();
    loss += options.lambda_expr * params.expression.iter().map(|b| b * b).sum::<f64>();
    Ok(loss)
}

/// Residuals and their analytic Jacobian. Row 2i of the Jacobian is the x
/// component of landmark i, row 2i + 1 the y component; columns follow the
/// flat parameter order (shape, expression, pose, scale, translation).
pub fn residual_jacobian(
    model: &MorphableModel,
    params: &ParamSet,
    landmarks: &LandmarkSet,
) -> Result<(Array2<f64>, Array2<f64>)> {
    params.validate_for(model)?;
    check_landmark_count(model, landmarks)?;
    let na = model.shape_dim();
    let nb = model.expr_dim();
    let k = model.n_joints();
    let d = param_dim(model);
    let n = landmarks.len();
    let s_cam = params.camera_scale;

    // Canonical geometry and chain state.
    let shaped_alpha = add_blendshapes(&model.template, &model.shape_basis, params.shape.view());
    let shaped = add_blendshapes(&shaped_alpha, &model.expr_basis, params.expression.view());
    let rotations: Vec<Matrix3<f64>> = (0..k)
        .map(|j| rotation_from_axis_angle(&params.joint_rotation(j)))
        .collect();
    let partials: Vec<[Matrix3<f64>; 3]> = (0..k)
        .map(|j| rotation_partials(&params.joint_rotation(j)))
        .collect();
    let feature = pose_feature(&rotations);
    let canonical = match &model.pose_corrective_basis {
        Some(basis) => add_blendshapes(&shaped, basis, feature.view()),
        None => shaped,
    };
    let joints = regress_from(model, &shaped_alpha);
    let (a_lin, c_off) = chain_transforms(&model.kinematic_parents, &rotations, &joints);

    // Only vertices referenced by landmark faces matter.
    let mut lverts: Vec<usize> = Vec::new();
    let mut slot_of = vec![usize::MAX; model.n_vertices()];
    for &fi in &model.landmark_faces {
        for m in 0..3 {
            let vi = model.faces[[fi as usize, m]] as usize;
            if slot_of[vi] == usize::MAX {
                slot_of[vi] = lverts.len();
                lverts.push(vi);
            }
        }
    }
    let x_can: Vec<Vector3<f64>> = lverts
        .iter()
        .map(|&vi| Vector3::new(canonical[[vi, 0]], canonical[[vi, 1]], canonical[[vi, 2]]))
        .collect();
    let posed: Vec<Vector3<f64>> = lverts
        .iter()
        .enumerate()
        .map(|(slot, &vi)| {
            let mut acc = Vector3::zeros();
            for j in 0..k {
                let w = model.blendweights[[vi, j]];
                if w != 0.0 {
                    acc += (a_lin[j] * x_can[slot] + c_off[j]) * w;
                }
            }
            acc
        })
        .collect();

    // 3D landmarks and residuals.
    let mut l3 = Array2::<f64>::zeros((n, 3));
    for i in 0..n {
        let fi = model.landmark_faces[i] as usize;
        for m in 0..3 {
            let vi = model.faces[[fi, m]] as usize;
            let p = posed[slot_of[vi]];
            let w = model.landmark_bary[[i, m]];
            l3[[i, 0]] += w * p.x;
            l3[[i, 1]] += w * p.y;
            l3[[i, 2]] += w * p.z;
        }
    }
    let mut residuals = Array2::zeros((n, 2));
    for i in 0..n {
        for c in 0..2 {
            residuals[[i, c]] = landmarks.points()[[i, c]]
                - (s_cam * l3[[i, c]] + params.camera_translation[c]);
        }
    }

    let mut jac = Array2::zeros((2 * n, d));
    let fill_column = |col: usize, dvert: &[Vector3<f64>], jac: &mut Array2<f64>| {
        for i in 0..n {
            let fi = model.landmark_faces[i] as usize;
            let mut dl = Vector3::zeros();
            for m in 0..3 {
                let vi = model.faces[[fi, m]] as usize;
                dl += model.landmark_bary[[i, m]] * dvert[slot_of[vi]];
            }
            jac[[2 * i, col]] = -s_cam * dl.x;
            jac[[2 * i + 1, col]] = -s_cam * dl.y;
        }
    };

    // Shape columns: blendshape displacement plus joint relocation.
    for a in 0..na {
        let basis_a = model.shape_basis.index_axis(Axis(2), a);
        let dj_arr = model.joint_regressor.dot(&basis_a);
        let dj: Vec<Vector3<f64>> = (0..k)
            .map(|j| Vector3::new(dj_arr[[j, 0]], dj_arr[[j, 1]], dj_arr[[j, 2]]))
            .collect();
        let mut dorigin = vec![Vector3::zeros(); k];
        let mut dc = vec![Vector3::zeros(); k];
        for j in 0..k {
            dorigin[j] = match model.kinematic_parents[j] {
                None => dj[j],
                Some(p) => dorigin[p] + a_lin[p] * (dj[j] - dj[p]),
            };
            dc[j] = dorigin[j] - a_lin[j] * dj[j];
        }
        let dvert: Vec<Vector3<f64>> = lverts
            .iter()
            .map(|&vi| {
                let dx = Vector3::new(basis_a[[vi, 0]], basis_a[[vi, 1]], basis_a[[vi, 2]]);
                let mut acc = Vector3::zeros();
                for j in 0..k {
                    let w = model.blendweights[[vi, j]];
                    if w != 0.0 {
                        acc += (a_lin[j] * dx + dc[j]) * w;
                    }
                }
                acc
            })
            .collect();
        fill_column(a, &dvert, &mut jac);
    }

    // Expression columns: pure blendshape displacement, joints unaffected.
    for b in 0..nb {
        let basis_b = model.expr_basis.index_axis(Axis(2), b);
        let dvert: Vec<Vector3<f64>> = lverts
            .iter()
            .map(|&vi| {
                let dx = Vector3::new(basis_b[[vi, 0]], basis_b[[vi, 1]], basis_b[[vi, 2]]);
                let mut acc = Vector3::zeros();
                for j in 0..k {
                    let w = model.blendweights[[vi, j]];
                    if w != 0.0 {
                        acc += (a_lin[j] * dx) * w;
                    }
                }
                acc
            })
            .collect();
        fill_column(na + b, &dvert, &mut jac);
    }

    // Pose columns: the rotation of joint jq propagates down its subtree
    // and, for non-root joints, perturbs the corrective blendshapes.
    for jq in 0..k {
        for aq in 0..3 {
            let col = na + nb + 3 * jq + aq;
            let dr = partials[jq][aq];
            let mut da = vec![Matrix3::zeros(); k];
            let mut dorigin = vec![Vector3::zeros(); k];
            let mut dc = vec![Vector3::zeros(); k];
            for j in 0..k {
                match model.kinematic_parents[j] {
                    None => {
                        if j == jq {
                            da[j] = dr;
                        }
                        // Root origin is the regressed joint, independent
                        // of pose.
                    }
                    Some(p) => {
                        da[j] = da[p] * rotations[j];
                        if j == jq {
                            da[j] += a_lin[p] * dr;
                        }
                        dorigin[j] = dorigin[p] + da[p] * (joints[j] - joints[p]);
                    }
                }
                dc[j] = dorigin[j] - da[j] * joints[j];
            }
            let dvert: Vec<Vector3<f64>> = lverts
                .iter()
                .enumerate()
                .map(|(slot, &vi)| {
                    let mut dx = Vector3::zeros();
                    if jq >= 1 {
                        if let Some(basis) = &model.pose_corrective_basis {
                            for e in 0..9 {
                                let coeff = dr[(e / 3, e % 3)];
                                if coeff != 0.0 {
                                    let idx = 9 * (jq - 1) + e;
                                    dx += coeff
                                        * Vector3::new(
                                            basis[[vi, 0, idx]],
                                            basis[[vi, 1, idx]],
                                            basis[[vi, 2, idx]],
                                        );
                                }
                            }
                        }
                    }
                    let mut acc = Vector3::zeros();
                    for j in 0..k {
                        let w = model.blendweights[[vi, j]];
                        if w != 0.0 {
                            acc += (da[j] * x_can[slot] + a_lin[j] * dx + dc[j]) * w;
                        }
                    }
                    acc
                })
                .collect();
            fill_column(col, &dvert, &mut jac);
        }
    }

    // Scale and translation columns.
    for i in 0..n {
        jac[[2 * i, d - 3]] = -l3[[i, 0]];
        jac[[2 * i + 1, d - 3]] = -l3[[i, 1]];
        jac[[2 * i, d - 2]] = -1.0;
        jac[[2 * i + 1, d - 1]] = -1.0;
    }
    Ok((residuals, jac))
}

/// Analytic gradient of [`smoothed_loss`].
pub fn smoothed_loss_gradient(
    model: &MorphableModel,
    params: &ParamSet,
    landmarks: &LandmarkSet,
    options: &FitOptions,
) -> Result<Array1<f64>> {
    options.validate()?;
    let (r, jac) = residual_jacobian(model, params, landmarks)?;
    let d = param_dim(model);
    let n = landmarks.len();
    let mut g = Array1::zeros(d);
    for i in 0..n {
        let c = landmarks.confidence()[i];
        for comp in 0..2 {
            let psi = c * huber_deriv(r[[i, comp]], options.huber_delta);
            let row = 2 * i + comp;
            for q in 0..d {
                g[q] += psi * jac[[row, q]];
            }
        }
    }
    let na = model.shape_dim();
    for a in 0..na {
        g[a] += 2.0 * options.lambda_shape * params.shape[a];
    }
    for b in 0..model.expr_dim() {
        g[na + b] += 2.0 * options.lambda_expr * params.expression[b];
    }
    Ok(g)
}

/// Minimize the landmark objective. Each iteration solves a damped,
/// IRLS-weighted normal system on the active parameters and accepts the
/// candidate only if the true L1 objective strictly decreases; rejections
/// raise the damping. With `staged` enabled the first
/// `stage_one_iterations` iterations only move global rotation, scale, and
/// translation.
pub fn fit_3dmm(
    model: &MorphableModel,
    landmarks: &LandmarkSet,
    init: Option<&ParamSet>,
    options: &FitOptions,
) -> Result<FitReport> {
    options.validate()?;
    check_landmark_count(model, landmarks)?;
    let mut current = match init {
        Some(p) => p.clone(),
        None => ParamSet::neutral_for(model),
    };
    current.validate_for(model)?;

    let na = model.shape_dim();
    let nb = model.expr_dim();
    let d = param_dim(model);
    let full: Vec<usize> = (0..d).collect();
    let mut stage_a: Vec<usize> = (na + nb..na + nb + 3).collect();
    stage_a.extend([d - 3, d - 2, d - 1]);

    let mut loss = loss_3dmm(model, &current, landmarks, options)?;
    if !loss.is_finite() {
        return Err(Error::FitDiverged {
            iterations: 0,
            last_loss: loss,
            last_params: Box::new(current),
        });
    }
    let initial_loss = loss;
    let mut trace = vec![loss];
    let mut mu = options.damping_init;
    let mut converged = false;
    let mut force_full = false;
    let mut iterations = 0;
    let mut was_stage_a = false;

    for iter in 0..options.max_iterations {
        iterations = iter + 1;
        let in_stage_a = options.staged && !force_full && iter < options.stage_one_iterations;
        if was_stage_a && !in_stage_a {
            // Damping tuned on the global subset says nothing about the
            // full system; a stalled stage A leaves mu huge, which would
            // make the first full step microscopic and trip the
            // small-improvement test long before the optimum.
            mu = options.damping_init;
        }
        was_stage_a = in_stage_a;
        let active = if in_stage_a { &stage_a } else { &full };
        let m = active.len();

        let (r, jac) = residual_jacobian(model, &current, landmarks)?;
        let n = landmarks.len();
        // IRLS weights: w = c * min(1/delta, 1/|r|) per residual component.
        let mut h = DMatrix::<f64>::zeros(m, m);
        let mut g = DVector::<f64>::zeros(m);
        for i in 0..n {
            let c = landmarks.confidence()[i];
            if c == 0.0 {
                continue;
            }
            for comp in 0..2 {
                let row = 2 * i + comp;
                let rv = r[[i, comp]];
                let w = c * (1.0 / options.huber_delta).min(1.0 / rv.abs());
                for (qi, &q) in active.iter().enumerate() {
                    let jq = jac[[row, q]];
                    if jq == 0.0 {
                        continue;
                    }
                    g[qi] += w * rv * jq;
                    for (pi, &p) in active.iter().enumerate().skip(qi) {
                        h[(qi, pi)] += w * jq * jac[[row, p]];
                    }
                }
            }
        }
        for qi in 0..m {
            for pi in (qi + 1)..m {
                h[(pi, qi)] = h[(qi, pi)];
            }
        }
        // Quadratic regularizers contribute to gradient and Hessian.
        for (qi, &q) in active.iter().enumerate() {
            if q < na {
                g[qi] += 2.0 * options.lambda_shape * current.shape[q];
                h[(qi, qi)] += 2.0 * options.lambda_shape;
            } else if q < na + nb {
                g[qi] += 2.0 * options.lambda_expr * current.expression[q - na];
                h[(qi, qi)] += 2.0 * options.lambda_expr;
            }
            h[(qi, qi)] += mu;
        }

        let mut accepted = false;
        if let Some(chol) = h.clone().cholesky() {
            let step = chol.solve(&(-&g));
            let mut vec = pack(&current);
            for (qi, &q) in active.iter().enumerate() {
                vec[q] += step[qi];
            }
            let candidate = unpack(model, &vec);
            let usable = candidate.camera_scale > 0.0
                && vec.iter().all(|x| x.is_finite());
            if usable {
                if let Ok(cand_loss) = loss_3dmm(model, &candidate, landmarks, options) {
                    if cand_loss.is_finite() && cand_loss < loss {
                        let improvement = loss - cand_loss;
                        current = candidate;
                        loss = cand_loss;
                        mu = (mu * options.damping_decrease).max(1e-15);
                        accepted = true;
                        trace.push(loss);
                        if !in_stage_a
                            && improvement < options.loss_tolerance * loss.max(1.0)
                        {
                            converged = true;
                            break;
                        }
                    }
                }
            }
        }
        if !accepted {
            trace.push(loss);
            mu *= options.damping_increase;
            if mu > 1e14 {
                if in_stage_a {
                    // Stage A stalled; move on to the full parameter set.
                    force_full = true;
                    mu = options.damping_init;
                } else {
                    break;
                }
            }
        }
    }

    Ok(FitReport {
        params: current,
        initial_loss,
        final_loss: loss,
        loss_trace: trace,
        iterations,
        converged,
    })
}
