//! Fits the parametric hand to target skeletons.
//!
//! The objective is the sum of three terms: squared Euclidean distance
//! between the regressed skeleton of the posed mesh and the target over
//! all 63 coordinates, a squared-norm shape regularizer, and the mesh
//! Laplacian energy of the posed mesh. Minimization is plain fixed-step
//! gradient descent, `x_{t+1} = x_t - step * grad`, with the quaternion
//! renormalized after every step and its gradient projected onto the unit
//! sphere's tangent space. Gradients are analytic (reverse-mode through
//! the similarity, skinning and kinematic chain) and are checked against
//! central finite differences in the acceptance suite.
//!
//! The descent itself runs in nondimensionalized coordinates: lengths are
//! measured in units of a fixed characteristic hand scale so that one
//! step size works across parameter blocks whose millimeter gradients
//! differ by orders of magnitude (the default step size assumes
//! model-scale coordinates, not millimeters). Equivalently, the update
//! applies a fixed per-block diagonal preconditioner in mm coordinates.
//! The reported objective trace is always the millimeter-scale objective.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Frame, Skeleton, JOINT_COUNT};
use crate::hand::{
    bone_joint, bone_parent, quat_matrix, rodrigues, skew, HandParams, TemplateMesh,
    ARTIC_DIM, BONE_COUNT, PARAM_DIM, SHAPE_DIM,
};

/// Characteristic length (mm) defining the descent's internal units.
const LENGTH_SCALE_MM: f64 = 35.0;

/// Fixed-step descent configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub shape_reg_weight: f64,
    pub laplacian_weight: f64,
    /// Step for the finite-difference gradient oracle used in tests.
    pub fd_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            step_size: 1e-3,
            iterations: 3000,
            shape_reg_weight: 1.0,
            laplacian_weight: 1.0,
            fd_step: 1e-5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(FitError::InvalidConfig("step_size must be finite and positive".into()));
        }
        if self.iterations == 0 {
            return Err(FitError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) || !self.fd_step.is_finite() {
            return Err(FitError::InvalidConfig("fd_step must be finite and positive".into()));
        }
        for (name, w) in [("shape_reg_weight", self.shape_reg_weight), ("laplacian_weight", self.laplacian_weight)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(FitError::InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("objective became non-finite at iteration {iteration} (step size too large for this template scale)")]
    NonFiniteObjective { iteration: usize },
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
}

/// Result of one fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: HandParams,
    /// Mean joint error (mm) between the fitted skeleton and the target.
    pub final_skeleton_error: f64,
    /// Millimeter-scale objective at every iterate (length iterations+1).
    pub objective_trace: Vec<f64>,
    /// Index into the trace of the returned (best-objective) iterate.
    pub best_iteration: usize,
}

struct EvalOutput {
    e_data: f64,
    e_shape: f64,
    e_lap: f64,
    /// Gradient of data + laplacian_weight * laplacian terms (mm scale).
    /// The shape regularizer's gradient (2 * weight * s) is added by
    /// callers so the descent can scale the blocks independently.
    grad: Option<[f64; PARAM_DIM]>,
}

const Q_OFF: usize = SHAPE_DIM;
const T_OFF: usize = SHAPE_DIM + 4;
const L_OFF: usize = SHAPE_DIM + 7;
const A_OFF: usize = SHAPE_DIM + 8;

/// Evaluates the objective terms (and optionally the combined
/// data+Laplacian gradient) at a packed parameter vector. The quaternion
/// block is normalized internally, so the gradient lives in the unit
/// sphere's tangent space.
fn evaluate(
    tpl: &TemplateMesh,
    packed: &[f64; PARAM_DIM],
    target: &Skeleton,
    laplacian_weight: f64,
    joint_basis: &[[Vector3<f64>; SHAPE_DIM]; JOINT_COUNT],
    want_grad: bool,
) -> EvalOutput {
    let n = tpl.vertex_count();
    let shape = &packed[..SHAPE_DIM];
    let qn = (packed[Q_OFF..Q_OFF + 4].iter().map(|v| v * v).sum::<f64>()).sqrt();
    if qn < 1e-12 || packed.iter().any(|v| !v.is_finite()) {
        return EvalOutput { e_data: f64::NAN, e_shape: f64::NAN, e_lap: f64::NAN, grad: None };
    }
    let q = [packed[Q_OFF] / qn, packed[Q_OFF + 1] / qn, packed[Q_OFF + 2] / qn, packed[Q_OFF + 3] / qn];
    let t = Vector3::new(packed[T_OFF], packed[T_OFF + 1], packed[T_OFF + 2]);
    let scale = packed[L_OFF].exp();
    let mut artic = [0.0; ARTIC_DIM];
    artic.copy_from_slice(&packed[A_OFF..]);

    // Forward pass.
    let shaped: Vec<Vector3<f64>> = tpl
        .vertices()
        .iter()
        .zip(tpl.shape_basis())
        .map(|(v, basis)| {
            let mut p = *v;
            for (k, dir) in basis.iter().enumerate() {
                p += dir * shape[k];
            }
            p
        })
        .collect();
    let rest = tpl.regress_vertices(&shaped);
    let bones = crate::hand::bone_transforms(&rest, &artic);
    let rq = quat_matrix(&q);
    let posed: Vec<Vector3<f64>> = shaped
        .iter()
        .zip(tpl.skin())
        .map(|(v, row)| {
            let mut p = Vector3::zeros();
            for &(bone, w) in row {
                let (a, b) = bones[bone];
                p += (a * v + b) * w;
            }
            p
        })
        .collect();
    let out: Vec<Vector3<f64>> = posed.iter().map(|p| rq * p * scale + t).collect();

    let regressed = tpl.regress_vertices(&out);
    let mut residual = [Vector3::zeros(); JOINT_COUNT];
    let mut e_data = 0.0;
    for j in 0..JOINT_COUNT {
        residual[j] = regressed[j] - target.joint(j);
        e_data += residual[j].norm_squared();
    }
    let lap = crate::hand::laplacian_apply(tpl, &out);
    let e_lap: f64 = lap.iter().map(|r| r.norm_squared()).sum();
    let e_shape: f64 = shape.iter().map(|s| s * s).sum();

    if !want_grad {
        return EvalOutput { e_data, e_shape, e_lap, grad: None };
    }

    // Cotangent on the output vertices from the data term...
    let mut gout = vec![Vector3::zeros(); n];
    for (j, row) in tpl.regressor().iter().enumerate() {
        let r2 = residual[j] * 2.0;
        for &(v, w) in row {
            gout[v] += r2 * w;
        }
    }
    // ...plus the Laplacian term: 2 * L^T L out, with L^T applied sparsely.
    if laplacian_weight != 0.0 {
        let neighbors = tpl.neighbors();
        for i in 0..n {
            let mut z = lap[i];
            for &j in &neighbors[i] {
                let dj = neighbors[j as usize].len() as f64;
                z -= lap[j as usize] / dj;
            }
            gout[i] += z * (2.0 * laplacian_weight);
        }
    }

    let mut grad = [0.0; PARAM_DIM];

    // Global similarity block.
    let mut g_t = Vector3::zeros();
    let mut g_l = 0.0;
    let mut m_rot = Matrix3::zeros();
    let mut gposed = vec![Vector3::zeros(); n];
    let rq_t = rq.transpose();
    for i in 0..n {
        let gi = gout[i];
        g_t += gi;
        g_l += gi.dot(&(out[i] - t));
        m_rot += gi * posed[i].transpose();
        gposed[i] = rq_t * gi * scale;
    }
    m_rot *= scale;
    let dq = quat_partials(&q);
    let mut g_q = [0.0; 4];
    for (a, d) in dq.iter().enumerate() {
        g_q[a] = d.component_mul(&m_rot).sum();
    }
    let radial: f64 = (0..4).map(|a| g_q[a] * q[a]).sum();
    for a in 0..4 {
        grad[Q_OFF + a] = g_q[a] - radial * q[a];
    }
    grad[T_OFF] = g_t.x;
    grad[T_OFF + 1] = g_t.y;
    grad[T_OFF + 2] = g_t.z;
    grad[L_OFF] = g_l;

    // Skinning block: accumulate bone adjoints and the direct vertex path.
    let mut a_adj = [Matrix3::zeros(); BONE_COUNT];
    let mut b_adj = [Vector3::zeros(); BONE_COUNT];
    let mut gshaped = vec![Vector3::zeros(); n];
    for i in 0..n {
        let gp = gposed[i];
        for &(bone, w) in &tpl.skin()[i] {
            let (a, _) = bones[bone];
            a_adj[bone] += gp * (shaped[i] * w).transpose();
            b_adj[bone] += gp * w;
            gshaped[i] += a.transpose() * gp * w;
        }
    }

    // Kinematic chain, leaves first. Rotation centers are the shaped rest
    // joints, so their adjoints feed the shape gradient as well.
    let mut j_adj = [Vector3::zeros(); JOINT_COUNT];
    for bone in (1..BONE_COUNT).rev() {
        let parent = bone_parent(bone);
        let joint_idx = bone_joint(bone);
        let joint = rest[joint_idx];
        let (a_par, _) = bones[parent];
        let (a_cur, _) = bones[bone];
        let base = (bone - 1) * 3;
        let r = rodrigues(&[artic[base], artic[base + 1], artic[base + 2]]);

        let b_bar = b_adj[bone];
        a_adj[bone] -= b_bar * joint.transpose();
        let r_bar = a_par.transpose() * a_adj[bone];
        j_adj[joint_idx] += (a_par - a_cur).transpose() * b_bar;
        a_adj[parent] += a_adj[bone] * r.transpose() + b_bar * joint.transpose();
        b_adj[parent] += b_bar;

        let dr = rodrigues_partials(&[artic[base], artic[base + 1], artic[base + 2]]);
        for c in 0..3 {
            grad[A_OFF + base + c] = r_bar.component_mul(&dr[c]).sum();
        }
    }

    // Shape block: direct skinning path plus rotation-center path.
    for k in 0..SHAPE_DIM {
        let mut g = 0.0;
        for i in 0..n {
            g += gshaped[i].dot(&tpl.shape_basis()[i][k]);
        }
        for (j, adj) in j_adj.iter().enumerate() {
            g += adj.dot(&joint_basis[j][k]);
        }
        grad[k] = g;
    }

    EvalOutput { e_data, e_shape, e_lap, grad: Some(grad) }
}

/// Millimeter-scale objective value for explicit parameters.
pub fn objective(params: &HandParams, target: &Skeleton, tpl: &TemplateMesh, cfg: &FitConfig) -> f64 {
    let jb = tpl.regressed_shape_basis();
    let out = evaluate(tpl, &params.pack(), target, cfg.laplacian_weight, &jb, false);
    out.e_data + cfg.shape_reg_weight * out.e_shape + cfg.laplacian_weight * out.e_lap
}

/// Analytic gradient of [`objective`] over the 63 packed parameters. The
/// quaternion block is the tangent-space gradient at the (unit) rotation.
pub fn gradient(params: &HandParams, target: &Skeleton, tpl: &TemplateMesh, cfg: &FitConfig) -> [f64; PARAM_DIM] {
    let jb = tpl.regressed_shape_basis();
    let packed = params.pack();
    let out = evaluate(tpl, &packed, target, cfg.laplacian_weight, &jb, true);
    let mut grad = out.grad.unwrap_or([f64::NAN; PARAM_DIM]);
    for k in 0..SHAPE_DIM {
        grad[k] += 2.0 * cfg.shape_reg_weight * packed[k];
    }
    grad
}

/// Default initialization: neutral parameters with the translation chosen
/// so the model wrist starts on the target wrist.
pub fn default_init(target: &Skeleton, tpl: &TemplateMesh) -> HandParams {
    let wrist = tpl.rest_joints()[crate::data::WRIST];
    HandParams::neutral().with_translation(target.wrist() - wrist)
}

/// Fits the hand model to a target skeleton from [`default_init`].
pub fn fit_default(target: &Skeleton, tpl: &TemplateMesh, cfg: &FitConfig) -> Result<FitResult, FitError> {
    fit(target, &default_init(target, tpl), tpl, cfg)
}

/// Fits the hand model to a target skeleton from an explicit init.
pub fn fit(
    target: &Skeleton,
    init: &HandParams,
    tpl: &TemplateMesh,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    cfg.validate()?;
    let jb = tpl.regressed_shape_basis();
    let inv = 1.0 / LENGTH_SCALE_MM;
    let block_factor = {
        let mut f = [inv * inv; PARAM_DIM];
        // Translation is itself a length: its nondimensional step works
        // out to the plain millimeter gradient step.
        f[T_OFF] = 1.0;
        f[T_OFF + 1] = 1.0;
        f[T_OFF + 2] = 1.0;
        f
    };

    let mut x = init.pack();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, x, 0usize);
    for iter in 0..=cfg.iterations {
        let want_grad = iter < cfg.iterations;
        let e = evaluate(tpl, &x, target, cfg.laplacian_weight, &jb, want_grad);
        let obj = e.e_data + cfg.shape_reg_weight * e.e_shape + cfg.laplacian_weight * e.e_lap;
        trace.push(obj);
        if !obj.is_finite() {
            return Err(FitError::NonFiniteObjective { iteration: iter });
        }
        if obj < best.0 {
            best = (obj, x, iter);
        }
        if let Some(grad) = e.grad {
            let mut step = [0.0; PARAM_DIM];
            for i in 0..PARAM_DIM {
                step[i] = block_factor[i] * grad[i];
            }
            // The shape coefficients are dimensionless, so their
            // regularizer gradient is applied without the length-scale
            // factor that the data and Laplacian terms pick up.
            for k in 0..SHAPE_DIM {
                step[k] += 2.0 * cfg.shape_reg_weight * x[k];
            }
            for i in 0..PARAM_DIM {
                x[i] -= cfg.step_size * step[i];
            }
            let qn = (x[Q_OFF..Q_OFF + 4].iter().map(|v| v * v).sum::<f64>()).sqrt();
            if qn > 1e-12 {
                for a in 0..4 {
                    x[Q_OFF + a] /= qn;
                }
            }
        }
    }

    let params = HandParams::unpack(&best.1)
        .map_err(|_| FitError::NonFiniteObjective { iteration: best.2 })?;
    let fitted = crate::hand::forward_skeleton(tpl, &params);
    let final_skeleton_error = (0..JOINT_COUNT)
        .map(|j| (fitted.joint(j) - target.joint(j)).norm())
        .sum::<f64>()
        / JOINT_COUNT as f64;
    Ok(FitResult { params, final_skeleton_error, objective_trace: trace, best_iteration: best.2 })
}

/// Fits every frame independently from the default init; per-frame
/// failures are collected, not fail-fast. Parallel and sequential runs
/// produce identical results.
pub fn batch_fit(
    frames: &[Frame],
    tpl: &TemplateMesh,
    cfg: &FitConfig,
) -> Vec<Result<FitResult, FitError>> {
    frames
        .par_iter()
        .map(|f| fit_default(&f.skeleton, tpl, cfg))
        .collect()
}

/// Partial derivatives of the unit-quaternion rotation matrix with respect
/// to the four quaternion components (unconstrained; project onto the
/// tangent space for the sphere-constrained gradient).
pub(crate) fn quat_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Partial derivatives of the Rodrigues rotation with respect to the
/// axis-angle vector.
pub(crate) fn rodrigues_partials(a: &[f64; 3]) -> [Matrix3<f64>; 3] {
    let v = Vector3::from(*a);
    let theta2 = v.norm_squared();
    if theta2 < 1e-14 {
        return [
            skew(&Vector3::new(1.0, 0.0, 0.0)),
            skew(&Vector3::new(0.0, 1.0, 0.0)),
            skew(&Vector3::new(0.0, 0.0, 1.0)),
        ];
    }
    let r = rodrigues(a);
    let eye = Matrix3::identity();
    std::array::from_fn(|i| {
        let e = Vector3::from_fn(|k, _| if k == i { 1.0 } else { 0.0 });
        let w = (v * a[i] + v.cross(&((eye - r) * e))) / theta2;
        skew(&w) * r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::{build_default_template, forward_skeleton, GLOBAL_DIM};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tpl() -> TemplateMesh {
        crate::hand::default_template()
    }

    fn random_params(rng: &mut ChaCha8Rng) -> HandParams {
        let shape: [f64; SHAPE_DIM] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let mut c = [0.0; GLOBAL_DIM];
        for v in c.iter_mut().take(4) {
            *v = rng.random_range(-1.0..1.0);
        }
        if c.iter().take(4).map(|v| v * v).sum::<f64>() < 1e-3 {
            c[0] = 1.0;
        }
        c[4] = rng.random_range(-30.0..30.0);
        c[5] = rng.random_range(-30.0..30.0);
        c[6] = rng.random_range(250.0..450.0);
        c[7] = rng.random_range(-0.2..0.2);
        let artic: [f64; ARTIC_DIM] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
        HandParams::try_new(shape, c, artic).unwrap()
    }

    fn random_target(rng: &mut ChaCha8Rng) -> Skeleton {
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for j in joints.iter_mut() {
            j[0] = rng.random_range(-80.0..80.0);
            j[1] = rng.random_range(-80.0..80.0);
            j[2] = rng.random_range(250.0..450.0);
        }
        Skeleton::from_joints(joints)
    }

    fn fd_gradient(
        tpl: &TemplateMesh,
        params: &HandParams,
        target: &Skeleton,
        cfg: &FitConfig,
    ) -> [f64; PARAM_DIM] {
        let x = params.pack();
        let h = cfg.fd_step;
        std::array::from_fn(|i| {
            let mut plus = x;
            plus[i] += h;
            let mut minus = x;
            minus[i] -= h;
            let op = objective(&HandParams::unpack(&plus).unwrap(), target, tpl, cfg);
            let om = objective(&HandParams::unpack(&minus).unwrap(), target, tpl, cfg);
            (op - om) / (2.0 * h)
        })
    }

    /// Hand-like articulated instance: per-finger flexion with small
    /// abduction and off-axis noise, a global rotation up to ~40 degrees,
    /// and a wrist somewhere in the working volume.
    fn selffit_instance(rng: &mut ChaCha8Rng) -> HandParams {
        let mut params = HandParams::neutral();
        let palm_n = crate::hand::canonical_palm_normal();
        for finger in crate::data::Finger::ALL {
            let axis = crate::hand::flexion_axis(finger);
            for (level, max_flex) in [(0usize, 0.8f64), (1, 1.0), (2, 0.7)] {
                let flex = rng.random_range(-0.1..max_flex);
                let mut rot = axis * flex;
                if level == 0 {
                    rot += palm_n * rng.random_range(-0.12..0.12);
                }
                rot += Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                );
                params = params.with_joint_rotation(finger, level, rot, rot.norm());
            }
        }
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let half: f64 = rng.random_range(0.0..0.35);
        let mut c = [half.cos(), axis.x * half.sin(), axis.y * half.sin(), axis.z * half.sin(), 0.0, 0.0, 0.0, 0.0];
        c[4] = rng.random_range(-40.0..40.0);
        c[5] = rng.random_range(-40.0..40.0);
        c[6] = rng.random_range(280.0..420.0);
        c[7] = rng.random_range(-0.15..0.15);
        HandParams::try_new([0.0; SHAPE_DIM], c, *params.artic()).unwrap()
    }

    #[test]
    fn quaternion_partials_match_finite_differences() {
        let q = {
            let raw: [f64; 4] = [0.4, -0.3, 0.6, 0.2];
            let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n]
        };
        let parts = quat_partials(&q);
        let h = 1e-6;
        for a in 0..4 {
            let mut qp = q;
            qp[a] += h;
            let mut qm = q;
            qm[a] -= h;
            let fd = (quat_matrix(&qp) - quat_matrix(&qm)) / (2.0 * h);
            for i in 0..3 {
                for j in 0..3 {
                    assert_relative_eq!(parts[a][(i, j)], fd[(i, j)], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn rodrigues_partials_match_finite_differences() {
        for a in [[0.7, -0.3, 0.4], [1e-9, 0.0, 0.0], [2.5, 1.0, -0.7]] {
            let parts = rodrigues_partials(&a);
            let h = 1e-6;
            for c in 0..3 {
                let mut ap = a;
                ap[c] += h;
                let mut am = a;
                am[c] -= h;
                let fd = (rodrigues(&ap) - rodrigues(&am)) / (2.0 * h);
                for i in 0..3 {
                    for j in 0..3 {
                        assert_relative_eq!(parts[c][(i, j)], fd[(i, j)], epsilon = 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn objective_is_sum_of_independent_terms() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&mut rng);
        let target = random_target(&mut rng);
        let cfg = FitConfig { shape_reg_weight: 0.7, laplacian_weight: 1.3, ..FitConfig::default() };

        let mesh = crate::hand::forward(&tpl, &params);
        let skel = crate::hand::regress_skeleton(&tpl, &mesh);
        let data: f64 = (0..JOINT_COUNT)
            .map(|j| (skel.joint(j) - target.joint(j)).norm_squared())
            .sum();
        let shape: f64 = params.shape().iter().map(|s| s * s).sum();
        let lap = crate::hand::laplacian_energy(&tpl, &mesh);
        let expect = data + cfg.shape_reg_weight * shape + cfg.laplacian_weight * lap;
        assert_relative_eq!(objective(&params, &target, &tpl, &cfg), expect, epsilon = 1e-9);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = FitConfig { shape_reg_weight: 0.9, laplacian_weight: 1.1, ..FitConfig::default() };
        for _ in 0..3 {
            let params = random_params(&mut rng);
            let target = random_target(&mut rng);
            let g = gradient(&params, &target, &tpl, &cfg);
            let fd = fd_gradient(&tpl, &params, &target, &cfg);
            for i in 0..PARAM_DIM {
                let denom = 1.0f64.max(g[i].abs()).max(fd[i].abs());
                assert!(
                    ((g[i] - fd[i]) / denom).abs() < 1e-4,
                    "coordinate {i}: analytic {} vs fd {}",
                    g[i],
                    fd[i]
                );
            }
        }
    }

    #[test]
    fn shape_regularizer_gradient_is_2s() {
        // With the data residual at zero and the Laplacian disabled, the
        // only remaining term is the shape regularizer.
        let tpl = tpl();
        let params = HandParams::neutral().with_shape([0.3, -0.2, 0.1, 0.0, 0.5, -0.4, 0.2, 0.1, -0.1, 0.25]);
        let target = forward_skeleton(&tpl, &params);
        let cfg = FitConfig { laplacian_weight: 0.0, ..FitConfig::default() };
        let g = gradient(&params, &target, &tpl, &cfg);
        for k in 0..SHAPE_DIM {
            assert_relative_eq!(g[k], 2.0 * params.shape()[k], epsilon = 1e-9);
        }
        for v in &g[SHAPE_DIM..] {
            assert!(v.abs() < 1e-9, "non-shape gradient should vanish, got {v}");
        }
    }

    #[test]
    fn stationary_point_has_constant_trace() {
        let tpl = tpl();
        let axis = crate::hand::flexion_axis(crate::data::Finger::Middle);
        let p_star = HandParams::neutral()
            .with_translation(Vector3::new(10.0, -5.0, 320.0))
            .with_joint_rotation(crate::data::Finger::Middle, 1, axis, 0.6);
        let target = forward_skeleton(&tpl, &p_star);
        let cfg = FitConfig { laplacian_weight: 0.0, iterations: 50, ..FitConfig::default() };
        let res = fit(&target, &p_star, &tpl, &cfg).unwrap();
        let first = res.objective_trace[0];
        for v in &res.objective_trace {
            assert!((v - first).abs() < 1e-9, "trace drifted: {first} -> {v}");
        }
        assert!(res.final_skeleton_error < 1e-6);

        let g = gradient(&p_star, &target, &tpl, &cfg);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm at stationary point: {norm}");
    }


    #[test]
    fn diag_selffit_trace() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p_star = selffit_instance(&mut rng);
        let target = forward_skeleton(&tpl, &p_star);
        let res = fit_default(&target, &tpl, &FitConfig::default()).unwrap();
        for k in [0usize, 10, 50, 100, 300, 500, 1000, 1500, 2000, 2500, 3000] {
            eprintln!("obj[{k}] = {:.6}", res.objective_trace[k]);
        }
        let fitted = forward_skeleton(&tpl, &res.params);
        for j in 0..JOINT_COUNT {
            eprintln!("joint {j:2}: err {:.3} mm", (fitted.joint(j) - target.joint(j)).norm());
        }
        let neutral_mesh = crate::hand::forward(&tpl, &HandParams::neutral());
        eprintln!("lap(neutral) = {:.3}", crate::hand::laplacian_energy(&tpl, &neutral_mesh));
        let star_mesh = crate::hand::forward(&tpl, &p_star);
        eprintln!("lap(p*)      = {:.3}", crate::hand::laplacian_energy(&tpl, &star_mesh));
        let fit_mesh = crate::hand::forward(&tpl, &res.params);
        eprintln!("lap(fit)     = {:.3}", crate::hand::laplacian_energy(&tpl, &fit_mesh));
        eprintln!("obj(p*)      = {:.3}", objective(&p_star, &target, &tpl, &FitConfig::default()));
        eprintln!("obj(fit)     = {:.3}", objective(&res.params, &target, &tpl, &FitConfig::default()));
        let ps = p_star.pack();
        let pf = res.params.pack();
        eprintln!("shape*  {:?}", &ps[..10]);
        eprintln!("shape^  {:?}", &pf[..10]);
        eprintln!("quat*   {:?}", &ps[10..14]);
        eprintln!("quat^   {:?}", &pf[10..14]);
        eprintln!("trans*  {:?}", &ps[14..17]);
        eprintln!("trans^  {:?}", &pf[14..17]);
        eprintln!("scale*  {} scale^ {}", ps[17], pf[17]);
        for b in 0..15 {
            let i = 18 + b * 3;
            eprintln!("a{b:2}  * [{:+.3} {:+.3} {:+.3}]  ^ [{:+.3} {:+.3} {:+.3}]",
                ps[i], ps[i+1], ps[i+2], pf[i], pf[i+1], pf[i+2]);
        }
        panic!("diag");
    }

    #[test]
    fn self_fit_recovers_target_skeleton() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..3 {
            let p_star = selffit_instance(&mut rng);
            let target = forward_skeleton(&tpl, &p_star);
            let res = fit_default(&target, &tpl, &FitConfig::default()).unwrap();
            assert!(
                res.final_skeleton_error < 1.0,
                "trial {trial}: self-fit error {} mm (best iteration {})",
                res.final_skeleton_error,
                res.best_iteration
            );
            assert!(res.objective_trace.last().unwrap() < &res.objective_trace[0]);
        }
    }

    #[test]
    fn huge_step_size_diverges_quickly() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = forward_skeleton(&tpl, &random_params(&mut rng));
        let cfg = FitConfig { step_size: 1e3, ..FitConfig::default() };
        match fit_default(&target, &tpl, &cfg) {
            Err(FitError::NonFiniteObjective { iteration }) => {
                assert!(iteration <= 50, "diverged too slowly: iteration {iteration}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn batch_fit_matches_sequential_and_collects_per_frame() {
        let tpl = tpl();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = FitConfig { iterations: 40, ..FitConfig::default() };
        let frames: Vec<Frame> = (0..4)
            .map(|i| Frame {
                frame_id: format!("f{i}"),
                skeleton: forward_skeleton(&tpl, &random_params(&mut rng)),
                subject_id: "s".into(),
                object_id: None,
                intrinsics: None,
                sequence_id: None,
                time_index: None,
            })
            .collect();
        let batch = batch_fit(&frames, &tpl, &cfg);
        for (frame, res) in frames.iter().zip(&batch) {
            let solo = fit_default(&frame.skeleton, &tpl, &cfg).unwrap();
            let res = res.as_ref().unwrap();
            assert_eq!(res.objective_trace, solo.objective_trace);
            assert_eq!(res.params, solo.params);
        }
    }
}
