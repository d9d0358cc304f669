//! Residuals and analytic Jacobians for the three error families of the
//! sliding-window cost: inverse-depth reprojection, 18-dim IMU-odometer
//! constraints, and the linear marginalization prior, plus the small prior
//! confining the (always unobservable) roll angle of the IMU-odometer
//! rotation.
//!
//! All rotation Jacobians are w.r.t. right-multiplied local increments.
//! Frame-state local order is `[δp, δv, δθ, δb_a, δb_ω]`.

use crate::camera::CameraModel;
use crate::geometry::{
    log_so3_quat, right_jacobian_inv_so3, right_jacobian_so3, skew, Mat3, MotionState, Rot3,
    RotQ, Vec3,
};
use crate::preint::{bias_correct, Preintegrated, PreintError};
use nalgebra::{DMatrix, DVector, Matrix4, SMatrix, Vector2, Vector4};
use std::collections::BTreeMap;
use thiserror::Error;

/// Camera-IMU and IMU-odometer rigid transforms.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub rbc: Rot3,
    pub pbc: Vec3,
    pub rbo: Rot3,
    pub pbo: Vec3,
}

impl Extrinsics {
    /// Identity transforms everywhere.
    pub fn identity() -> Self {
        Extrinsics {
            rbc: Rot3::identity(),
            pbc: Vec3::zeros(),
            rbo: Rot3::identity(),
            pbo: Vec3::zeros(),
        }
    }
}

/// Inverse-depth landmark anchored at the frame of its first observation.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: u64,
    pub anchor_frame: u64,
    /// Pixel coordinates of the anchoring observation.
    pub first_obs: (f64, f64),
    /// Inverse depth along the anchor ray (z-normalized), 1/m.
    pub inv_depth: f64,
}

pub const MIN_INV_DEPTH: f64 = 1e-4;
/// Transformed points closer than this to the image plane are rejected.
pub const MIN_FACTOR_DEPTH: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("reprojection target frame equals the anchor frame")]
    SameFrame,
    #[error("transformed point depth {0} below {MIN_FACTOR_DEPTH} m; residual invalid")]
    InvalidDepth(f64),
    #[error("pre-integration error: {0}")]
    Preint(#[from] PreintError),
    #[error("parameter block {0:?} missing from current values")]
    MissingBlock(BlockKey),
    #[error("block kind mismatch for {0:?}")]
    BlockMismatch(BlockKey),
}

// ---------------------------------------------------------------------------
// Parameter block identities shared with the solver.
// ---------------------------------------------------------------------------

/// Identity of one local parameter block of the sliding-window problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKey {
    FramePos(u64),
    FrameVel(u64),
    FrameAtt(u64),
    FrameBa(u64),
    FrameBw(u64),
    ExtRbcAtt,
    ExtPbc,
    ExtRboAtt,
    ExtPbo,
    Landmark(u64),
}

impl BlockKey {
    pub fn dim(&self) -> usize {
        match self {
            BlockKey::Landmark(_) => 1,
            _ => 3,
        }
    }

    pub fn frame(&self) -> Option<u64> {
        match self {
            BlockKey::FramePos(f)
            | BlockKey::FrameVel(f)
            | BlockKey::FrameAtt(f)
            | BlockKey::FrameBa(f)
            | BlockKey::FrameBw(f) => Some(*f),
            _ => None,
        }
    }
}

/// Value snapshot of one parameter block.
#[derive(Debug, Clone, Copy)]
pub enum BlockValue {
    Vector(Vec3),
    Rotation(RotQ),
    Scalar(f64),
}

impl BlockValue {
    /// Local difference `self ⊟ lin`: additive for vectors/scalars,
    /// `Log(lin⁻¹ · cur)` for rotations.
    pub fn local_diff(&self, lin: &BlockValue) -> Result<DVector<f64>, FactorError> {
        match (self, lin) {
            (BlockValue::Vector(a), BlockValue::Vector(b)) => {
                Ok(DVector::from_column_slice((a - b).as_slice()))
            }
            (BlockValue::Rotation(a), BlockValue::Rotation(b)) => {
                Ok(DVector::from_column_slice(log_so3_quat(&(b.inverse() * a)).as_slice()))
            }
            (BlockValue::Scalar(a), BlockValue::Scalar(b)) => {
                Ok(DVector::from_element(1, a - b))
            }
            _ => Err(FactorError::BlockMismatch(BlockKey::ExtPbc)),
        }
    }
}

// ---------------------------------------------------------------------------
// Marginalization prior
// ---------------------------------------------------------------------------

/// Linear prior `e^m = r^m − J^m δx` produced by marginalization.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub r: DVector<f64>,
    pub j: DMatrix<f64>,
    /// Ordered block descriptors with the linearization-point snapshot.
    pub blocks: Vec<(BlockKey, BlockValue)>,
}

impl MarginalPrior {
    pub fn local_dim(&self) -> usize {
        self.blocks.iter().map(|(k, _)| k.dim()).sum()
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.blocks.iter().any(|(k, _)| *k == key)
    }

    /// Evaluate the prior residual at the given current block values.
    /// The Jacobian is the constant `−J`.
    pub fn residual(
        &self,
        current: &BTreeMap<BlockKey, BlockValue>,
    ) -> Result<DVector<f64>, FactorError> {
        let mut delta = DVector::zeros(self.local_dim());
        let mut off = 0;
        for (key, lin) in &self.blocks {
            let cur = current.get(key).ok_or(FactorError::MissingBlock(*key))?;
            let d = cur.local_diff(lin)?;
            delta.rows_mut(off, d.len()).copy_from(&d);
            off += d.len();
        }
        Ok(&self.r - &self.j * delta)
    }

    pub fn cost(&self, current: &BTreeMap<BlockKey, BlockValue>) -> Result<f64, FactorError> {
        Ok(self.residual(current)?.norm_squared())
    }

    /// Scale `r^m` and `J^m` by `mu` (cost scales by `mu²`, zero-set unchanged).
    pub fn scale(&mut self, mu: f64) {
        self.r *= mu;
        self.j *= mu;
    }
}

// ---------------------------------------------------------------------------
// Reprojection factor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReprojEval {
    pub residual: Vector2<f64>,
    /// Columns `[δp_i, δθ_i]`.
    pub j_pose_i: SMatrix<f64, 2, 6>,
    pub j_pose_j: SMatrix<f64, 2, 6>,
    pub j_rbc: SMatrix<f64, 2, 3>,
    pub j_pbc: SMatrix<f64, 2, 3>,
    pub j_lambda: Vector2<f64>,
}

/// Reprojection residual of a landmark anchored at frame `i`, observed at
/// frame `j`, with analytic Jacobians. Unweighted; the caller applies `W^v`.
pub fn reproj_residual(
    cam: &CameraModel,
    state_i: &MotionState,
    state_j: &MotionState,
    ext: &Extrinsics,
    lm: &Landmark,
    obs_j: (f64, f64),
    frame_i: u64,
    frame_j: u64,
) -> Result<ReprojEval, FactorError> {
    if frame_i == frame_j {
        return Err(FactorError::SameFrame);
    }
    let rbc = *ext.rbc.matrix();
    let ri = *state_i.rot().matrix();
    let rj = *state_j.rot().matrix();

    let ray = cam.unproject(lm.first_obs.0, lm.first_obs.1);
    let p_ci = ray / lm.inv_depth;
    let p_bi = rbc * p_ci + ext.pbc;
    let p_w = ri * p_bi + state_i.p;
    let p_bj = rj.transpose() * (p_w - state_j.p);
    let p_cj = rbc.transpose() * (p_bj - ext.pbc);
    if p_cj.z <= MIN_FACTOR_DEPTH {
        return Err(FactorError::InvalidDepth(p_cj.z));
    }

    let (u, v) = cam.project(&p_cj);
    let residual = Vector2::new(u - obs_j.0, v - obs_j.1);

    let jp = cam.project_jacobian(&p_cj); // 2x3 in the top rows of a Mat3
    let jp2 = jp.fixed_view::<2, 3>(0, 0);

    let rbct_rjt = rbc.transpose() * rj.transpose();
    let d_pi = rbct_rjt;
    let d_ti = -rbct_rjt * ri * skew(&p_bi);
    let d_pj = -rbct_rjt;
    let d_tj = rbc.transpose() * skew(&p_bj);
    let d_rbc = -rbct_rjt * ri * rbc * skew(&p_ci) + skew(&p_cj);
    let d_pbc = rbc.transpose() * (rj.transpose() * ri - Mat3::identity());
    let d_lam = rbct_rjt * ri * rbc * (-ray / (lm.inv_depth * lm.inv_depth));

    let mut j_pose_i = SMatrix::<f64, 2, 6>::zeros();
    j_pose_i.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp2 * d_pi));
    j_pose_i.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp2 * d_ti));
    let mut j_pose_j = SMatrix::<f64, 2, 6>::zeros();
    j_pose_j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp2 * d_pj));
    j_pose_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp2 * d_tj));

    Ok(ReprojEval {
        residual,
        j_pose_i,
        j_pose_j,
        j_rbc: jp2 * d_rbc,
        j_pbc: jp2 * d_pbc,
        j_lambda: jp2 * d_lam,
    })
}

// ---------------------------------------------------------------------------
// IMU-odometer factor
// ---------------------------------------------------------------------------

pub type Vec18 = SMatrix<f64, 18, 1>;

#[derive(Debug, Clone)]
pub struct ImuOdoEval {
    /// Rows `[pos(3), vel(3), att(3), odo(3), Δb_a(3), Δb_ω(3)]`.
    pub residual: Vec18,
    /// Columns `[δp, δv, δθ, δb_a, δb_ω]` of frame k.
    pub j_state_k: SMatrix<f64, 18, 15>,
    pub j_state_k1: SMatrix<f64, 18, 15>,
    pub j_rbo: SMatrix<f64, 18, 3>,
    pub j_pbo: SMatrix<f64, 18, 3>,
}

/// Left-multiplication matrix of a quaternion `[w, x, y, z]`.
fn quat_left(q: &RotQ) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right-multiplication matrix: `quat_right(p) · q = q ⊗ p`.
fn quat_right(q: &RotQ) -> Matrix4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

fn quat_vec4(q: &RotQ) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// 18-dim IMU-odometer residual between consecutive frames with analytic
/// Jacobians, optionally whitened by `Σ^{-1/2}` (Cholesky of the
/// pre-integration covariance).
pub fn imuodo_residual(
    state_k: &MotionState,
    state_k1: &MotionState,
    p: &Preintegrated,
    ext: &Extrinsics,
    gravity_w: &Vec3,
    whiten: bool,
) -> Result<ImuOdoEval, FactorError> {
    let corr = bias_correct(p, &state_k.ba, &state_k.bw)?;
    let dt = p.dt_total;
    let rk = *state_k.rot().matrix();
    let rk1 = *state_k1.rot().matrix();
    let rkt = rk.transpose();

    // First-order η correction for the current R^b_o estimate.
    let dtheta_bo = log_so3_quat(&RotQ::from_rotation_matrix(
        &(p.lin_rbo.inverse() * ext.rbo),
    ));
    let eta = corr.eta + p.j_eta_rbo * dtheta_bo;

    let x4 = state_k1.p - state_k.p - state_k.v * dt - 0.5 * gravity_w * dt * dt;
    let x5 = state_k1.v - state_k.v - gravity_w * dt;
    let e4 = rkt * x4 - corr.alpha;
    let e5 = rkt * x5 - corr.beta;
    let q_rel = state_k.q.inverse() * state_k1.q; // q_k^{-1} ⊗ q_{k+1}
    let q_err = corr.gamma.inverse() * q_rel;
    let e6 = 2.0 * Vec3::new(q_err.i, q_err.j, q_err.k) * q_err.w.signum();
    let sgn = q_err.w.signum();
    let rel_rot = rkt * rk1;
    let e7 = rkt * (state_k1.p - state_k.p) + (rel_rot - Mat3::identity()) * ext.pbo - eta;
    let e8 = state_k1.ba - state_k.ba;
    let e9 = state_k1.bw - state_k.bw;

    let mut residual = Vec18::zeros();
    residual.fixed_rows_mut::<3>(0).copy_from(&e4);
    residual.fixed_rows_mut::<3>(3).copy_from(&e5);
    residual.fixed_rows_mut::<3>(6).copy_from(&e6);
    residual.fixed_rows_mut::<3>(9).copy_from(&e7);
    residual.fixed_rows_mut::<3>(12).copy_from(&e8);
    residual.fixed_rows_mut::<3>(15).copy_from(&e9);

    let mut jk = SMatrix::<f64, 18, 15>::zeros();
    let mut jk1 = SMatrix::<f64, 18, 15>::zeros();
    let mut j_rbo = SMatrix::<f64, 18, 3>::zeros();
    let mut j_pbo = SMatrix::<f64, 18, 3>::zeros();

    // Row block e4.
    jk.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rkt));
    jk.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rkt * dt));
    jk.fixed_view_mut::<3, 3>(0, 6).copy_from(&skew(&(rkt * x4)));
    jk.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-p.j_alpha_ba));
    jk.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-p.j_alpha_bw));
    jk1.fixed_view_mut::<3, 3>(0, 0).copy_from(&rkt);

    // Row block e5.
    jk.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rkt));
    jk.fixed_view_mut::<3, 3>(3, 6).copy_from(&skew(&(rkt * x5)));
    jk.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-p.j_beta_ba));
    jk.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-p.j_beta_bw));
    jk1.fixed_view_mut::<3, 3>(3, 3).copy_from(&rkt);

    // Row block e6: derivatives of 2·vec(γ'⁻¹ ⊗ q_k⁻¹ ⊗ q_{k+1}).
    let gamma_inv = corr.gamma.inverse();
    let l_gi_r_q = quat_left(&gamma_inv) * quat_right(&q_rel);
    jk.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(-sgn * l_gi_r_q.fixed_view::<3, 3>(1, 1).clone_owned()));
    let full = RotQ::new_normalize(
        nalgebra::Quaternion::from_parts(q_err.w, Vec3::new(q_err.i, q_err.j, q_err.k)),
    );
    let l_full = quat_left(&full);
    jk1.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(sgn * l_full.fixed_view::<3, 3>(1, 1).clone_owned()));
    let x_g = p.j_gamma_bw * (state_k.bw - p.lin_bias_w);
    let r_err = quat_right(&q_err);
    jk.fixed_view_mut::<3, 3>(6, 12).copy_from(
        &(-sgn
            * r_err.fixed_view::<3, 3>(1, 1).clone_owned()
            * right_jacobian_so3(&x_g)
            * p.j_gamma_bw),
    );
    let _ = quat_vec4; // kept for tests

    // Row block e7.
    jk.fixed_view_mut::<3, 3>(9, 0).copy_from(&(-rkt));
    jk.fixed_view_mut::<3, 3>(9, 6)
        .copy_from(&skew(&(rkt * (state_k1.p - state_k.p) + rel_rot * ext.pbo)));
    jk.fixed_view_mut::<3, 3>(9, 12).copy_from(&(-p.j_eta_bw));
    jk1.fixed_view_mut::<3, 3>(9, 0).copy_from(&rkt);
    jk1.fixed_view_mut::<3, 3>(9, 6).copy_from(&(-rel_rot * skew(&ext.pbo)));
    j_pbo
        .fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(rel_rot - Mat3::identity()));
    j_rbo
        .fixed_view_mut::<3, 3>(9, 0)
        .copy_from(&(-p.j_eta_rbo * right_jacobian_inv_so3(&dtheta_bo)));

    // Row blocks e8, e9.
    jk.fixed_view_mut::<3, 3>(12, 9).copy_from(&(-Mat3::identity()));
    jk1.fixed_view_mut::<3, 3>(12, 9).copy_from(&Mat3::identity());
    jk.fixed_view_mut::<3, 3>(15, 12).copy_from(&(-Mat3::identity()));
    jk1.fixed_view_mut::<3, 3>(15, 12).copy_from(&Mat3::identity());

    let mut eval = ImuOdoEval { residual, j_state_k: jk, j_state_k1: jk1, j_rbo, j_pbo };
    if whiten {
        let chol = p
            .cov
            .cholesky()
            .ok_or(FactorError::Preint(PreintError::DegenerateCovariance))?;
        // e ← L⁻¹ e, J ← L⁻¹ J.
        let l = chol.l();
        let solve = |m: &mut dyn FnMut(&mut dyn FnMut(&mut [f64]))| {
            let _ = m;
        };
        let _ = solve;
        eval.residual = l.solve_lower_triangular(&eval.residual).unwrap();
        eval.j_state_k = l.solve_lower_triangular(&eval.j_state_k).unwrap();
        eval.j_state_k1 = l.solve_lower_triangular(&eval.j_state_k1).unwrap();
        eval.j_rbo = l.solve_lower_triangular(&eval.j_rbo).unwrap();
        eval.j_pbo = l.solve_lower_triangular(&eval.j_pbo).unwrap();
    }
    Ok(eval)
}

// ---------------------------------------------------------------------------
// Roll prior
// ---------------------------------------------------------------------------

/// Weak prior confining the roll angle of R^b_o about its reference.
/// Returns the scalar residual and its 1×3 Jacobian w.r.t. δθ_bo.
pub fn roll_prior_residual(
    rbo: &Rot3,
    reference: &Rot3,
    weight: f64,
) -> (f64, SMatrix<f64, 1, 3>) {
    let sw = weight.sqrt();
    let phi = log_so3_quat(&RotQ::from_rotation_matrix(&(reference.inverse() * rbo)));
    let jr_inv = right_jacobian_inv_so3(&phi);
    let mut j = SMatrix::<f64, 1, 3>::zeros();
    j.copy_from(&(sw * jr_inv.row(0)));
    (sw * phi.x, j)
}

pub const DEFAULT_ROLL_PRIOR_WEIGHT: f64 = 1e-2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{boxplus_state, exp_so3, exp_so3_quat};
    use crate::preint::{integrate, ImuSample, NoiseSpec, WheelSample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_state(rng: &mut ChaCha8Rng) -> MotionState {
        let mut v3 = |s: f64| Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * s;
        MotionState {
            p: v3(10.0),
            v: v3(4.0),
            q: exp_so3_quat(&v3(1.5)),
            ba: v3(0.05),
            bw: v3(0.005),
        }
    }

    fn rand_ext(rng: &mut ChaCha8Rng) -> Extrinsics {
        let mut v3 = |s: f64| Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * s;
        Extrinsics {
            rbc: exp_so3(&v3(1.0)),
            pbc: v3(0.5),
            rbo: exp_so3(&v3(0.2)),
            pbo: v3(1.0),
        }
    }

    #[test]
    fn reproj_same_frame_rejected() {
        let cam = CameraModel::default();
        let s = MotionState::identity();
        let lm = Landmark { id: 0, anchor_frame: 0, first_obs: (320.0, 240.0), inv_depth: 0.1 };
        let e = reproj_residual(&cam, &s, &s, &Extrinsics::identity(), &lm, (320.0, 240.0), 3, 3);
        assert!(matches!(e, Err(FactorError::SameFrame)));
    }

    #[test]
    fn reproj_jacobians_match_finite_differences() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        let mut tested = 0;
        while tested < 40 {
            let si = rand_state(&mut rng);
            let mut sj = rand_state(&mut rng);
            // Keep frame j near frame i so the landmark stays in front.
            sj.p = si.p + Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()) * 0.5;
            sj.q = si.q * exp_so3_quat(&(Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.1));
            let ext = rand_ext(&mut rng);
            let lm = Landmark {
                id: 1,
                anchor_frame: 0,
                first_obs: (
                    cam.cx + (rng.gen::<f64>() - 0.5) * 300.0,
                    cam.cy + (rng.gen::<f64>() - 0.5) * 200.0,
                ),
                inv_depth: 0.05 + rng.gen::<f64>() * 0.2,
            };
            let obs = (cam.cx + (rng.gen::<f64>() - 0.5) * 100.0, cam.cy);
            let base = match reproj_residual(&cam, &si, &sj, &ext, &lm, obs, 0, 1) {
                Ok(e) => e,
                Err(_) => continue,
            };
            tested += 1;

            let eval = |si: &MotionState, sj: &MotionState, ext: &Extrinsics, lam: f64| {
                let mut l = lm;
                l.inv_depth = lam;
                reproj_residual(&cam, si, sj, ext, &l, obs, 0, 1).unwrap().residual
            };
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

            // Pose i and pose j.
            for col in 0..6 {
                let mut d = [0.0f64; 15];
                d[if col < 3 { col } else { col + 3 }] = h;
                let mut dm = d;
                dm[if col < 3 { col } else { col + 3 }] = -h;
                let fd = (eval(&boxplus_state(&si, &d), &sj, &ext, lm.inv_depth)
                    - eval(&boxplus_state(&si, &dm), &sj, &ext, lm.inv_depth))
                    / (2.0 * h);
                for r in 0..2 {
                    assert!(rel(base.j_pose_i[(r, col)], fd[r]) < 1e-4 || (base.j_pose_i[(r, col)] - fd[r]).abs() < 1e-4);
                }
                let fd = (eval(&si, &boxplus_state(&sj, &d), &ext, lm.inv_depth)
                    - eval(&si, &boxplus_state(&sj, &dm), &ext, lm.inv_depth))
                    / (2.0 * h);
                for r in 0..2 {
                    assert!(rel(base.j_pose_j[(r, col)], fd[r]) < 1e-4 || (base.j_pose_j[(r, col)] - fd[r]).abs() < 1e-4);
                }
            }
            // Extrinsics and inverse depth.
            for col in 0..3 {
                let mut dv = Vec3::zeros();
                dv[col] = h;
                let mut ep = ext;
                ep.rbc = ext.rbc * exp_so3(&dv);
                let mut em = ext;
                em.rbc = ext.rbc * exp_so3(&-dv);
                let fd = (eval(&si, &sj, &ep, lm.inv_depth) - eval(&si, &sj, &em, lm.inv_depth)) / (2.0 * h);
                for r in 0..2 {
                    assert!(rel(base.j_rbc[(r, col)], fd[r]) < 1e-4 || (base.j_rbc[(r, col)] - fd[r]).abs() < 1e-4);
                }
                let mut ep = ext;
                ep.pbc += dv;
                let mut em = ext;
                em.pbc -= dv;
                let fd = (eval(&si, &sj, &ep, lm.inv_depth) - eval(&si, &sj, &em, lm.inv_depth)) / (2.0 * h);
                for r in 0..2 {
                    assert!(rel(base.j_pbc[(r, col)], fd[r]) < 1e-4 || (base.j_pbc[(r, col)] - fd[r]).abs() < 1e-4);
                }
            }
            let fd = (eval(&si, &sj, &ext, lm.inv_depth + h) - eval(&si, &sj, &ext, lm.inv_depth - h)) / (2.0 * h);
            for r in 0..2 {
                assert!(rel(base.j_lambda[r], fd[r]) < 1e-4 || (base.j_lambda[r] - fd[r]).abs() < 1e-4);
            }
        }
    }

    fn wiggly_preint() -> Preintegrated {
        let rate = 100.0;
        let imu: Vec<ImuSample> = (0..=10)
            .map(|i| {
                let t = i as f64 / rate;
                ImuSample {
                    t,
                    gyro: Vec3::new(0.2 * (3.0 * t).sin(), -0.1, 0.4),
                    accel: Vec3::new(0.8 * (2.0 * t).cos(), -0.3, 9.7),
                }
            })
            .collect();
        let wheel: Vec<WheelSample> = (0..=10)
            .map(|i| WheelSample { t: i as f64 / rate, speed: 2.0 + 0.3 * (i as f64 / rate) })
            .collect();
        integrate(
            &imu,
            &wheel,
            &Vec3::new(0.01, -0.005, 0.002),
            &Vec3::new(0.001, 0.0, -0.002),
            &exp_so3(&Vec3::new(0.05, 0.0, 0.02)),
            &NoiseSpec::default(),
        )
        .unwrap()
    }

    #[test]
    fn imuodo_jacobians_match_finite_differences() {
        let p = wiggly_preint();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gw = Vec3::new(0.0, 0.0, -9.81);
        let h = 1e-6;
        for _ in 0..30 {
            let sk = rand_state(&mut rng);
            let sk1 = rand_state(&mut rng);
            let mut ext = rand_ext(&mut rng);
            // Keep Rbo within the bias-correction trust region of the preint.
            ext.rbo = p.lin_rbo * exp_so3(&(Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.02));
            let mut sk_b = sk;
            sk_b.ba = p.lin_bias_a + Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.02;
            sk_b.bw = p.lin_bias_w + Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.002;
            let base = imuodo_residual(&sk_b, &sk1, &p, &ext, &gw, true).unwrap();

            let eval = |a: &MotionState, b: &MotionState, e: &Extrinsics| {
                imuodo_residual(a, b, &p, e, &gw, true).unwrap().residual
            };
            let rel_ok = |a: f64, b: f64| {
                (a - b).abs() / b.abs().max(1.0) < 1e-4 || (a - b).abs() < 1e-3
            };

            for col in 0..15 {
                let mut d = [0.0f64; 15];
                d[col] = h;
                let mut dm = [0.0f64; 15];
                dm[col] = -h;
                let fd = (eval(&boxplus_state(&sk_b, &d), &sk1, &ext)
                    - eval(&boxplus_state(&sk_b, &dm), &sk1, &ext))
                    / (2.0 * h);
                for r in 0..18 {
                    assert!(
                        rel_ok(base.j_state_k[(r, col)], fd[r]),
                        "state_k row {r} col {col}: {} vs {}",
                        base.j_state_k[(r, col)],
                        fd[r]
                    );
                }
                let fd = (eval(&sk_b, &boxplus_state(&sk1, &d), &ext)
                    - eval(&sk_b, &boxplus_state(&sk1, &dm), &ext))
                    / (2.0 * h);
                for r in 0..18 {
                    assert!(rel_ok(base.j_state_k1[(r, col)], fd[r]));
                }
            }
            for col in 0..3 {
                let mut dv = Vec3::zeros();
                dv[col] = h;
                let mut ep = ext;
                ep.rbo = ext.rbo * exp_so3(&dv);
                let mut em = ext;
                em.rbo = ext.rbo * exp_so3(&-dv);
                let fd = (eval(&sk_b, &sk1, &ep) - eval(&sk_b, &sk1, &em)) / (2.0 * h);
                for r in 0..18 {
                    assert!(rel_ok(base.j_rbo[(r, col)], fd[r]));
                }
                let mut ep = ext;
                ep.pbo += dv;
                let mut em = ext;
                em.pbo -= dv;
                let fd = (eval(&sk_b, &sk1, &ep) - eval(&sk_b, &sk1, &em)) / (2.0 * h);
                for r in 0..18 {
                    assert!(rel_ok(base.j_pbo[(r, col)], fd[r]));
                }
            }
        }
    }

    #[test]
    fn equal_biases_zero_bias_rows() {
        let p = wiggly_preint();
        let mut sk = MotionState::identity();
        sk.ba = p.lin_bias_a;
        sk.bw = p.lin_bias_w;
        let mut sk1 = sk;
        sk1.p = Vec3::new(0.2, 0.0, 0.0);
        let ext = Extrinsics { rbo: p.lin_rbo, ..Extrinsics::identity() };
        let e = imuodo_residual(&sk, &sk1, &p, &ext, &Vec3::new(0.0, 0.0, -9.81), false).unwrap();
        assert!(e.residual.fixed_rows::<6>(12).norm() < 1e-15);
    }

    #[test]
    fn roll_prior_basics() {
        let w = 0.01;
        let refr = exp_so3(&Vec3::new(0.03, 0.0, 0.0));
        let (r, _) = roll_prior_residual(&refr, &refr, w);
        assert_eq!(r, 0.0);
        let (r, _) = roll_prior_residual(&(refr * exp_so3(&Vec3::new(0.1, 0.0, 0.0))), &refr, w);
        assert!((r - w.sqrt() * 0.1).abs() < 1e-12);
        let (r, _) = roll_prior_residual(&(refr * exp_so3(&Vec3::new(0.0, 0.0, 0.2))), &refr, w);
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn marginal_prior_residual_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7usize; // pos(3) + att(3) + landmark(1)
        let r = DVector::from_fn(4, |_, _| rng.gen::<f64>() - 0.5);
        let j = DMatrix::from_fn(4, n, |_, _| rng.gen::<f64>() - 0.5);
        let lin_p = Vec3::new(1.0, 2.0, 3.0);
        let lin_q = exp_so3_quat(&Vec3::new(0.1, -0.2, 0.3));
        let prior = MarginalPrior {
            r: r.clone(),
            j: j.clone(),
            blocks: vec![
                (BlockKey::FramePos(0), BlockValue::Vector(lin_p)),
                (BlockKey::FrameAtt(0), BlockValue::Rotation(lin_q)),
                (BlockKey::Landmark(5), BlockValue::Scalar(0.2)),
            ],
        };
        // At the linearization point the residual is r.
        let mut cur = BTreeMap::new();
        cur.insert(BlockKey::FramePos(0), BlockValue::Vector(lin_p));
        cur.insert(BlockKey::FrameAtt(0), BlockValue::Rotation(lin_q));
        cur.insert(BlockKey::Landmark(5), BlockValue::Scalar(0.2));
        assert!((prior.residual(&cur).unwrap() - &r).norm() < 1e-15);
        assert!((prior.cost(&cur).unwrap() - r.norm_squared()).abs() < 1e-15);

        // Missing block is an error.
        let mut missing = cur.clone();
        missing.remove(&BlockKey::Landmark(5));
        assert!(matches!(prior.residual(&missing), Err(FactorError::MissingBlock(_))));

        // Scaling preserves the zero set: residual scales uniformly.
        let mut scaled = prior.clone();
        scaled.scale(0.85);
        cur.insert(BlockKey::FramePos(0), BlockValue::Vector(lin_p + Vec3::new(0.1, 0.0, 0.0)));
        let e0 = prior.residual(&cur).unwrap();
        let e1 = scaled.residual(&cur).unwrap();
        assert!((e1 - &e0 * 0.85).norm() < 1e-14);
    }
}
