//! Rotation and pose algebra shared by all modules.
//!
//! Rotations follow the Hamilton quaternion convention: `q_A^B` takes vectors
//! from frame A to frame B and composes as `q_C^B = q_A^B ⊗ q_C^A`. All
//! manifold perturbations are right-multiplied local (body-frame) increments,
//! i.e. `R ← R · Exp(δθ)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Unit quaternion rotation, Hamilton convention.
pub type RotQ = UnitQuaternion<f64>;
/// 3×3 orthonormal rotation matrix.
pub type Rot3 = Rotation3<f64>;

/// Below this angle the exp/log maps switch to 4th-order series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map so(3) → SO(3).
pub fn exp_so3(phi: &Vec3) -> Rot3 {
    let theta = phi.norm();
    let k = skew(phi);
    let m = if theta < SMALL_ANGLE {
        // 4th-order series in theta for sin/cos coefficients.
        let t2 = theta * theta;
        let a = 1.0 - t2 / 6.0 * (1.0 - t2 / 20.0);
        let b = 0.5 * (1.0 - t2 / 12.0 * (1.0 - t2 / 30.0));
        Mat3::identity() + k * a + k * k * b
    } else {
        Mat3::identity() + k * (theta.sin() / theta)
            + k * k * ((1.0 - theta.cos()) / (theta * theta))
    };
    Rot3::from_matrix_unchecked(m)
}

/// Quaternion form of the exponential map.
pub fn exp_so3_quat(phi: &Vec3) -> RotQ {
    let theta = phi.norm();
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        // sin(t/2)/t and cos(t/2) to 4th order.
        let s = 0.5 * (1.0 - t2 / 24.0 * (1.0 - t2 / 80.0));
        let c = 1.0 - t2 / 8.0 * (1.0 - t2 / 48.0);
        let v = phi * s;
        UnitQuaternion::new_normalize(Quaternion::new(c, v.x, v.y, v.z))
    } else {
        let half = 0.5 * theta;
        let v = phi * (half.sin() / theta);
        UnitQuaternion::new_normalize(Quaternion::new(half.cos(), v.x, v.y, v.z))
    }
}

/// Logarithm map SO(3) → so(3), inverse of [`exp_so3`] for angles below π.
///
/// At an angle within 1e-9 of π the axis sign is ambiguous; either sign is
/// returned and [`log_is_degenerate`] reports the condition.
pub fn log_so3(r: &Rot3) -> Vec3 {
    log_so3_quat(&RotQ::from_rotation_matrix(r))
}

pub fn log_so3_quat(q: &RotQ) -> Vec3 {
    // Take the hemisphere with non-negative scalar part so the angle is in [0, π].
    let (w, v) = if q.w >= 0.0 {
        (q.w, Vec3::new(q.i, q.j, q.k))
    } else {
        (-q.w, -Vec3::new(q.i, q.j, q.k))
    };
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // theta ≈ 2 vn / w with series correction.
        v * (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w))
    } else {
        let theta = 2.0 * vn.atan2(w);
        v * (theta / vn)
    }
}

/// True when the rotation angle is within 1e-9 of π (axis sign ambiguous).
pub fn log_is_degenerate(q: &RotQ) -> bool {
    (log_so3_quat(q).norm() - std::f64::consts::PI).abs() < 1e-9
}

/// Right Jacobian of SO(3): Exp(phi + d) ≈ Exp(phi) Exp(J_r(phi) d).
pub fn right_jacobian_so3(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        Mat3::identity() - k * 0.5 + k * k * (1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        Mat3::identity() - k * ((1.0 - theta.cos()) / t2)
            + k * k * ((theta - theta.sin()) / (t2 * theta))
    }
}

/// Inverse of the right Jacobian: Log(Exp(phi) Exp(d)) ≈ phi + J_r⁻¹(phi) d.
pub fn right_jacobian_inv_so3(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < SMALL_ANGLE {
        Mat3::identity() + k * 0.5 + k * k * (1.0 / 12.0)
    } else {
        let t2 = theta * theta;
        let cot_term = (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Mat3::identity() + k * 0.5 + k * k * (1.0 / t2 - cot_term)
    }
}

/// Rigid transform of a frame expressed in a parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotQ,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: RotQ::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: RotQ, translation: Vec3) -> Self {
        Pose { rotation, translation }
    }

    /// Composition: `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose { rotation: rinv, translation: -(rinv * self.translation) }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Per-frame pose, velocity and IMU biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    /// Body position in the world frame, meters.
    pub p: Vec3,
    /// Body velocity in the world frame, m/s.
    pub v: Vec3,
    /// Body attitude `q_b^w`.
    pub q: RotQ,
    /// Accelerometer bias, m/s².
    pub ba: Vec3,
    /// Gyroscope bias, rad/s.
    pub bw: Vec3,
}

impl MotionState {
    pub fn identity() -> Self {
        MotionState {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: RotQ::identity(),
            ba: Vec3::zeros(),
            bw: Vec3::zeros(),
        }
    }

    pub fn rot(&self) -> Rot3 {
        self.q.to_rotation_matrix()
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }
}

/// Local-parameterization retraction of a 15-vector increment
/// `[δp, δv, δθ, δba, δbω]` onto a [`MotionState`].
pub fn boxplus_state(x: &MotionState, delta: &[f64; 15]) -> MotionState {
    let d = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
    MotionState {
        p: x.p + d(0),
        v: x.v + d(3),
        q: x.q * exp_so3_quat(&d(6)),
        ba: x.ba + d(9),
        bw: x.bw + d(12),
    }
}
