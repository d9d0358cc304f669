//! Synthetic ground-vehicle simulator: ground-truth trajectories from segment
//! lists, plus noisy IMU, wheel-encoder, and monocular feature-track
//! measurements with known ground truth for every experiment.

use crate::factors::Extrinsics;
use crate::geometry::{exp_so3, exp_so3_quat, right_jacobian_so3, RotQ, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::camera::CameraModel;
pub use crate::preint::{ImuSample, NoiseSpec, WheelSample};

/// One piece of the planar vehicle path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Straight { length: f64, speed: f64 },
    /// Positive angle turns left (counter-clockwise about world Z).
    Arc { angle_deg: f64, radius: f64, speed: f64 },
    Pause { duration: f64 },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Straight { length, speed } => length / speed,
            Segment::Arc { angle_deg, radius, speed } => {
                angle_deg.abs().to_radians() * radius / speed
            }
            Segment::Pause { duration } => duration,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub segments: Vec<Segment>,
    /// Camera frame rate, Hz.
    #[serde(default = "default_image_rate")]
    pub image_rate: f64,
    #[serde(default = "default_inertial_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_inertial_rate")]
    pub wheel_rate: f64,
    /// Amplitude of the opt-in sinusoidal roll/pitch excitation, degrees
    /// (0 = exactly planar attitude, the default).
    #[serde(default)]
    pub roll_pitch_excitation_deg: f64,
}

fn default_image_rate() -> f64 {
    10.0
}

fn default_inertial_rate() -> f64 {
    100.0
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            segments: vec![Segment::Straight { length: 100.0, speed: 2.0 }],
            image_rate: 10.0,
            imu_rate: 100.0,
            wheel_rate: 100.0,
            roll_pitch_excitation_deg: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("all rates must be positive")]
    NonPositiveRate,
    #[error("image rate must divide the IMU and wheel rates")]
    RateNotDivisible,
    #[error("segment speed must be positive")]
    NonPositiveSpeed,
    #[error("arc radius must be positive")]
    ZeroRadiusArc,
    #[error("gravity magnitude {0} outside [9.7, 9.9] m/s²")]
    BadGravity(f64),
    #[error("landmark count must be positive")]
    NoLandmarks,
    #[error("excitation amplitude {0}° exceeds 0.5°")]
    ExcessiveExcitation(f64),
}

fn divides(small: f64, big: f64) -> bool {
    let k = big / small;
    (k - k.round()).abs() < 1e-9 && k >= 1.0 - 1e-9
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.image_rate <= 0.0 || self.imu_rate <= 0.0 || self.wheel_rate <= 0.0 {
            return Err(SimError::NonPositiveRate);
        }
        if !divides(self.image_rate, self.imu_rate) || !divides(self.image_rate, self.wheel_rate) {
            return Err(SimError::RateNotDivisible);
        }
        for seg in &self.segments {
            match *seg {
                Segment::Straight { speed, .. } if speed <= 0.0 => {
                    return Err(SimError::NonPositiveSpeed)
                }
                Segment::Arc { speed, radius, .. } => {
                    if speed <= 0.0 {
                        return Err(SimError::NonPositiveSpeed);
                    }
                    if radius <= 0.0 {
                        return Err(SimError::ZeroRadiusArc);
                    }
                }
                _ => {}
            }
        }
        if self.roll_pitch_excitation_deg > 0.5 {
            return Err(SimError::ExcessiveExcitation(self.roll_pitch_excitation_deg));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration()).sum()
    }
}

/// Sensor suite: true extrinsics/biases, camera intrinsics, world gravity,
/// and noise levels.
#[derive(Debug, Clone, Copy)]
pub struct SensorRig {
    pub extrinsics_true: Extrinsics,
    pub camera: CameraModel,
    pub gravity_w: Vec3,
    pub bias_a_true: Vec3,
    pub bias_w_true: Vec3,
    pub noise: NoiseSpec,
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), SimError> {
        let g = self.gravity_w.norm();
        if !(9.7..=9.9).contains(&g) {
            return Err(SimError::BadGravity(g));
        }
        Ok(())
    }
}

impl Default for SensorRig {
    fn default() -> Self {
        // Camera looks along body +x: camera (right, down, forward) maps to
        // body (−y, −z, +x). The odometer sits behind/below the IMU with zero
        // longitudinal offset and a small pure-roll mounting error, so the
        // measured wheel speed is consistent with the odometer displacement
        // model even while turning.
        let rbc = crate::geometry::Mat3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        );
        SensorRig {
            extrinsics_true: Extrinsics {
                rbc: crate::geometry::Rot3::from_matrix_unchecked(rbc),
                pbc: Vec3::new(0.3, 0.0, 0.5),
                rbo: exp_so3(&Vec3::new(2.0_f64.to_radians(), 0.0, 0.0)),
                pbo: Vec3::new(0.0, -0.8, -0.3),
            },
            camera: CameraModel::default(),
            gravity_w: Vec3::new(0.0, 0.0, -9.81),
            bias_a_true: Vec3::new(0.02, -0.015, 0.01),
            bias_w_true: Vec3::new(2e-4, -1e-4, 3e-4),
            noise: NoiseSpec::default(),
        }
    }
}

/// Ground-truth kinematic state at one timestamp.
#[derive(Debug, Clone, Copy)]
pub struct TruthSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    /// World-frame acceleration (excluding gravity).
    pub a_w: Vec3,
    pub q: RotQ,
    /// Body-frame angular rate.
    pub omega_b: Vec3,
}

/// Dense ground truth sampled at each sensor rate.
#[derive(Debug, Clone)]
pub struct Truth {
    pub imu_states: Vec<TruthSample>,
    pub wheel_states: Vec<TruthSample>,
    /// Image-rate states; frame id = index.
    pub frames: Vec<TruthSample>,
    pub duration: f64,
}

struct SegCursor {
    t0: f64,
    t1: f64,
    p0: Vec3,
    psi0: f64,
    seg: Segment,
}

struct PathEval {
    segs: Vec<SegCursor>,
    duration: f64,
    excitation: f64,
}

impl PathEval {
    fn new(spec: &TrajectorySpec) -> Self {
        let mut segs = Vec::new();
        let mut t = 0.0;
        let mut p = Vec3::zeros();
        let mut psi = 0.0f64;
        for seg in &spec.segments {
            let d = seg.duration();
            let (p1, psi1) = match *seg {
                Segment::Straight { length, .. } => {
                    (p + Vec3::new(psi.cos(), psi.sin(), 0.0) * length, psi)
                }
                Segment::Arc { angle_deg, radius, speed } => {
                    let w = angle_deg.signum() * speed / radius;
                    let psi1 = psi + angle_deg.to_radians();
                    if d > 0.0 {
                        let k = speed / w;
                        (
                            p + Vec3::new(psi1.sin() - psi.sin(), -(psi1.cos() - psi.cos()), 0.0)
                                * k,
                            psi1,
                        )
                    } else {
                        (p, psi)
                    }
                }
                Segment::Pause { .. } => (p, psi),
            };
            if d > 0.0 {
                segs.push(SegCursor { t0: t, t1: t + d, p0: p, psi0: psi, seg: *seg });
            }
            t += d;
            p = p1;
            psi = psi1;
        }
        PathEval { segs, duration: t, excitation: 0.0 }
    }

    /// Evaluate at time `t`; segment junctions take the right (later) limit.
    /// Past the last segment's nominal end the motion extrapolates naturally
    /// (the grids may overshoot the duration by a fraction of a sample).
    fn eval(&self, t: f64) -> TruthSample {
        self.eval_side(t, false)
    }

    /// Like `eval`, but `left = true` takes the earlier segment's limit at a
    /// junction time (position, velocity and attitude agree on both sides;
    /// acceleration and body rate may jump).
    fn eval_side(&self, t: f64, left: bool) -> TruthSample {
        let idx = if left {
            self.segs.partition_point(|s| s.t1 < t)
        } else {
            self.segs.partition_point(|s| s.t1 <= t)
        }
        .min(self.segs.len().saturating_sub(1));
        let s = &self.segs[idx];
        let tau = (t - s.t0).max(0.0);
        let (p, v, a, psi, psi_dot) = match s.seg {
            Segment::Straight { speed, .. } => {
                let u = Vec3::new(s.psi0.cos(), s.psi0.sin(), 0.0);
                (s.p0 + u * speed * tau, u * speed, Vec3::zeros(), s.psi0, 0.0)
            }
            Segment::Arc { angle_deg, radius, speed } => {
                let w = angle_deg.signum() * speed / radius;
                let psi = s.psi0 + w * tau;
                let k = speed / w;
                let p = s.p0
                    + Vec3::new(psi.sin() - s.psi0.sin(), -(psi.cos() - s.psi0.cos()), 0.0) * k;
                let v = Vec3::new(psi.cos(), psi.sin(), 0.0) * speed;
                let a = Vec3::new(-psi.sin(), psi.cos(), 0.0) * speed * w;
                (p, v, a, psi, w)
            }
            Segment::Pause { .. } => (s.p0, Vec3::zeros(), Vec3::zeros(), s.psi0, 0.0),
        };
        let yaw = exp_so3_quat(&Vec3::new(0.0, 0.0, psi));
        if self.excitation == 0.0 {
            return TruthSample { t, p, v, a_w: a, q: yaw, omega_b: Vec3::new(0.0, 0.0, psi_dot) };
        }
        // Sinusoidal roll/pitch wobble: q = Rz(ψ)·Exp(φ(t)),
        // ω_b = Exp(φ)ᵀ(0,0,ψ̇) + J_r(φ)·φ̇.
        let amp = self.excitation.to_radians();
        let (w1, w2) = (2.0 * std::f64::consts::PI * 0.3, 2.0 * std::f64::consts::PI * 0.23);
        let phi = Vec3::new(amp * (w1 * t).sin(), amp * (w2 * t + 1.0).sin(), 0.0);
        let phi_dot = Vec3::new(amp * w1 * (w1 * t).cos(), amp * w2 * (w2 * t + 1.0).cos(), 0.0);
        let e = exp_so3(&phi);
        let q = yaw * exp_so3_quat(&phi);
        let omega_b =
            e.matrix().transpose() * Vec3::new(0.0, 0.0, psi_dot) + right_jacobian_so3(&phi) * phi_dot;
        TruthSample { t, p, v, a_w: a, q, omega_b }
    }
}

fn sample_grid(eval: &PathEval, rate: f64, n: usize) -> Vec<TruthSample> {
    (0..=n).map(|i| eval.eval(i as f64 / rate)).collect()
}

/// Generate dense ground truth for a trajectory spec. The high-rate grids
/// are exact multiples of the image grid so every frame gap has full sensor
/// coverage.
pub fn generate_truth(spec: &TrajectorySpec) -> Result<Truth, SimError> {
    spec.validate()?;
    let mut eval = PathEval::new(spec);
    eval.excitation = spec.roll_pitch_excitation_deg;
    let n_img = (eval.duration * spec.image_rate).round() as usize;
    let imu_stride = (spec.imu_rate / spec.image_rate).round() as usize;
    let wheel_stride = (spec.wheel_rate / spec.image_rate).round() as usize;
    Ok(Truth {
        imu_states: sample_grid(&eval, spec.imu_rate, n_img * imu_stride),
        wheel_states: sample_grid(&eval, spec.wheel_rate, n_img * wheel_stride),
        frames: sample_grid(&eval, spec.image_rate, n_img),
        duration: eval.duration,
    })
}

/// Ground-truth state at an arbitrary time (segment junctions take the
/// right limit).
pub fn state_at(spec: &TrajectorySpec, t: f64) -> TruthSample {
    let mut eval = PathEval::new(spec);
    eval.excitation = spec.roll_pitch_excitation_deg;
    eval.eval(t)
}

/// Ground-truth state with an explicit side at segment junctions: `left`
/// selects the limit from the earlier segment. Away from junctions both
/// sides agree.
pub fn state_at_side(spec: &TrajectorySpec, t: f64, left: bool) -> TruthSample {
    let mut eval = PathEval::new(spec);
    eval.excitation = spec.roll_pitch_excitation_deg;
    eval.eval_side(t, left)
}

/// Interior segment boundary times, where acceleration and body rate may be
/// discontinuous. Zero-duration boundaries are deduplicated.
pub fn junction_times(spec: &TrajectorySpec) -> Vec<f64> {
    let total = spec.duration();
    let mut out: Vec<f64> = Vec::new();
    let mut t = 0.0;
    for seg in &spec.segments {
        t += seg.duration();
        if t > 1e-12 && t < total - 1e-12 && out.last().map_or(true, |&l| t - l > 1e-12) {
            out.push(t);
        }
    }
    out
}

/// True wheel speed: forward component of the odometer-origin velocity
/// expressed in the odometer frame (rigid-body transport of the body origin).
pub fn wheel_speed_true(s: &TruthSample, ext: &Extrinsics) -> f64 {
    let v_body = s.q.inverse() * s.v + s.omega_b.cross(&ext.pbo);
    (ext.rbo.inverse() * v_body).x
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

/// Synthesize the IMU stream: specific force + bias + white noise, with
/// random-walk bias drift. Reproducible for a fixed seed.
pub fn synthesize_imu(truth: &Truth, rig: &SensorRig, seed: u64) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(truth.imu_states.len());
    let mut ba = rig.bias_a_true;
    let mut bw = rig.bias_w_true;
    let n = &rig.noise;
    for (i, s) in truth.imu_states.iter().enumerate() {
        if i > 0 {
            let dt = s.t - truth.imu_states[i - 1].t;
            ba += normal3(&mut rng) * (n.accel_bias_walk * dt.sqrt());
            bw += normal3(&mut rng) * (n.gyro_bias_walk * dt.sqrt());
        }
        let rate = if truth.imu_states.len() > 1 {
            (truth.imu_states.len() - 1) as f64 / truth.duration
        } else {
            1.0
        };
        let sg = n.gyro_density * rate.sqrt();
        let sa = n.accel_density * rate.sqrt();
        let accel = s.q.inverse() * (s.a_w - rig.gravity_w) + ba + normal3(&mut rng) * sa;
        let gyro = s.omega_b + bw + normal3(&mut rng) * sg;
        out.push(ImuSample { t: s.t, gyro, accel });
    }
    out
}

/// Synthesize the wheel-encoder stream.
pub fn synthesize_wheel(truth: &Truth, rig: &SensorRig, seed: u64) -> Vec<WheelSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth
        .wheel_states
        .iter()
        .map(|s| WheelSample {
            t: s.t,
            speed: wheel_speed_true(s, &rig.extrinsics_true) + normal(&mut rng) * rig.noise.wheel_sigma,
        })
        .collect()
}

/// One landmark observation in one image frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub frame_id: u64,
    pub landmark_id: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SimWarning {
    pub frame_id: u64,
    pub visible: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub observations: Vec<FeatureObservation>,
    /// Ground-truth landmark world positions, indexed by id.
    pub landmarks: Vec<Vec3>,
    pub warnings: Vec<SimWarning>,
}

/// Camera-frame coordinates of a world point seen from a ground-truth state.
pub fn camera_point(s: &TruthSample, ext: &Extrinsics, p_w: &Vec3) -> Vec3 {
    ext.rbc.inverse() * (s.q.inverse() * (p_w - s.p) - ext.pbc)
}

/// True z-depth of a landmark along the camera ray at a frame.
pub fn true_inverse_depth(s: &TruthSample, ext: &Extrinsics, p_w: &Vec3) -> f64 {
    1.0 / camera_point(s, ext, p_w).z
}

const MIN_FEATURE_DEPTH: f64 = 0.5;
/// Detection range of the synthetic feature tracker. Without a range cap an
/// ideal pinhole sees the whole corridor ahead from the first frame, so on a
/// straight path no landmark would ever be newly discovered mid-run.
const MAX_FEATURE_DEPTH: f64 = 60.0;
/// Length of the corridor continuation past the final pose.
const CORRIDOR_PAD_M: f64 = 60.0;
const MIN_VISIBLE_PER_FRAME: usize = 8;

/// Scatter landmarks in a corridor around the path (5–40 m lateral, heights
/// −2..8 m) and emit pixel observations with perfect data association.
pub fn synthesize_features(
    truth: &Truth,
    rig: &SensorRig,
    landmark_count: usize,
    seed: u64,
) -> Result<FeatureSet, SimError> {
    if landmark_count == 0 {
        return Err(SimError::NoLandmarks);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Corridor anchor points: one per frame, plus a straight continuation past
    // the final pose. Without the pad a forward-facing camera runs out of
    // features over the last tens of meters of the route.
    let mut anchors: Vec<(Vec3, f64)> =
        truth.frames.iter().map(|f| (f.p, f.q.euler_angles().2)).collect();
    let (last_p, last_yaw) = *anchors.last().unwrap();
    let spacing = if anchors.len() >= 2 {
        let a = &truth.frames[truth.frames.len() - 2];
        let b = &truth.frames[truth.frames.len() - 1];
        (b.p - a.p).norm().max(0.1)
    } else {
        0.2
    };
    let dir = Vec3::new(last_yaw.cos(), last_yaw.sin(), 0.0);
    let pad = (CORRIDOR_PAD_M / spacing).ceil() as usize;
    for k in 1..=pad {
        anchors.push((last_p + dir * (k as f64 * spacing), last_yaw));
    }
    let mut landmarks = Vec::with_capacity(landmark_count);
    for _ in 0..landmark_count {
        let (p, yaw) = anchors[rng.gen_range(0..anchors.len())];
        let heading = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        let left = Vec3::new(-yaw.sin(), yaw.cos(), 0.0);
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let lateral = rng.gen_range(5.0..40.0) * side;
        let along = rng.gen_range(-10.0..10.0);
        let height = rng.gen_range(-2.0..8.0);
        landmarks.push(p + heading * along + left * lateral + Vec3::new(0.0, 0.0, height));
    }

    let ext = &rig.extrinsics_true;
    let cam = &rig.camera;
    let mut observations = Vec::new();
    let mut warnings = Vec::new();
    for (fid, f) in truth.frames.iter().enumerate() {
        let mut visible = 0usize;
        for (lid, lw) in landmarks.iter().enumerate() {
            let pc = camera_point(f, ext, lw);
            if pc.z <= MIN_FEATURE_DEPTH || pc.z >= MAX_FEATURE_DEPTH {
                continue;
            }
            let (u0, v0) = cam.project(&pc);
            if !cam.in_bounds(u0, v0) {
                continue;
            }
            let u = u0 + normal(&mut rng) * rig.noise.pixel_sigma;
            let v = v0 + normal(&mut rng) * rig.noise.pixel_sigma;
            if !cam.in_bounds(u, v) {
                continue;
            }
            observations.push(FeatureObservation {
                frame_id: fid as u64,
                landmark_id: lid as u64,
                u,
                v,
            });
            visible += 1;
        }
        if visible < MIN_VISIBLE_PER_FRAME {
            warnings.push(SimWarning { frame_id: fid as u64, visible });
        }
    }
    Ok(FeatureSet { observations, landmarks, warnings })
}

/// The standard single-turn sequence shape: straight approach, one arc of
/// the given angle, straight exit. Used by the turning-angle sweep.
pub fn single_turn_spec(angle_deg: f64, pre_m: f64, post_m: f64, speed: f64) -> TrajectorySpec {
    let mut segments = vec![Segment::Straight { length: pre_m, speed }];
    if angle_deg.abs() > 0.0 {
        segments.push(Segment::Arc { angle_deg, radius: 10.0, speed });
    }
    segments.push(Segment::Straight { length: post_m, speed });
    TrajectorySpec { segments, ..TrajectorySpec::default() }
}
