//! Joint IMU + wheel-encoder pre-integration between consecutive image frames.
//!
//! Produces the nominal relative-motion terms α (position-like), β
//! (velocity-like), γ (rotation) and η (odometer displacement) together with
//! an 18×18 covariance over `[δα, δβ, δθ, δη, δb_a, δb_ω]` and first-order
//! bias correction Jacobians. Integration is discrete mid-point: γ advances by
//! the averaged gyro rate, β/α by trapezoidal accumulation of the rotated
//! specific force, and η by the mid-point rotation applied to the averaged
//! wheel speed along the odometer x-axis.

use crate::geometry::{
    exp_so3_quat, right_jacobian_so3, skew, Mat3, Rot3, RotQ, Vec3,
};
use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat18 = SMatrix<f64, 18, 18>;

/// Raw gyroscope + accelerometer sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Timestamp, seconds.
    pub t: f64,
    /// Angular rate, rad/s, body frame.
    pub gyro: Vec3,
    /// Specific force, m/s², body frame.
    pub accel: Vec3,
}

/// Wheel-encoder speed sample (forward along the odometer x-axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelSample {
    pub t: f64,
    /// Speed, m/s.
    pub speed: f64,
}

/// Continuous-time noise densities and per-sample sigmas of the sensor suite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Gyro white noise density, rad/s/√Hz.
    pub gyro_density: f64,
    /// Accel white noise density, m/s²/√Hz.
    pub accel_density: f64,
    /// Gyro bias random walk, rad/s²/√Hz.
    pub gyro_bias_walk: f64,
    /// Accel bias random walk, m/s³/√Hz.
    pub accel_bias_walk: f64,
    /// Wheel speed sigma per sample, m/s.
    pub wheel_sigma: f64,
    /// Feature pixel sigma, px.
    pub pixel_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            gyro_density: 1.7e-4,
            accel_density: 2.0e-3,
            gyro_bias_walk: 1.0e-6,
            accel_bias_walk: 1.0e-5,
            wheel_sigma: 0.02,
            pixel_sigma: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PreintError {
    #[error("empty IMU sample list")]
    EmptyImu,
    #[error("empty wheel sample list")]
    EmptyWheel,
    #[error("non-monotonic timestamps")]
    NonMonotonic,
    #[error("integration interval {0} s exceeds 1 s (dropped frames?)")]
    IntervalTooLong(f64),
    #[error("bias change {0} exceeds trust region {1}; re-integration required")]
    ReintegrateRequired(f64, f64),
    #[error("pre-integration covariance is not invertible")]
    DegenerateCovariance,
}

/// Default trust region for first-order bias correction, shared by both biases.
pub const BIAS_TRUST_REGION: f64 = 0.1;

/// Pre-integrated IMU-odometer terms between two consecutive image frames.
#[derive(Debug, Clone)]
pub struct Preintegrated {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: RotQ,
    pub eta: Vec3,
    pub dt_total: f64,
    /// Covariance over `[δα, δβ, δθ, δη, δb_a, δb_ω]`.
    pub cov: Mat18,
    pub j_alpha_ba: Mat3,
    pub j_alpha_bw: Mat3,
    pub j_beta_ba: Mat3,
    pub j_beta_bw: Mat3,
    pub j_gamma_bw: Mat3,
    pub j_eta_bw: Mat3,
    /// Sensitivity of η to a right-local perturbation of R^b_o.
    pub j_eta_rbo: Mat3,
    pub lin_bias_a: Vec3,
    pub lin_bias_w: Vec3,
    pub lin_rbo: Rot3,
}

/// Nominal terms after first-order bias compensation.
#[derive(Debug, Clone, Copy)]
pub struct Corrected {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: RotQ,
    pub eta: Vec3,
}

/// Linearly interpolate wheel speed at time `t` (flat extrapolation at the
/// ends). Streams may carry duplicate timestamps at rate discontinuities
/// (left then right limit); `from_left` selects which side a query exactly on
/// such a pair resolves to.
fn wheel_speed_at(wheel: &[WheelSample], t: f64, from_left: bool) -> f64 {
    // Duplicate timestamps carry left/right limits (first = left, last =
    // right), so the clamping below must not skip past the requested side.
    if t < wheel[0].t || (from_left && t == wheel[0].t) {
        return wheel[0].speed;
    }
    if t > wheel[wheel.len() - 1].t || (!from_left && t == wheel[wheel.len() - 1].t) {
        return wheel[wheel.len() - 1].speed;
    }
    if from_left {
        let idx = wheel.partition_point(|s| s.t < t);
        if wheel[idx].t == t {
            return wheel[idx].speed;
        }
        let (a, b) = (&wheel[idx - 1], &wheel[idx]);
        let w = (t - a.t) / (b.t - a.t);
        a.speed * (1.0 - w) + b.speed * w
    } else {
        let idx = wheel.partition_point(|s| s.t <= t);
        let (a, b) = (&wheel[idx - 1], &wheel[idx]);
        if a.t == t {
            return a.speed;
        }
        let w = (t - a.t) / (b.t - a.t);
        a.speed * (1.0 - w) + b.speed * w
    }
}

/// Integrate IMU and wheel samples spanning one inter-frame interval.
///
/// The IMU samples must cover exactly the interval (boundary samples
/// interpolated by the caller); wheel samples are time-aligned to the IMU
/// timestamps by linear interpolation.
pub fn integrate(
    imu: &[ImuSample],
    wheel: &[WheelSample],
    bias_a: &Vec3,
    bias_w: &Vec3,
    rbo: &Rot3,
    noise: &NoiseSpec,
) -> Result<Preintegrated, PreintError> {
    if imu.len() < 2 {
        return Err(PreintError::EmptyImu);
    }
    if wheel.is_empty() {
        return Err(PreintError::EmptyWheel);
    }
    // Duplicate timestamps mark a left/right-limit pair at a motion
    // discontinuity and are allowed; only decreasing time is an error.
    for pair in imu.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(PreintError::NonMonotonic);
        }
    }
    let span = imu[imu.len() - 1].t - imu[0].t;
    if span > 1.0 {
        return Err(PreintError::IntervalTooLong(span));
    }

    let mut alpha = Vec3::zeros();
    let mut beta = Vec3::zeros();
    let mut gamma = RotQ::identity();
    let mut eta = Vec3::zeros();
    let mut cov = Mat18::zeros();
    let mut f_total = Mat18::identity();
    let mut j_eta_rbo = Mat3::zeros();
    let rbo_m = *rbo.matrix();
    let e1 = Vec3::new(1.0, 0.0, 0.0);

    for pair in imu.windows(2) {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        if dt <= 0.0 {
            continue;
        }
        let w_avg = 0.5 * (s0.gyro + s1.gyro) - bias_w;
        let u = w_avg * dt;
        let a0 = s0.accel - bias_a;
        let a1 = s1.accel - bias_a;

        let q_u = exp_so3_quat(&u);
        let q_u2 = exp_so3_quat(&(u * 0.5));
        let gamma_next = gamma * q_u;
        let gamma_mid = gamma * q_u2;
        let r0 = *gamma.to_rotation_matrix().matrix();
        let r1 = *gamma_next.to_rotation_matrix().matrix();
        let r_mid = *gamma_mid.to_rotation_matrix().matrix();
        let r_u_t = q_u.to_rotation_matrix().matrix().transpose();
        let r_u2_t = q_u2.to_rotation_matrix().matrix().transpose();
        let jr_u = right_jacobian_so3(&u);
        let jr_u2 = right_jacobian_so3(&(u * 0.5));

        let a_bar = 0.5 * (r0 * a0 + r1 * a1);
        let speed = 0.5
            * (wheel_speed_at(wheel, s0.t, false) + wheel_speed_at(wheel, s1.t, true));
        let w_o = rbo_m * (e1 * speed);

        // Exact per-step linearization of the discrete update.
        let m_theta = -0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * r_u_t);
        let m_ba = -0.5 * (r0 + r1);
        let m_bw = 0.5 * dt * r1 * skew(&a1) * jr_u;

        let mut a = Mat18::identity();
        let set = |a: &mut Mat18, r: usize, c: usize, m: &Mat3| {
            a.fixed_view_mut::<3, 3>(r, c).copy_from(m);
        };
        set(&mut a, 0, 3, &(Mat3::identity() * dt));
        set(&mut a, 0, 6, &(0.5 * dt * dt * m_theta));
        set(&mut a, 0, 12, &(0.5 * dt * dt * m_ba));
        set(&mut a, 0, 15, &(0.5 * dt * dt * m_bw));
        set(&mut a, 3, 6, &(dt * m_theta));
        set(&mut a, 3, 12, &(dt * m_ba));
        set(&mut a, 3, 15, &(dt * m_bw));
        set(&mut a, 6, 6, &r_u_t);
        set(&mut a, 6, 15, &(-dt * jr_u));
        set(&mut a, 9, 6, &(-dt * r_mid * skew(&w_o) * r_u2_t));
        set(&mut a, 9, 15, &(0.5 * dt * dt * r_mid * skew(&w_o) * jr_u2));

        // Discrete process noise. Accel/gyro white-noise densities convert to
        // per-step variances density²·dt; the wheel sigma is per sample and
        // each sample feeds two adjacent steps, so it enters at full variance.
        let mut q = Mat18::zeros();
        let sg2 = noise.gyro_density * noise.gyro_density * dt;
        let sa2 = noise.accel_density * noise.accel_density * dt;
        let m_avg = 0.5 * (r0 + r1);
        let mm = m_avg * m_avg.transpose();
        let jj = jr_u * jr_u.transpose();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.25 * dt * dt * sa2 * mm));
        q.fixed_view_mut::<3, 3>(0, 3).copy_from(&(0.5 * dt * sa2 * mm));
        q.fixed_view_mut::<3, 3>(3, 0).copy_from(&(0.5 * dt * sa2 * mm));
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(sa2 * mm));
        q.fixed_view_mut::<3, 3>(6, 6).copy_from(&(sg2 * jj));
        let w_dir = r_mid * rbo_m * e1;
        let q_eta =
            dt * dt * noise.wheel_sigma * noise.wheel_sigma * w_dir * w_dir.transpose();
        q.fixed_view_mut::<3, 3>(9, 9).copy_from(&q_eta);
        let walk_a = noise.accel_bias_walk * noise.accel_bias_walk * dt;
        let walk_w = noise.gyro_bias_walk * noise.gyro_bias_walk * dt;
        q.fixed_view_mut::<3, 3>(12, 12)
            .copy_from(&(Mat3::identity() * walk_a));
        q.fixed_view_mut::<3, 3>(15, 15)
            .copy_from(&(Mat3::identity() * walk_w));

        cov = a * cov * a.transpose() + q;
        f_total = a * f_total;
        j_eta_rbo += -dt * r_mid * rbo_m * skew(&(e1 * speed));

        alpha += beta * dt + 0.5 * a_bar * dt * dt;
        beta += a_bar * dt;
        eta += r_mid * w_o * dt;
        gamma = gamma_next;
    }

    // Symmetrize against accumulated roundoff.
    cov = 0.5 * (cov + cov.transpose());

    let block = |r: usize, c: usize| -> Mat3 { f_total.fixed_view::<3, 3>(r, c).into() };
    Ok(Preintegrated {
        alpha,
        beta,
        gamma,
        eta,
        dt_total: span,
        cov,
        j_alpha_ba: block(0, 12),
        j_alpha_bw: block(0, 15),
        j_beta_ba: block(3, 12),
        j_beta_bw: block(3, 15),
        j_gamma_bw: block(6, 15),
        j_eta_bw: block(9, 15),
        j_eta_rbo,
        lin_bias_a: *bias_a,
        lin_bias_w: *bias_w,
        lin_rbo: *rbo,
    })
}

/// First-order correction of the nominal terms for updated bias estimates.
pub fn bias_correct(
    p: &Preintegrated,
    bias_a: &Vec3,
    bias_w: &Vec3,
) -> Result<Corrected, PreintError> {
    let dba = bias_a - p.lin_bias_a;
    let dbw = bias_w - p.lin_bias_w;
    let shift = dba.norm().max(dbw.norm());
    if shift > BIAS_TRUST_REGION {
        return Err(PreintError::ReintegrateRequired(shift, BIAS_TRUST_REGION));
    }
    Ok(Corrected {
        alpha: p.alpha + p.j_alpha_ba * dba + p.j_alpha_bw * dbw,
        beta: p.beta + p.j_beta_ba * dba + p.j_beta_bw * dbw,
        gamma: p.gamma * exp_so3_quat(&(p.j_gamma_bw * dbw)),
        eta: p.eta + p.j_eta_bw * dbw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3_quat;

    fn constant_imu(accel: Vec3, gyro: Vec3, dur: f64, rate: f64) -> Vec<ImuSample> {
        let n = (dur * rate).round() as usize;
        (0..=n)
            .map(|i| ImuSample { t: i as f64 / rate, gyro, accel })
            .collect()
    }

    fn constant_wheel(speed: f64, dur: f64, rate: f64) -> Vec<WheelSample> {
        let n = (dur * rate).round() as usize;
        (0..=n)
            .map(|i| WheelSample { t: i as f64 / rate, speed })
            .collect()
    }

    #[test]
    fn stationary_closed_form() {
        let imu = constant_imu(Vec3::new(0.0, 0.0, 9.81), Vec3::zeros(), 0.1, 100.0);
        let wheel = constant_wheel(0.0, 0.1, 100.0);
        let p = integrate(
            &imu,
            &wheel,
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Rot3::identity(),
            &NoiseSpec::default(),
        )
        .unwrap();
        assert!((p.alpha - Vec3::new(0.0, 0.0, 0.5 * 9.81 * 0.01)).norm() < 1e-12);
        assert!((p.beta - Vec3::new(0.0, 0.0, 9.81 * 0.1)).norm() < 1e-12);
        assert!(log_so3_quat(&p.gamma).norm() < 1e-15);
        assert!(p.eta.norm() < 1e-15);
    }

    #[test]
    fn straight_line_eta() {
        let imu = constant_imu(Vec3::new(0.0, 0.0, 9.81), Vec3::zeros(), 0.1, 100.0);
        let wheel = constant_wheel(2.0, 0.1, 100.0);
        let p = integrate(
            &imu,
            &wheel,
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Rot3::identity(),
            &NoiseSpec::default(),
        )
        .unwrap();
        assert!((p.eta - Vec3::new(0.2, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn input_validation() {
        let noise = NoiseSpec::default();
        let wheel = constant_wheel(0.0, 0.1, 100.0);
        assert!(matches!(
            integrate(&[], &wheel, &Vec3::zeros(), &Vec3::zeros(), &Rot3::identity(), &noise),
            Err(PreintError::EmptyImu)
        ));
        let mut imu = constant_imu(Vec3::zeros(), Vec3::zeros(), 0.1, 100.0);
        imu.swap(2, 3);
        assert!(matches!(
            integrate(&imu, &wheel, &Vec3::zeros(), &Vec3::zeros(), &Rot3::identity(), &noise),
            Err(PreintError::NonMonotonic)
        ));
        let long = constant_imu(Vec3::zeros(), Vec3::zeros(), 1.5, 100.0);
        let wl = constant_wheel(0.0, 1.5, 100.0);
        assert!(matches!(
            integrate(&long, &wl, &Vec3::zeros(), &Vec3::zeros(), &Rot3::identity(), &noise),
            Err(PreintError::IntervalTooLong(_))
        ));
    }

    /// Generic curved-motion segment used by the Jacobian checks.
    fn wiggly_segment() -> (Vec<ImuSample>, Vec<WheelSample>) {
        let rate = 100.0;
        let n = 10usize;
        let imu = (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                ImuSample {
                    t,
                    gyro: Vec3::new(0.3 * (5.0 * t).sin(), -0.2, 0.5 + 0.1 * t),
                    accel: Vec3::new(1.2 * (3.0 * t).cos(), -0.4, 9.6 + 0.3 * t),
                }
            })
            .collect();
        let wheel = (0..=n)
            .map(|i| {
                let t = i as f64 / rate;
                WheelSample { t, speed: 2.0 + 0.5 * (4.0 * t).sin() }
            })
            .collect();
        (imu, wheel)
    }

    #[test]
    fn bias_jacobians_match_finite_differences() {
        let (imu, wheel) = wiggly_segment();
        let noise = NoiseSpec::default();
        let rbo = crate::geometry::exp_so3(&Vec3::new(0.03, 0.0, 0.01));
        let ba = Vec3::new(0.02, -0.01, 0.015);
        let bw = Vec3::new(0.001, 0.002, -0.001);
        let p = integrate(&imu, &wheel, &ba, &bw, &rbo, &noise).unwrap();
        let h = 1e-6;

        let run = |ba: &Vec3, bw: &Vec3| integrate(&imu, &wheel, ba, bw, &rbo, &noise).unwrap();
        let check = |name: &str, analytic: &Mat3, fd: &Mat3| {
            let denom = analytic.norm().max(1e-9);
            assert!(
                (analytic - fd).norm() / denom < 1e-6,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        };

        let mut fd_a_ba = Mat3::zeros();
        let mut fd_b_ba = Mat3::zeros();
        let mut fd_a_bw = Mat3::zeros();
        let mut fd_b_bw = Mat3::zeros();
        let mut fd_g_bw = Mat3::zeros();
        let mut fd_e_bw = Mat3::zeros();
        for k in 0..3 {
            let mut dv = Vec3::zeros();
            dv[k] = h;
            let (pp, pm) = (run(&(ba + dv), &bw), run(&(ba - dv), &bw));
            fd_a_ba.set_column(k, &((pp.alpha - pm.alpha) / (2.0 * h)));
            fd_b_ba.set_column(k, &((pp.beta - pm.beta) / (2.0 * h)));
            let (pp, pm) = (run(&ba, &(bw + dv)), run(&ba, &(bw - dv)));
            fd_a_bw.set_column(k, &((pp.alpha - pm.alpha) / (2.0 * h)));
            fd_b_bw.set_column(k, &((pp.beta - pm.beta) / (2.0 * h)));
            fd_g_bw.set_column(
                k,
                &(log_so3_quat(&(p.gamma.inverse() * pp.gamma))
                    - log_so3_quat(&(p.gamma.inverse() * pm.gamma)))
                    .scale(1.0 / (2.0 * h)),
            );
            fd_e_bw.set_column(k, &((pp.eta - pm.eta) / (2.0 * h)));
        }
        check("J_alpha_ba", &p.j_alpha_ba, &fd_a_ba);
        check("J_beta_ba", &p.j_beta_ba, &fd_b_ba);
        check("J_alpha_bw", &p.j_alpha_bw, &fd_a_bw);
        check("J_beta_bw", &p.j_beta_bw, &fd_b_bw);
        check("J_gamma_bw", &p.j_gamma_bw, &fd_g_bw);
        check("J_eta_bw", &p.j_eta_bw, &fd_e_bw);
    }

    #[test]
    fn eta_rbo_jacobian_matches_finite_differences() {
        let (imu, wheel) = wiggly_segment();
        let noise = NoiseSpec::default();
        let rbo = crate::geometry::exp_so3(&Vec3::new(0.03, 0.0, 0.01));
        let ba = Vec3::zeros();
        let bw = Vec3::zeros();
        let p = integrate(&imu, &wheel, &ba, &bw, &rbo, &noise).unwrap();
        let h = 1e-6;
        let mut fd = Mat3::zeros();
        for k in 0..3 {
            let mut dv = Vec3::zeros();
            dv[k] = h;
            let rp = rbo * crate::geometry::exp_so3(&dv);
            let rm = rbo * crate::geometry::exp_so3(&-dv);
            let pp = integrate(&imu, &wheel, &ba, &bw, &rp, &noise).unwrap();
            let pm = integrate(&imu, &wheel, &ba, &bw, &rm, &noise).unwrap();
            fd.set_column(k, &((pp.eta - pm.eta) / (2.0 * h)));
        }
        assert!((p.j_eta_rbo - fd).norm() / fd.norm().max(1e-9) < 1e-6);
    }

    #[test]
    fn bias_correct_matches_reintegration() {
        let (imu, wheel) = wiggly_segment();
        let noise = NoiseSpec::default();
        let rbo = Rot3::identity();
        let ba0 = Vec3::zeros();
        let bw0 = Vec3::zeros();
        let p = integrate(&imu, &wheel, &ba0, &bw0, &rbo, &noise).unwrap();

        // Zero shift leaves everything unchanged.
        let c0 = bias_correct(&p, &ba0, &bw0).unwrap();
        assert_eq!(c0.alpha, p.alpha);
        assert_eq!(c0.gamma, p.gamma);

        let dbw = Vec3::new(0.0, 0.0, 1e-3);
        let c = bias_correct(&p, &ba0, &dbw).unwrap();
        let full = integrate(&imu, &wheel, &ba0, &dbw, &rbo, &noise).unwrap();
        let ang = log_so3_quat(&(c.gamma.inverse() * full.gamma)).norm();
        assert!(ang < 1e-6, "gamma correction error {ang}");

        let dba = Vec3::new(1e-2, 0.0, 0.0);
        let c = bias_correct(&p, &dba, &bw0).unwrap();
        let full = integrate(&imu, &wheel, &dba, &bw0, &rbo, &noise).unwrap();
        assert!((c.alpha - full.alpha).norm() < 1e-5);

        // Outside the trust region.
        assert!(matches!(
            bias_correct(&p, &Vec3::new(0.2, 0.0, 0.0), &bw0),
            Err(PreintError::ReintegrateRequired(..))
        ));
    }

    #[test]
    fn concatenation_consistency() {
        let (imu, wheel) = wiggly_segment();
        let noise = NoiseSpec::default();
        let rbo = crate::geometry::exp_so3(&Vec3::new(0.02, 0.0, 0.0));
        let ba = Vec3::new(0.01, 0.0, -0.01);
        let bw = Vec3::new(0.0, 1e-3, 0.0);
        let mid = imu.len() / 2;
        let p01 = integrate(&imu[..=mid], &wheel, &ba, &bw, &rbo, &noise).unwrap();
        let p12 = integrate(&imu[mid..], &wheel, &ba, &bw, &rbo, &noise).unwrap();
        let p02 = integrate(&imu, &wheel, &ba, &bw, &rbo, &noise).unwrap();

        let r01 = p01.gamma.to_rotation_matrix();
        let dt2 = p12.dt_total;
        let alpha = p01.alpha + p01.beta * dt2 + r01 * p12.alpha;
        let beta = p01.beta + r01 * p12.beta;
        let gamma = p01.gamma * p12.gamma;
        let eta = p01.eta + r01 * p12.eta;
        assert!((alpha - p02.alpha).norm() < 1e-9);
        assert!((beta - p02.beta).norm() < 1e-9);
        assert!(log_so3_quat(&(gamma.inverse() * p02.gamma)).norm() < 1e-9);
        assert!((eta - p02.eta).norm() < 1e-9);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let (imu, wheel) = wiggly_segment();
        let p = integrate(
            &imu,
            &wheel,
            &Vec3::zeros(),
            &Vec3::zeros(),
            &Rot3::identity(),
            &NoiseSpec::default(),
        )
        .unwrap();
        assert!((p.cov - p.cov.transpose()).norm() < 1e-18);
        let eig = nalgebra::SymmetricEigen::new(p.cov);
        assert!(eig.eigenvalues.min() > -1e-10);
        assert!(p.dt_total > 0.0);
    }
}
