//! Observability analysis: Hessian eigen-decomposition, eigenvalue-ratio
//! tracking for the camera-IMU roll angle, and verification of the seven
//! analytically predicted unobservable extrinsic directions under
//! straight-line motion. Gauge freedoms (global position and yaw) are
//! constructed analytically and deflated so they never pollute the count.

use crate::factors::{BlockKey, Extrinsics};
use crate::geometry::{log_so3_quat, Vec3};
use crate::solver::{assemble, Assembly, SolveError, SolverConfig, Window};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

/// Eigenvalues below `SMALL_EIG_REL · λ_max` count as unobservable.
pub const SMALL_EIG_REL: f64 = 1e-9;
/// Inter-frame rotation bound for the straight-line precondition, rad.
pub const STRAIGHT_ROT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ObsvError {
    #[error("window is not straight-line (max inter-frame rotation {0} rad)")]
    NotStraight(f64),
    #[error("net displacement {0} m too small to define a driving direction")]
    InsufficientDisplacement(f64),
    #[error("Hessian is zero")]
    ZeroHessian,
    #[error("extrinsic blocks are fixed; free them for observability analysis")]
    ExtrinsicsFixed,
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ObsvReport {
    /// Ascending, after gauge deflation.
    pub eigenvalues: Vec<f64>,
    pub roll_ratio: f64,
    /// Eigenvalues below threshold, gauge excluded.
    pub small_eig_count: usize,
    /// Squared projection of each analytic direction onto the
    /// small-eigenvalue subspace (empty when the window is not straight).
    pub direction_overlaps: Vec<f64>,
    /// Eigendecomposition wall time, milliseconds.
    pub eig_wall_ms: f64,
}

/// H = Σ JᵀΩJ over the window's active factors, over the free layout.
pub fn assemble_hessian(
    w: &Window,
    cfg: &SolverConfig,
    include_prior: bool,
) -> Result<Assembly, SolveError> {
    assemble(w, cfg, include_prior)
}

/// Normalized body-frame driving direction averaged over consecutive frame
/// pairs.
pub fn driving_direction(w: &Window) -> Result<Vec3, ObsvError> {
    let net = (w.frames.last().unwrap().state.p - w.frames[0].state.p).norm();
    if w.frames.len() < 2 || net <= 0.1 {
        return Err(ObsvError::InsufficientDisplacement(net));
    }
    let mut sum = Vec3::zeros();
    for pair in w.frames.windows(2) {
        let d = pair[0].state.q.inverse() * (pair[1].state.p - pair[0].state.p);
        if d.norm() > 1e-9 {
            sum += d.normalize();
        }
    }
    Ok(sum.normalize())
}

fn max_pairwise_rotation(w: &Window) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..w.frames.len() {
        for j in i + 1..w.frames.len() {
            let rel = w.frames[i].state.q.inverse() * w.frames[j].state.q;
            worst = worst.max(log_so3_quat(&rel).norm());
        }
    }
    worst
}

fn unit_on_block(layout: &[BlockKey], key: BlockKey, v: &Vec3) -> Option<DVector<f64>> {
    let n: usize = layout.iter().map(|k| k.dim()).sum();
    let mut out = DVector::zeros(n);
    let mut off = 0;
    for k in layout {
        if *k == key {
            for i in 0..3 {
                out[off + i] = v[i];
            }
            return Some(out.normalize());
        }
        off += k.dim();
    }
    None
}

/// The four gauge directions (global translation ×3, global yaw) expressed
/// in the layout's local coordinates, orthonormalized.
pub fn gauge_directions(w: &Window, layout: &[BlockKey]) -> DMatrix<f64> {
    let n: usize = layout.iter().map(|k| k.dim()).sum();
    let mut g = DMatrix::zeros(n, 4);
    let mut off = 0;
    let ez = Vec3::new(0.0, 0.0, 1.0);
    for k in layout {
        match k {
            BlockKey::FramePos(id) => {
                for axis in 0..3 {
                    g[(off + axis, axis)] = 1.0;
                }
                let st = &w.frame(*id).unwrap().state;
                let d = ez.cross(&st.p);
                for i in 0..3 {
                    g[(off + i, 3)] = d[i];
                }
            }
            BlockKey::FrameVel(id) => {
                let st = &w.frame(*id).unwrap().state;
                let d = ez.cross(&st.v);
                for i in 0..3 {
                    g[(off + i, 3)] = d[i];
                }
            }
            BlockKey::FrameAtt(id) => {
                let st = &w.frame(*id).unwrap().state;
                let d = st.rot().matrix().transpose() * ez;
                for i in 0..3 {
                    g[(off + i, 3)] = d[i];
                }
            }
            _ => {}
        }
        off += k.dim();
    }
    // Orthonormalize (translations are already orthonormal; yaw mixes in).
    let qr = g.qr();
    qr.q()
}

/// Push the gauge subspace out of the small-eigenvalue set by adding
/// `κ · Σ gᵢgᵢᵀ`.
pub fn deflate_gauge(h: &DMatrix<f64>, gauge: &DMatrix<f64>, kappa: f64) -> DMatrix<f64> {
    h + gauge * gauge.transpose() * kappa
}

/// Unit perturbation of the camera-IMU roll about the driving direction:
/// supported on the R^b_c local-angle block along R^c_b · d.
pub fn roll_direction(
    layout: &[BlockKey],
    ext: &Extrinsics,
    driving_dir: &Vec3,
) -> Result<DVector<f64>, ObsvError> {
    let u = ext.rbc.inverse() * driving_dir;
    unit_on_block(layout, BlockKey::ExtRbcAtt, &u).ok_or(ObsvError::ExtrinsicsFixed)
}

/// Ratio of the eigenvalue whose eigenvector is most aligned with the roll
/// perturbation to the largest eigenvalue.
pub fn roll_ratio(
    h: &DMatrix<f64>,
    layout: &[BlockKey],
    ext: &Extrinsics,
    driving_dir: &Vec3,
) -> Result<(f64, DVector<f64>), ObsvError> {
    let probe = roll_direction(layout, ext, driving_dir)?;
    let eig = h.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    if lmax <= 0.0 {
        return Err(ObsvError::ZeroHessian);
    }
    let mut best = (0usize, -1.0f64);
    for i in 0..eig.eigenvalues.len() {
        let c = eig.eigenvectors.column(i).dot(&probe).abs();
        if c > best.1 {
            best = (i, c);
        }
    }
    Ok((eig.eigenvalues[best.0] / lmax, eig.eigenvectors.column(best.0).clone_owned()))
}

/// The seven analytically unobservable directions under straight-line
/// motion: the p^b_o basis (3), the p^b_c basis (3), and the camera-IMU
/// roll about the driving direction (1).
pub fn analytic_null_directions(
    w: &Window,
    layout: &[BlockKey],
    driving_dir: &Vec3,
) -> Result<Vec<DVector<f64>>, ObsvError> {
    let rot = max_pairwise_rotation(w);
    if rot >= STRAIGHT_ROT_TOL {
        return Err(ObsvError::NotStraight(rot));
    }
    let mut dirs = Vec::with_capacity(7);
    for key in [BlockKey::ExtPbo, BlockKey::ExtPbc] {
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = 1.0;
            dirs.push(unit_on_block(layout, key, &e).ok_or(ObsvError::ExtrinsicsFixed)?);
        }
    }
    dirs.push(roll_direction(layout, &w.extrinsics, driving_dir)?);
    Ok(dirs)
}

/// Full per-window observability report. When no prior is included, the
/// gauge freedoms are deflated analytically before counting.
pub fn analyze(w: &Window, cfg: &SolverConfig, include_prior: bool) -> Result<ObsvReport, ObsvError> {
    let asm = assemble_hessian(w, cfg, include_prior)?;
    let mut h = asm.h.clone();
    let lmax0 = h
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .amax();
    if lmax0 <= 0.0 {
        return Err(ObsvError::ZeroHessian);
    }
    if !include_prior || w.prior.is_none() {
        let gauge = gauge_directions(w, &asm.layout);
        h = deflate_gauge(&h, &gauge, lmax0);
    }
    let t0 = std::time::Instant::now();
    let eig = h.clone().symmetric_eigen();
    let eig_wall_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lmax = *vals.last().unwrap();
    let thresh = SMALL_EIG_REL * lmax;
    let small_idx: Vec<usize> =
        (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] < thresh).collect();

    let d = driving_direction(w)?;
    let (ratio, _) = roll_ratio(&h, &asm.layout, &w.extrinsics, &d)?;

    let direction_overlaps = match analytic_null_directions(w, &asm.layout, &d) {
        Ok(dirs) => dirs
            .iter()
            .map(|v| small_idx.iter().map(|&i| eig.eigenvectors.column(i).dot(v).powi(2)).sum())
            .collect(),
        Err(ObsvError::NotStraight(_)) => Vec::new(),
        Err(e) => return Err(e),
    };

    Ok(ObsvReport {
        eigenvalues: vals,
        roll_ratio: ratio,
        small_eig_count: small_idx.len(),
        direction_overlaps,
        eig_wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MotionState;
    use crate::solver::testutil::{solver_cfg, truth_window, zero_noise};
    use crate::solver::Frame;
    use crate::sim::{Segment, SensorRig, TrajectorySpec};

    fn quiet_rig() -> SensorRig {
        SensorRig { noise: zero_noise(), ..SensorRig::default() }
    }

    fn straight_spec() -> TrajectorySpec {
        TrajectorySpec {
            segments: vec![Segment::Straight { length: 40.0, speed: 2.0 }],
            ..TrajectorySpec::default()
        }
    }

    #[test]
    fn empty_factor_set_gives_zero_hessian() {
        let rig = quiet_rig();
        let (mut w, _) = truth_window(&straight_spec(), &rig, 2, 40, 3);
        w.preints.clear();
        w.landmarks.clear();
        w.tracks.clear();
        w.prior = None;
        let mut cfg = solver_cfg(&rig);
        cfg.roll_prior_weight = 0.0;
        let asm = assemble_hessian(&w, &cfg, false).unwrap();
        assert_eq!(asm.h.amax(), 0.0);
    }

    #[test]
    fn single_factor_hessian_is_jtj_and_symmetric() {
        let rig = quiet_rig();
        let (mut w, _) = truth_window(&straight_spec(), &rig, 2, 40, 3);
        w.landmarks.clear();
        w.tracks.clear();
        w.prior = None;
        let cfg = solver_cfg(&rig);
        let asm = assemble_hessian(&w, &cfg, false).unwrap();
        // Reference JᵀJ from the raw factor evaluation.
        let eval = crate::factors::imuodo_residual(
            &w.frames[0].state,
            &w.frames[1].state,
            &w.preints[0],
            &w.extrinsics,
            &cfg.gravity_w,
            true,
        )
        .unwrap();
        let n: usize = asm.layout.iter().map(|k| k.dim()).sum();
        let mut j = DMatrix::zeros(18, n);
        let mut off = 0;
        for k in &asm.layout {
            let src: Option<nalgebra::DMatrix<f64>> = match k {
                BlockKey::FramePos(id) | BlockKey::FrameVel(id) | BlockKey::FrameAtt(id)
                | BlockKey::FrameBa(id) | BlockKey::FrameBw(id) => {
                    let jac = if *id == 0 { &eval.j_state_k } else { &eval.j_state_k1 };
                    let col = match k {
                        BlockKey::FramePos(_) => 0,
                        BlockKey::FrameVel(_) => 3,
                        BlockKey::FrameAtt(_) => 6,
                        BlockKey::FrameBa(_) => 9,
                        _ => 12,
                    };
                    let mut m = DMatrix::zeros(18, 3);
                    m.copy_from(&jac.columns(col, 3));
                    Some(m)
                }
                BlockKey::ExtRboAtt => Some(DMatrix::from_column_slice(18, 3, eval.j_rbo.as_slice())),
                BlockKey::ExtPbo => Some(DMatrix::from_column_slice(18, 3, eval.j_pbo.as_slice())),
                _ => None,
            };
            if let Some(m) = src {
                j.view_mut((0, off), (18, 3)).copy_from(&m);
            }
            off += k.dim();
        }
        let href = j.transpose() * &j;
        assert!((&asm.h - &href).amax() < 1e-12 * (1.0 + href.amax()));
        assert!((&asm.h - asm.h.transpose()).amax() < 1e-12 * (1.0 + href.amax()));
    }

    #[test]
    fn identity_hessian_roll_ratio_is_one() {
        let layout = vec![BlockKey::ExtRbcAtt, BlockKey::ExtPbc];
        let h = DMatrix::identity(6, 6);
        let ext = Extrinsics::identity();
        let (ratio, _) = roll_ratio(&h, &layout, &ext, &Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn driving_direction_forward_and_reverse() {
        let rig = quiet_rig();
        let (w, _) = truth_window(&straight_spec(), &rig, 5, 40, 3);
        let d = driving_direction(&w).unwrap();
        assert!((d - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        // Per-pair agreement.
        for pair in w.frames.windows(2) {
            let di = (pair[0].state.q.inverse() * (pair[1].state.p - pair[0].state.p)).normalize();
            assert!((di - d).norm() < 1e-6);
        }
        // Reversed motion.
        let mut wr = w.clone();
        for (i, f) in wr.frames.iter_mut().enumerate() {
            f.state.p = Vec3::new(-(i as f64) * 0.2, 0.0, 0.0);
        }
        let d = driving_direction(&wr).unwrap();
        assert!((d - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
        // Insufficient displacement.
        let wr2 = Window {
            frames: vec![
                Frame { id: 0, t: 0.0, state: MotionState::identity() },
                Frame { id: 1, t: 0.1, state: MotionState::identity() },
            ],
            ..w.clone()
        };
        assert!(matches!(
            driving_direction(&wr2),
            Err(ObsvError::InsufficientDisplacement(_))
        ));
    }

    #[test]
    fn straight_line_nulls_and_small_subspace() {
        let rig = quiet_rig();
        let (mut w, _) = truth_window(&straight_spec(), &rig, 8, 150, 3);
        w.prior = None; // analyze deflates gauge analytically
        let mut cfg = solver_cfg(&rig);
        cfg.roll_prior_weight = 0.0; // leave the R^b_o roll unconstrained too
        let asm = assemble_hessian(&w, &cfg, false).unwrap();
        let d = driving_direction(&w).unwrap();
        let dirs = analytic_null_directions(&w, &asm.layout, &d).unwrap();
        assert_eq!(dirs.len(), 7);
        let lmax = asm.h.clone().symmetric_eigen().eigenvalues.amax();
        for (i, v) in dirs.iter().enumerate() {
            let hv = (&asm.h * v).norm();
            assert!(hv < 1e-8 * lmax, "direction {i}: |Hv|/λmax = {}", hv / lmax);
        }

        let report = analyze(&w, &cfg, false).unwrap();
        assert!(report.small_eig_count >= 7, "small count {}", report.small_eig_count);
        assert_eq!(report.direction_overlaps.len(), 7);
        for (i, o) in report.direction_overlaps.iter().enumerate() {
            assert!(*o > 0.99, "direction {i} overlap {o}");
        }
        assert!(report.roll_ratio < 1e-8, "roll ratio {}", report.roll_ratio);

        // Cost probe: perturbing along each direction leaves the cost at
        // its (zero) floor.
        for v in &dirs {
            for s in [1e-6, -1e-6] {
                let cand = w.apply_step(&asm.layout, &(v * s));
                let c = crate::solver::evaluate_cost(&cand, &cfg, false).unwrap().total();
                assert!(c < 1e-12, "cost probe {c}");
            }
        }

        // Eigensolve residual sanity on the deflated matrix.
        let gauge = gauge_directions(&w, &asm.layout);
        let hd = deflate_gauge(&asm.h, &gauge, lmax);
        let eig = hd.clone().symmetric_eigen();
        for i in 0..eig.eigenvalues.len() {
            let v = eig.eigenvectors.column(i);
            let r = (&hd * v - v * eig.eigenvalues[i]).norm();
            assert!(r < 1e-8 * lmax);
        }
    }

    #[test]
    fn turning_restores_observability() {
        let rig = quiet_rig();
        let straight = {
            let (mut w, _) = truth_window(&straight_spec(), &rig, 8, 150, 3);
            w.prior = None;
            w
        };
        let turn_spec = TrajectorySpec {
            segments: vec![
                Segment::Straight { length: 2.0, speed: 2.0 },
                Segment::Arc { angle_deg: 90.0, radius: 3.0, speed: 2.0 },
            ],
            imu_rate: 1000.0,
            wheel_rate: 1000.0,
            ..TrajectorySpec::default()
        };
        let turning = {
            let (mut w, _) = truth_window(&turn_spec, &rig, 30, 250, 3);
            w.prior = None;
            w
        };
        let mut cfg = solver_cfg(&rig);
        cfg.roll_prior_weight = 0.0;
        let r_straight = analyze(&straight, &cfg, false).unwrap();
        let r_turn = analyze(&turning, &cfg, false).unwrap();
        assert!(
            r_turn.roll_ratio > 100.0 * r_straight.roll_ratio,
            "straight {} vs turn {}",
            r_straight.roll_ratio,
            r_turn.roll_ratio
        );
        // Once the turn is in the window the analytic directions stop being
        // quiet: overlaps with the small subspace collapse.
        let asm = assemble_hessian(&turning, &cfg, false).unwrap();
        let d = driving_direction(&turning).unwrap();
        assert!(matches!(
            analytic_null_directions(&turning, &asm.layout, &d),
            Err(ObsvError::NotStraight(_))
        ));
    }
}
