//! Trajectory accuracy metrics: globally aligned RMSE and start-aligned
//! drift.

use crate::geometry::{Mat3, Pose, Vec3};
use nalgebra::SVD;
use thiserror::Error;

/// Maximum timestamp difference for associating an estimate with a
/// ground-truth sample (half the nominal 10 Hz frame period).
pub const MATCH_WINDOW_S: f64 = 0.05;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("only {0} time-matched pose pairs (need at least {1})")]
    TooFewMatches(usize, usize),
    #[error("trajectory path length {0:.1} m is shorter than the {1:.1} m skip distance")]
    TooShort(f64, f64),
}

/// A timestamped pose sample; trajectories are slices sorted by time.
pub type TrajSample = (f64, Pose);

/// Associate each estimated sample with the nearest ground-truth sample in
/// time, keeping pairs closer than [`MATCH_WINDOW_S`].
fn associate<'a>(est: &'a [TrajSample], gt: &'a [TrajSample]) -> Vec<(&'a Pose, &'a Pose)> {
    let mut out = Vec::new();
    for (t, pe) in est {
        let idx = gt.partition_point(|(tg, _)| tg < t);
        let mut best: Option<(f64, &Pose)> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some((tg, pg)) = gt.get(cand) {
                let d = (tg - t).abs();
                if d <= MATCH_WINDOW_S && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, pg));
                }
            }
        }
        if let Some((_, pg)) = best {
            out.push((pe, pg));
        }
    }
    out
}

/// Closed-form rigid (rotation + translation, no scale) alignment minimizing
/// Σ‖R·a_i + t − b_i‖².
pub fn align_rigid(a: &[Vec3], b: &[Vec3]) -> (Mat3, Vec3) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Mat3::zeros();
    for (pa, pb) in a.iter().zip(b) {
        h += (pb - cb) * (pa - ca).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let t = cb - r * ca;
    (r, t)
}

/// Root-mean-square position error after optimal rigid alignment of the
/// estimate onto the ground truth. Requires at least 3 time-matched pairs.
pub fn ate(est: &[TrajSample], gt: &[TrajSample]) -> Result<f64, MetricError> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(MetricError::TooFewMatches(pairs.len(), 3));
    }
    let pa: Vec<Vec3> = pairs.iter().map(|(e, _)| e.translation).collect();
    let pb: Vec<Vec3> = pairs.iter().map(|(_, g)| g.translation).collect();
    let (r, t) = align_rigid(&pa, &pb);
    let sq: f64 = pa.iter().zip(&pb).map(|(a, b)| (r * a + t - b).norm_squared()).sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

/// Mean position error after re-basing the estimate so that its pose at the
/// start frame coincides with ground truth. The start frame is the first
/// frame at which the cumulative ground-truth path length reaches
/// `skip_distance` (meters); errors are averaged over all later frames.
pub fn start_aligned_error(
    est: &[TrajSample],
    gt: &[TrajSample],
    skip_distance: f64,
) -> Result<f64, MetricError> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(MetricError::TooFewMatches(pairs.len(), 3));
    }
    let mut cum = 0.0;
    let mut start = None;
    for i in 0..pairs.len() {
        if i > 0 {
            cum += (pairs[i].1.translation - pairs[i - 1].1.translation).norm();
        }
        if cum >= skip_distance {
            start = Some(i);
            break;
        }
    }
    let Some(k) = start else {
        return Err(MetricError::TooShort(cum, skip_distance));
    };
    if k + 1 >= pairs.len() {
        return Err(MetricError::TooShort(cum, skip_distance));
    }
    // Re-base: T maps the estimated start pose onto the ground-truth one.
    let (pe0, pg0) = pairs[k];
    let r = pg0.rotation * pe0.rotation.inverse();
    let sum: f64 = pairs[k + 1..]
        .iter()
        .map(|(pe, pg)| {
            let p = r * (pe.translation - pe0.translation) + pg0.translation;
            (p - pg.translation).norm()
        })
        .sum();
    Ok(sum / (pairs.len() - k - 1) as f64)
}
