//! Turning-angle sweep: how accelerometer-bias accuracy depends on the
//! amount of rotational excitation in a single turn.

use crate::engine::{Engine, EngineConfig, EngineError, SensorData};
use crate::geometry::{MotionState, Vec3};
use crate::preint::NoiseSpec;
use crate::sim::{single_turn_spec, SensorRig};
use crate::solver::{ParamPolicy, SolverConfig};

/// One sweep result row.
#[derive(Debug, Clone, Copy)]
pub struct SweepRow {
    pub angle_deg: f64,
    /// Mean ‖b̂_a − b_a‖ over all post-turn frames, m/s².
    pub mean_bias_err: f64,
    /// Mean ‖b̂_a(k) − b̂_a(k−1)‖ between successive post-turn frames, m/s².
    pub mean_successive_diff: f64,
}

/// Parse an `start:stop:step` range of angles in degrees (inclusive ends).
pub fn parse_angle_range(s: &str) -> Option<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return None;
    }
    let (start, stop, step): (f64, f64, f64) =
        (parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?);
    if step <= 0.0 || stop < start {
        return None;
    }
    let n = ((stop - start) / step).round() as usize;
    Some((0..=n).map(|i| start + i as f64 * step).collect())
}

/// Run one forward-only sequence with a single turn of `angle_deg`, the
/// accelerometer bias free from the start, and extrinsics fixed at the true
/// values, and summarize the post-turn bias estimate.
pub fn bias_error_at_angle(
    angle_deg: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<SweepRow, EngineError> {
    let pre_m = 30.0;
    let post_m: f64 = std::env::var("WOVIO_POST_M")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(40.0);
    let speed = 2.0;
    let spec = single_turn_spec(angle_deg, pre_m, post_m, speed);
    let mut rig = SensorRig::default();
    rig.noise = *noise;
    let (data, truth) = SensorData::from_sim(&spec, &rig, 300, seed)?;
    let f0 = &truth.frames[0];
    let cfg = EngineConfig {
        solver: SolverConfig {
            camera: rig.camera,
            gravity_w: rig.gravity_w,
            roll_prior_ref: rig.extrinsics_true.rbo,
            ..SolverConfig::default()
        },
        noise: *noise,
        initial_state: MotionState { p: f0.p, v: f0.v, q: f0.q, ba: Vec3::zeros(), bw: Vec3::zeros() },
        initial_extrinsics: rig.extrinsics_true,
        forward_only: true,
        policy_override: Some(ParamPolicy {
            fix_accel_bias: false,
            fix_extrinsics: true,
            zero_accel_bias: false,
        }),
        ..EngineConfig::default()
    };
    let mut e = Engine::new(cfg, data);
    e.run()?;

    // Skip the first seconds after the turn so the summary reflects the
    // converged estimate, not the transient while information accumulates.
    let settle_s = 5.0;
    let turn_end = pre_m / speed + angle_deg.abs().to_radians() * 10.0 / speed + settle_s;
    let post: Vec<&(f64, Vec3)> = e.ba_trace.iter().filter(|(t, _)| *t >= turn_end).collect();
    assert!(post.len() > 2, "post-turn segment too short");
    let mean_bias_err =
        post.iter().map(|(_, ba)| (ba - rig.bias_a_true).norm()).sum::<f64>() / post.len() as f64;
    let mean_successive_diff = post
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).norm())
        .sum::<f64>()
        / (post.len() - 1) as f64;
    Ok(SweepRow { angle_deg, mean_bias_err, mean_successive_diff })
}

/// Sweep over turn angles, averaging `reps` independently seeded sequences
/// per angle to suppress single-run noise.
pub fn bias_sweep(
    angles: &[f64],
    noise: &NoiseSpec,
    seed: u64,
    reps: usize,
) -> Result<Vec<SweepRow>, EngineError> {
    angles
        .iter()
        .enumerate()
        .map(|(_i, &a)| {
            let mut err = 0.0;
            let mut diff = 0.0;
            // The same seeds are reused across angles (paired comparisons):
            // differences between angles then reflect observability, not
            // noise realizations.
            for r in 0..reps {
                let row = bias_error_at_angle(a, noise, seed + 7919 * r as u64)?;
                err += row.mean_bias_err;
                diff += row.mean_successive_diff;
            }
            Ok(SweepRow {
                angle_deg: a,
                mean_bias_err: err / reps as f64,
                mean_successive_diff: diff / reps as f64,
            })
        })
        .collect()
}
