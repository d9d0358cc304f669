//! TOML run/simulation configuration.

use crate::preint::NoiseSpec;
use crate::sim::TrajectorySpec;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Full configuration for the `run` and `obsv` subcommands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default)]
    pub estimator: EstimatorParams,
    #[serde(default)]
    pub modes: ModeFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// JSONL sensor log (imu / wheel / img records).
    pub sensor_log: PathBuf,
    /// Ground-truth trajectory in TUM format (optional; evaluation only).
    pub ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorParams {
    /// Sliding-window size K (keyframes jointly optimized).
    pub window_size: usize,
    /// Delay T₂ (seconds) between freeing the extrinsics and spawning the
    /// backward pass.
    pub backward_delay: f64,
    /// In-window heading change (degrees) that declares a turn.
    pub turn_threshold_deg: f64,
    /// Marginal-prior scale factor μ applied when the prior cost share
    /// exceeds `marg_ratio_max`.
    pub marg_scale_mu: f64,
    /// Prior/total cost ratio bound r.
    pub marg_ratio_max: f64,
    pub noise: NoiseSpec,
    pub keyframe_parallax_px: f64,
    pub keyframe_min_tracked: usize,
    /// Number of optimize() calls over which the accelerometer-bias estimate
    /// must be stable before extrinsics are freed.
    pub bias_window: usize,
    /// Max pairwise bias difference (m/s²) counted as converged.
    pub bias_tol: f64,
    /// Inverse-depth fallback for landmarks that cannot be triangulated yet.
    pub default_depth: f64,
    pub seed: u64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        EstimatorParams {
            window_size: 10,
            backward_delay: 30.0,
            turn_threshold_deg: 20.0,
            marg_scale_mu: 0.85,
            marg_ratio_max: 0.4,
            noise: NoiseSpec::default(),
            keyframe_parallax_px: 10.0,
            keyframe_min_tracked: 50,
            bias_window: 20,
            bias_tol: 0.01,
            default_depth: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeFlags {
    /// Interleave forward and backward deterministically instead of running
    /// the backward pass on its own thread.
    pub deterministic: bool,
    pub forward_only: bool,
    /// Include the marginal prior in observability Hessians.
    pub include_prior: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        ModeFlags { deterministic: true, forward_only: false, include_prior: false }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.estimator;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid(msg.to_string()))
            }
        };
        check(e.marg_scale_mu > 0.0 && e.marg_scale_mu < 1.0, "marg_scale_mu must be in (0,1)")?;
        check(e.marg_ratio_max > 0.0 && e.marg_ratio_max < 1.0, "marg_ratio_max must be in (0,1)")?;
        check(e.backward_delay > 0.0, "backward_delay must be positive")?;
        check(e.turn_threshold_deg > 0.0, "turn_threshold_deg must be positive")?;
        check(e.window_size >= 2, "window_size must be at least 2")?;
        Ok(())
    }
}

/// Configuration for the `simulate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_landmarks")]
    pub landmarks: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_landmarks() -> usize {
    300
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, ConfigError> {
        let cfg: SimConfig = toml::from_str(text)?;
        if cfg.landmarks == 0 {
            return Err(ConfigError::Invalid("landmarks must be positive".into()));
        }
        Ok(cfg)
    }
}
