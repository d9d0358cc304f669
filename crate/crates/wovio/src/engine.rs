//! Bidirectional trajectory computation: a forward sliding-window estimator
//! with phased parameter freeing (accelerometer bias after the first turn,
//! extrinsics after bias convergence), a backward estimator spawned from a
//! snapshot of the forward window that re-estimates the trajectory back to
//! frame 0, and real-time stitching of the two into one continuous output.

use crate::factors::{Extrinsics, Landmark};
use crate::geometry::{log_so3_quat, MotionState, Pose, Vec3};
use crate::preint::{integrate, ImuSample, NoiseSpec, PreintError, WheelSample};
use crate::sim::{
    self, generate_truth, synthesize_features, synthesize_imu, synthesize_wheel, CameraModel,
    SensorRig, SimError, TrajectorySpec, Truth, TruthSample,
};
use crate::solver::{
    anchor_prior, bound_marginal_prior, is_keyframe, marginalize, optimize, shift_inverse_depth,
    Frame, MargMode, ParamPolicy, SolveError, SolverConfig, Window,
};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("frame {0} arrives out of order")]
    OutOfOrder(u64),
    #[error("no sensor coverage of the gap [{0}, {1}]")]
    MissingCoverage(f64, f64),
    #[error("backward pass requested before the extrinsics-free phase")]
    SpawnBeforeReady,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Preint(#[from] PreintError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Estimator phases, advancing monotonically in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PhaseState {
    PreTurn,
    TurnDetected,
    BiasConverged,
    ExtrinsicsFree,
    BackwardRunning,
    BackwardDone,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseEvent {
    pub t: f64,
    pub frame: u64,
    pub phase: PhaseState,
}

/// Per-frame pose record. `pose_refined` is only ever written by the
/// backward pass; the forward pass never overwrites it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub t: f64,
    pub pose_forward: Pose,
    pub pose_refined: Option<Pose>,
    pub keyframe: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub entries: BTreeMap<u64, LogEntry>,
}

impl TrajectoryLog {
    /// Backward progress frontier: smallest refined frame id.
    pub fn refined_frontier(&self) -> Option<u64> {
        self.entries.iter().find(|(_, e)| e.pose_refined.is_some()).map(|(id, _)| *id)
    }
}

/// The complete recorded sensor input: per-frame feature observations plus
/// the raw inertial and wheel streams, so any frame gap can be re-integrated.
#[derive(Debug, Clone)]
pub struct SensorData {
    pub frame_times: Vec<f64>,
    /// Per frame: (landmark id, pixel) observations.
    pub features: Vec<Vec<(u64, (f64, f64))>>,
    pub imu: Vec<ImuSample>,
    pub wheel: Vec<WheelSample>,
}

impl SensorData {
    /// Synthesize a full dataset from a trajectory spec and sensor rig.
    pub fn from_sim(
        spec: &TrajectorySpec,
        rig: &SensorRig,
        landmark_count: usize,
        seed: u64,
    ) -> Result<(SensorData, Truth), EngineError> {
        let mut truth = generate_truth(spec)?;
        // Insert left/right-limit sample pairs at segment junctions so no
        // integration step straddles a body-rate or acceleration jump; the
        // zero-length step between the duplicates carries the discontinuity
        // exactly and is skipped by the integrator.
        let junctions = sim::junction_times(spec);
        insert_junction_samples(&mut truth.imu_states, spec, &junctions);
        insert_junction_samples(&mut truth.wheel_states, spec, &junctions);
        let imu = synthesize_imu(&truth, rig, seed);
        let wheel = synthesize_wheel(&truth, rig, seed + 1);
        let fs = synthesize_features(&truth, rig, landmark_count, seed + 2)?;
        let mut features: Vec<Vec<(u64, (f64, f64))>> = vec![Vec::new(); truth.frames.len()];
        for o in &fs.observations {
            features[o.frame_id as usize].push((o.landmark_id, (o.u, o.v)));
        }
        let frame_times = truth.frames.iter().map(|s| s.t).collect();
        Ok((SensorData { frame_times, features, imu, wheel }, truth))
    }

    fn imu_slice(&self, t0: f64, t1: f64) -> Result<&[ImuSample], EngineError> {
        slice_by_time(&self.imu, |s| s.t, t0, t1)
    }

    fn wheel_slice(&self, t0: f64, t1: f64) -> Result<&[WheelSample], EngineError> {
        slice_by_time(&self.wheel, |s| s.t, t0, t1)
    }
}

/// Longest inter-keyframe gap a non-keyframe discard may create, seconds.
const MAX_MERGED_GAP_S: f64 = 0.5;

fn insert_junction_samples(
    states: &mut Vec<TruthSample>,
    spec: &TrajectorySpec,
    junctions: &[f64],
) {
    const EPS: f64 = 1e-9;
    for &tj in junctions {
        let idx = states.partition_point(|s| s.t < tj - EPS);
        if idx < states.len() && (states[idx].t - tj).abs() < EPS {
            // The grid sample already carries the right limit; prepend the
            // left limit at the same timestamp.
            states.insert(idx, sim::state_at_side(spec, states[idx].t, true));
        } else {
            states.insert(idx, sim::state_at_side(spec, tj, false));
            states.insert(idx, sim::state_at_side(spec, tj, true));
        }
    }
}

fn slice_by_time<T>(
    samples: &[T],
    time: impl Fn(&T) -> f64,
    t0: f64,
    t1: f64,
) -> Result<&[T], EngineError> {
    let eps = 1e-9;
    let a = samples.partition_point(|s| time(s) < t0 - eps);
    let b = samples.partition_point(|s| time(s) <= t1 + eps);
    if a >= b || time(&samples[a]) > t0 + eps || time(&samples[b - 1]) < t1 - eps {
        return Err(EngineError::MissingCoverage(t0, t1));
    }
    Ok(&samples[a..b])
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub solver: SolverConfig,
    /// Covariance model for pre-integration.
    pub noise: NoiseSpec,
    /// Sliding-window size K.
    pub window_size: usize,
    pub turn_threshold_deg: f64,
    /// Bias-convergence check: last N estimates within tol (m/s²).
    pub bias_window: usize,
    pub bias_tol: f64,
    /// Delay T₂ between freeing the extrinsics and spawning the backward
    /// pass, seconds.
    pub backward_delay: f64,
    pub keyframe_parallax_px: f64,
    pub keyframe_min_tracked: usize,
    /// Bounded-marginalization scaling factor μ and trigger ratio r.
    pub marg_scale_mu: f64,
    pub marg_ratio_max: f64,
    pub anchor_weight: f64,
    pub forward_only: bool,
    pub initial_state: MotionState,
    /// Starting extrinsics estimate (held fixed until the phase machine
    /// frees them).
    pub initial_extrinsics: Extrinsics,
    /// Fallback landmark depth when triangulation is degenerate, meters.
    pub default_depth: f64,
    /// When set, the phase machine never touches the parameter policy (and
    /// never spawns the backward pass); used by calibration sweeps that fix
    /// or free parameters by hand.
    pub policy_override: Option<ParamPolicy>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            solver: SolverConfig::default(),
            noise: NoiseSpec::default(),
            window_size: 10,
            turn_threshold_deg: 20.0,
            bias_window: 20,
            bias_tol: 0.01,
            backward_delay: 30.0,
            keyframe_parallax_px: 10.0,
            keyframe_min_tracked: 50,
            marg_scale_mu: 0.85,
            marg_ratio_max: 0.4,
            anchor_weight: 1e4,
            forward_only: false,
            initial_state: MotionState::identity(),
            initial_extrinsics: Extrinsics::identity(),
            default_depth: 10.0,
            policy_override: None,
        }
    }
}

/// Turning detection: max over frame pairs of the Z-axis projection of the
/// relative rotation log, in degrees.
pub fn detect_turning(w: &Window, threshold_deg: f64) -> (f64, bool) {
    let mut angle = 0.0f64;
    for i in 0..w.frames.len() {
        for j in i + 1..w.frames.len() {
            let rel = w.frames[i].state.q.inverse() * w.frames[j].state.q;
            angle = angle.max(log_so3_quat(&rel).z.abs());
        }
    }
    let deg = angle.to_degrees();
    (deg, deg > threshold_deg)
}

/// True when the last `n` bias estimates all lie within `tol` of each other.
pub fn bias_converged(history: &[Vec3], n: usize, tol: f64) -> bool {
    if history.len() < n {
        return false;
    }
    let tail = &history[history.len() - n..];
    for i in 0..tail.len() {
        for j in i + 1..tail.len() {
            if (tail[i] - tail[j]).norm() >= tol {
                return false;
            }
        }
    }
    true
}

/// Midpoint triangulation of a landmark's z-depth in camera `a`.
fn triangulate_depth(
    cam: &CameraModel,
    sa: &MotionState,
    sb: &MotionState,
    ext: &crate::factors::Extrinsics,
    uv_a: (f64, f64),
    uv_b: (f64, f64),
) -> Option<f64> {
    let da = sa.rot() * (ext.rbc * cam.unproject(uv_a.0, uv_a.1));
    let db = sb.rot() * (ext.rbc * cam.unproject(uv_b.0, uv_b.1));
    let oa = sa.rot() * ext.pbc + sa.p;
    let ob = sb.rot() * ext.pbc + sb.p;
    let (aa, ab, bb) = (da.dot(&da), da.dot(&db), db.dot(&db));
    let det = aa * bb - ab * ab;
    if det.abs() < 1e-9 * aa * bb {
        return None;
    }
    let rhs = ob - oa;
    let s = (bb * da.dot(&rhs) - ab * db.dot(&rhs)) / det;
    if s > crate::factors::MIN_FACTOR_DEPTH {
        Some(s)
    } else {
        None
    }
}

fn forward_propagate(prev: &MotionState, p: &crate::preint::Preintegrated, g: &Vec3) -> MotionState {
    let dt = p.dt_total;
    let r = prev.rot();
    MotionState {
        p: prev.p + prev.v * dt + g * (0.5 * dt * dt) + r * p.alpha,
        v: prev.v + g * dt + r * p.beta,
        q: prev.q * p.gamma,
        ba: prev.ba,
        bw: prev.bw,
    }
}

fn inverse_propagate(next: &MotionState, p: &crate::preint::Preintegrated, g: &Vec3) -> MotionState {
    // Time-reversed mean propagation: recover the earlier state from the
    // later one and the increment over the gap.
    let dt = p.dt_total;
    let q_prev = next.q * p.gamma.inverse();
    let r = q_prev.to_rotation_matrix().matrix().clone_owned();
    let v_prev = next.v - g * dt - r * p.beta;
    MotionState {
        p: next.p - v_prev * dt - g * (0.5 * dt * dt) - r * p.alpha,
        v: v_prev,
        q: q_prev,
        ba: next.ba,
        bw: next.bw,
    }
}

/// Backward estimator state: a window sliding toward frame 0.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub window: Window,
    /// Next (earlier) frame to prepend; negative once frame 0 is processed.
    next_id: i64,
    /// Frames at/after this id are never refined.
    spawn_newest: u64,
    pending: BTreeMap<u64, Vec<(u64, (f64, f64))>>,
    pub done: bool,
}

pub struct Engine {
    pub cfg: EngineConfig,
    pub data: SensorData,
    pub window: Window,
    pub log: TrajectoryLog,
    pub phase: PhaseState,
    pub events: Vec<PhaseEvent>,
    pub backward: Option<BackwardPass>,
    pub turn_time: Option<f64>,
    pub extrinsics_free_time: Option<f64>,
    /// Marginal-prior cost share after each optimize call (forward then
    /// backward, in scheduling order).
    pub marg_ratios: Vec<f64>,
    /// Accelerometer-bias estimate of the newest frame after each forward
    /// optimize call.
    pub ba_trace: Vec<(f64, Vec3)>,
    next_frame: usize,
    ba_history: Vec<Vec3>,
    pending: BTreeMap<u64, Vec<(u64, (f64, f64))>>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, data: SensorData) -> Engine {
        let window = Window {
            frames: Vec::new(),
            preints: Vec::new(),
            landmarks: BTreeMap::new(),
            tracks: BTreeMap::new(),
            extrinsics: cfg.initial_extrinsics,
            prior: None,
            policy: cfg.policy_override.unwrap_or(ParamPolicy {
                fix_accel_bias: true,
                fix_extrinsics: true,
                zero_accel_bias: true,
            }),
        };
        Engine {
            cfg,
            data,
            window,
            log: TrajectoryLog::default(),
            phase: PhaseState::PreTurn,
            events: Vec::new(),
            backward: None,
            turn_time: None,
            extrinsics_free_time: None,
            marg_ratios: Vec::new(),
            ba_trace: Vec::new(),
            next_frame: 0,
            ba_history: Vec::new(),
            pending: BTreeMap::new(),
        }
    }

    fn event(&mut self, phase: PhaseState, t: f64, frame: u64) {
        self.phase = phase;
        self.events.push(PhaseEvent { t, frame, phase });
    }

    fn sync_forward_log(&mut self) {
        for f in &self.window.frames {
            let e = self.log.entries.entry(f.id).or_insert(LogEntry {
                t: f.t,
                pose_forward: Pose::new(f.state.q, f.state.p),
                pose_refined: None,
                keyframe: true,
            });
            e.pose_forward = Pose::new(f.state.q, f.state.p);
        }
    }

    /// Register the new frame's feature observations; create landmarks once
    /// they hold two in-window observations (anchored at the earliest for the
    /// forward pass).
    fn add_observations(&mut self, id: u64) {
        for &(lid, uv) in &self.data.features[id as usize] {
            if let Some(track) = self.window.tracks.get_mut(&lid) {
                track.push((id, uv));
            } else {
                self.pending.entry(lid).or_default().push((id, uv));
            }
        }
        let ready: Vec<u64> =
            self.pending.iter().filter(|(_, t)| t.len() >= 2).map(|(id, _)| *id).collect();
        if std::env::var("WOVIO_TRACE").is_ok() {
            eprintln!(
                "frame {} raw {} tracked {} pending {} promoting {}",
                id,
                self.data.features[id as usize].len(),
                self.data.features[id as usize]
                    .iter()
                    .filter(|(l, _)| self.window.tracks.contains_key(l))
                    .count(),
                self.pending.len(),
                ready.len()
            );
        }
        for lid in ready {
            let track = self.pending.remove(&lid).unwrap();
            let (anchor, uv_a) = track[0];
            let (other, uv_b) = *track.last().unwrap();
            let sa = self.window.frame(anchor).unwrap().state;
            let sb = self.window.frame(other).unwrap().state;
            let depth =
                triangulate_depth(&self.cfg.solver.camera, &sa, &sb, &self.window.extrinsics, uv_a, uv_b)
                    .unwrap_or(self.cfg.default_depth);
            self.window.landmarks.insert(
                lid,
                Landmark { id: lid, anchor_frame: anchor, first_obs: uv_a, inv_depth: 1.0 / depth },
            );
            self.window.tracks.insert(lid, track);
        }
    }

    fn strip_pending(&mut self, id: u64) {
        for track in self.pending.values_mut() {
            track.retain(|(fid, _)| *fid != id);
        }
        self.pending.retain(|_, t| !t.is_empty());
    }

    /// Drop a landmark from the window but keep its surviving observations as
    /// a pending track. Without this, a landmark promoted from two consecutive
    /// frames dies as soon as either frame is discarded, and on low-parallax
    /// stretches (straight driving) no new landmark ever outlives the discard
    /// of its anchor — the window starves as old landmarks leave the view.
    fn demote_landmark(
        w: &mut Window,
        pending: &mut BTreeMap<u64, Vec<(u64, (f64, f64))>>,
        lid: u64,
    ) {
        w.landmarks.remove(&lid);
        if let Some(track) = w.tracks.remove(&lid) {
            if !track.is_empty() {
                pending.insert(lid, track);
            }
        }
    }

    /// Remove a non-keyframe from the window without marginalization: drop
    /// its observations and re-integrate the merged inertial/wheel gap.
    fn discard_frame(
        w: &mut Window,
        data: &SensorData,
        cam: &CameraModel,
        noise: &NoiseSpec,
        pending: &mut BTreeMap<u64, Vec<(u64, (f64, f64))>>,
        id: u64,
    ) -> Result<(), EngineError> {
        let idx = w.frame_index(id).ok_or(SolveError::FrameNotInWindow(id))?;
        // Re-anchor landmarks anchored at the discarded frame.
        let dropped_state = w.frames[idx].state;
        let anchored: Vec<u64> =
            w.landmarks.values().filter(|lm| lm.anchor_frame == id).map(|lm| lm.id).collect();
        for track in w.tracks.values_mut() {
            track.retain(|(fid, _)| *fid != id);
        }
        for lid in anchored {
            let track = match w.tracks.get(&lid) {
                Some(t) if t.len() >= 2 => t.clone(),
                _ => {
                    Self::demote_landmark(w, pending, lid);
                    continue;
                }
            };
            let (new_anchor, new_uv) = track[0];
            let new_state = w.frame(new_anchor).unwrap().state;
            let lm = w.landmarks.get_mut(&lid).unwrap();
            match shift_inverse_depth(
                cam,
                &dropped_state,
                &new_state,
                &w.extrinsics,
                lm.first_obs,
                lm.inv_depth,
            ) {
                Some(lam) => {
                    lm.anchor_frame = new_anchor;
                    lm.first_obs = new_uv;
                    lm.inv_depth = lam;
                }
                None => {
                    Self::demote_landmark(w, pending, lid);
                }
            }
        }
        let thin: Vec<u64> =
            w.tracks.iter().filter(|(_, t)| t.len() < 2).map(|(lid, _)| *lid).collect();
        for lid in thin {
            Self::demote_landmark(w, pending, lid);
        }
        // Merge the two adjacent gaps into one pre-integration.
        if idx > 0 && idx < w.frames.len() - 1 {
            let (prev, next) = (w.frames[idx - 1], w.frames[idx + 1]);
            let bias = if w.policy.zero_accel_bias { Vec3::zeros() } else { prev.state.ba };
            let p = integrate(
                data.imu_slice(prev.t, next.t)?,
                data.wheel_slice(prev.t, next.t)?,
                &bias,
                &prev.state.bw,
                &w.extrinsics.rbo,
                noise,
            )?;
            w.preints.remove(idx);
            w.preints[idx - 1] = p;
        } else if idx == 0 {
            w.preints.remove(0);
        } else {
            w.preints.remove(idx - 1);
        }
        w.frames.remove(idx);
        Ok(())
    }

    fn run_optimize(w: &mut Window, cfg: &EngineConfig, ratios: &mut Vec<f64>) -> Result<(), EngineError> {
        if w.frames.len() < 2 {
            return Ok(());
        }
        let stats = optimize(w, &cfg.solver)?;
        ratios.push(stats.marg_ratio);
        // Below this total cost the prior share is numerical noise (e.g. on
        // clean data); scaling there would only erode the gauge anchoring.
        const BOUND_COST_FLOOR: f64 = 1e-9;
        if stats.final_cost > BOUND_COST_FLOOR {
            if let Some(prior) = &mut w.prior {
                bound_marginal_prior(
                    prior,
                    stats.term_costs.prior,
                    stats.final_cost,
                    cfg.marg_scale_mu,
                    cfg.marg_ratio_max,
                );
            }
        }
        Ok(())
    }

    /// Process the next recorded frame. Returns false when the input is
    /// exhausted.
    pub fn forward_step(&mut self) -> Result<bool, EngineError> {
        if self.next_frame >= self.data.frame_times.len() {
            return Ok(false);
        }
        let id = self.next_frame as u64;
        let t = self.data.frame_times[self.next_frame];
        self.next_frame += 1;

        if self.window.frames.is_empty() {
            let mut st = self.cfg.initial_state;
            st.ba = Vec3::zeros();
            self.window.frames.push(Frame { id, t, state: st });
            self.window.prior = Some(anchor_prior(id, &st, self.cfg.anchor_weight));
            self.add_observations(id);
            self.sync_forward_log();
            return Ok(true);
        }

        let last = *self.window.frames.last().unwrap();
        if t <= last.t {
            return Err(EngineError::OutOfOrder(id));
        }
        let bias_a = if self.window.policy.zero_accel_bias { Vec3::zeros() } else { last.state.ba };
        let p = integrate(
            self.data.imu_slice(last.t, t)?,
            self.data.wheel_slice(last.t, t)?,
            &bias_a,
            &last.state.bw,
            &self.window.extrinsics.rbo,
            &self.cfg.noise,
        )?;
        let mut state = forward_propagate(&last.state, &p, &self.cfg.solver.gravity_w);
        if self.window.policy.zero_accel_bias {
            state.ba = Vec3::zeros();
        }
        self.window.frames.push(Frame { id, t, state });
        self.window.preints.push(p);
        self.add_observations(id);

        Self::run_optimize(&mut self.window, &self.cfg, &mut self.marg_ratios)?;
        self.sync_forward_log();
        self.ba_trace.push((t, self.window.frames.last().unwrap().state.ba));

        // Window management: non-keyframe second-newest discarded, else the
        // oldest frame is marginalized.
        if self.window.frames.len() > self.cfg.window_size {
            let n = self.window.frames.len();
            let second = self.window.frames[n - 2].id;
            let newest = self.window.frames[n - 1].id;
            let matches: Vec<((f64, f64), (f64, f64))> = self
                .window
                .tracks
                .values()
                .filter_map(|track| {
                    let a = track.iter().find(|(fid, _)| *fid == second)?;
                    let b = track.iter().find(|(fid, _)| *fid == newest)?;
                    Some((a.1, b.1))
                })
                .collect();
            // Discarding the second-newest frame merges its two gaps; cap the
            // merged span so low-parallax stretches (straight, forward-facing
            // camera) cannot starve the window of keyframes and overrun the
            // pre-integration interval limit.
            let merged_gap = self.window.frames[n - 1].t - self.window.frames[n - 3].t;
            // A frame the marginal prior references cannot be dropped without
            // invalidating the prior; keep it and marginalize the oldest.
            let in_prior = self
                .window
                .prior
                .as_ref()
                .map_or(false, |p| p.blocks.iter().any(|(k, _)| k.frame() == Some(second)));
            if merged_gap <= MAX_MERGED_GAP_S
                && !in_prior
                && !is_keyframe(&matches, self.cfg.keyframe_parallax_px, self.cfg.keyframe_min_tracked)
            {
                self.log.entries.get_mut(&second).unwrap().keyframe = false;
                Self::discard_frame(
                    &mut self.window,
                    &self.data,
                    &self.cfg.solver.camera,
                    &self.cfg.noise,
                    &mut self.pending,
                    second,
                )?;
                self.strip_pending(second);
            } else {
                let oldest = self.window.frames[0].id;
                marginalize(&mut self.window, oldest, MargMode::Oldest, &self.cfg.solver)?;
                self.strip_pending(oldest);
            }
        }

        self.advance_phase(t, id)?;
        Ok(true)
    }

    fn advance_phase(&mut self, t: f64, id: u64) -> Result<(), EngineError> {
        if self.cfg.policy_override.is_some() {
            return Ok(());
        }
        if self.phase == PhaseState::PreTurn {
            let (_, turned) = detect_turning(&self.window, self.cfg.turn_threshold_deg);
            if turned {
                self.turn_time = Some(t);
                self.window.policy.zero_accel_bias = false;
                self.window.policy.fix_accel_bias = false;
                self.event(PhaseState::TurnDetected, t, id);
            }
        } else if self.phase == PhaseState::TurnDetected {
            let ba = self.window.frames.last().unwrap().state.ba;
            self.ba_history.push(ba);
            if bias_converged(&self.ba_history, self.cfg.bias_window, self.cfg.bias_tol) {
                self.event(PhaseState::BiasConverged, t, id);
                self.window.policy.fix_extrinsics = false;
                self.extrinsics_free_time = Some(t);
                self.event(PhaseState::ExtrinsicsFree, t, id);
            }
        } else if self.phase == PhaseState::ExtrinsicsFree && !self.cfg.forward_only {
            if t >= self.extrinsics_free_time.unwrap() + self.cfg.backward_delay {
                self.spawn_backward()?;
                self.event(PhaseState::BackwardRunning, t, id);
            }
        }
        Ok(())
    }

    /// Snapshot the forward window for the backward pass: states, extrinsics,
    /// prior and pre-integrations are copied; each landmark is re-anchored to
    /// the latest frame observing it with its inverse depth shifted, dropped
    /// when the shifted depth is too small.
    pub fn spawn_backward(&mut self) -> Result<(), EngineError> {
        if self.phase < PhaseState::ExtrinsicsFree {
            return Err(EngineError::SpawnBeforeReady);
        }
        let mut w = self.window.clone();
        let ids: Vec<u64> = w.landmarks.keys().copied().collect();
        for lid in ids {
            let track = w.tracks[&lid].clone();
            let (new_anchor, new_uv) = *track.last().unwrap();
            let lm = w.landmarks[&lid];
            if lm.anchor_frame == new_anchor {
                continue;
            }
            let old_state = w.frame(lm.anchor_frame).unwrap().state;
            let new_state = w.frame(new_anchor).unwrap().state;
            match shift_inverse_depth(
                &self.cfg.solver.camera,
                &old_state,
                &new_state,
                &w.extrinsics,
                lm.first_obs,
                lm.inv_depth,
            ) {
                Some(lam) => {
                    let lm = w.landmarks.get_mut(&lid).unwrap();
                    lm.anchor_frame = new_anchor;
                    lm.first_obs = new_uv;
                    lm.inv_depth = lam;
                }
                None => {
                    w.landmarks.remove(&lid);
                    w.tracks.remove(&lid);
                }
            }
        }
        let spawn_newest = w.frames.last().unwrap().id;
        let next_id = w.frames[0].id as i64 - 1;
        self.backward = Some(BackwardPass {
            window: w,
            next_id,
            spawn_newest,
            pending: BTreeMap::new(),
            done: false,
        });
        Ok(())
    }

    fn write_refined(log: &mut TrajectoryLog, spawn_newest: u64, f: &Frame) {
        if f.id < spawn_newest {
            if let Some(e) = log.entries.get_mut(&f.id) {
                e.pose_refined = Some(Pose::new(f.state.q, f.state.p));
            }
        }
    }

    /// One step of the backward pass: prepend the next earlier frame (seeded
    /// by inverse inertial propagation), optimize, and slide the window by
    /// discarding a non-keyframe or marginalizing the latest frame.
    pub fn backward_step(&mut self) -> Result<bool, EngineError> {
        let Some(mut bp) = self.backward.take() else { return Ok(false) };
        if bp.done {
            self.backward = Some(bp);
            return Ok(false);
        }
        if bp.next_id < 0 {
            for f in bp.window.frames.clone() {
                Self::write_refined(&mut self.log, bp.spawn_newest, &f);
            }
            bp.done = true;
            let (t, id) = {
                let f = &bp.window.frames[0];
                (f.t, f.id)
            };
            self.backward = Some(bp);
            self.event(PhaseState::BackwardDone, t, id);
            return Ok(false);
        }

        let id = bp.next_id as u64;
        let t = self.data.frame_times[id as usize];
        let earliest = bp.window.frames[0];
        let p = integrate(
            self.data.imu_slice(t, earliest.t)?,
            self.data.wheel_slice(t, earliest.t)?,
            &earliest.state.ba,
            &earliest.state.bw,
            &bp.window.extrinsics.rbo,
            &self.cfg.noise,
        )?;
        let state = inverse_propagate(&earliest.state, &p, &self.cfg.solver.gravity_w);
        bp.window.frames.insert(0, Frame { id, t, state });
        bp.window.preints.insert(0, p);

        // Attach the recorded observations; landmarks created in the backward
        // pass anchor at their latest in-window observation.
        for &(lid, uv) in &self.data.features[id as usize] {
            if let Some(track) = bp.window.tracks.get_mut(&lid) {
                track.insert(0, (id, uv));
            } else {
                bp.pending.entry(lid).or_default().insert(0, (id, uv));
            }
        }
        let ready: Vec<u64> =
            bp.pending.iter().filter(|(_, t)| t.len() >= 2).map(|(id, _)| *id).collect();
        for lid in ready {
            let track = bp.pending.remove(&lid).unwrap();
            let (anchor, uv_a) = *track.last().unwrap();
            let (other, uv_b) = track[0];
            let sa = bp.window.frame(anchor).unwrap().state;
            let sb = bp.window.frame(other).unwrap().state;
            let depth = triangulate_depth(
                &self.cfg.solver.camera,
                &sa,
                &sb,
                &bp.window.extrinsics,
                uv_a,
                uv_b,
            )
            .unwrap_or(self.cfg.default_depth);
            bp.window.landmarks.insert(
                lid,
                Landmark { id: lid, anchor_frame: anchor, first_obs: uv_a, inv_depth: 1.0 / depth },
            );
            bp.window.tracks.insert(lid, track);
        }

        Self::run_optimize(&mut bp.window, &self.cfg, &mut self.marg_ratios)?;
        Self::write_refined(&mut self.log, bp.spawn_newest, &bp.window.frames[0]);

        if bp.window.frames.len() > self.cfg.window_size {
            let second_earliest = bp.window.frames[1].id;
            let kf = self.log.entries.get(&second_earliest).map(|e| e.keyframe).unwrap_or(true);
            let in_prior = bp
                .window
                .prior
                .as_ref()
                .map_or(false, |p| p.blocks.iter().any(|(k, _)| k.frame() == Some(second_earliest)));
            if !kf && !in_prior {
                let f = *bp.window.frame(second_earliest).unwrap();
                Self::write_refined(&mut self.log, bp.spawn_newest, &f);
                Self::discard_frame(
                    &mut bp.window,
                    &self.data,
                    &self.cfg.solver.camera,
                    &self.cfg.noise,
                    &mut bp.pending,
                    second_earliest,
                )?;
                for track in bp.pending.values_mut() {
                    track.retain(|(fid, _)| *fid != second_earliest);
                }
                bp.pending.retain(|_, t| !t.is_empty());
            } else {
                let latest = *bp.window.frames.last().unwrap();
                Self::write_refined(&mut self.log, bp.spawn_newest, &latest);
                marginalize(&mut bp.window, latest.id, MargMode::Newest, &self.cfg.solver)?;
                for track in bp.pending.values_mut() {
                    track.retain(|(fid, _)| *fid != latest.id);
                }
                bp.pending.retain(|_, t| !t.is_empty());
            }
        }

        bp.next_id -= 1;
        self.backward = Some(bp);
        Ok(true)
    }

    /// Deterministic interleaved scheduler: one forward step, then one
    /// backward step per round, until both estimators finish.
    pub fn run(&mut self) -> Result<(), EngineError> {
        loop {
            let more_fwd = self.forward_step()?;
            let more_bwd = if self.backward.is_some() { self.backward_step()? } else { false };
            if !more_fwd && !more_bwd {
                break;
            }
        }
        self.sync_forward_log();
        Ok(())
    }

    /// Threaded scheduler: the backward pass runs on its own thread from its
    /// snapshot (the two estimators share no mutable state), so the result
    /// is identical to the interleaved mode.
    pub fn run_threaded(&mut self) -> Result<(), EngineError> {
        let mut handle: Option<std::thread::JoinHandle<Result<(TrajectoryLog, Vec<PhaseEvent>, Vec<f64>), EngineError>>> =
            None;
        loop {
            let more = self.forward_step()?;
            if handle.is_none() {
                if let Some(bp) = self.backward.take() {
                    let data = self.data.clone();
                    let cfg = self.cfg.clone();
                    let log = self.log.clone();
                    handle = Some(std::thread::spawn(move || {
                        let mut sub = Engine::new(cfg, data);
                        sub.log = log;
                        sub.backward = Some(bp);
                        sub.phase = PhaseState::BackwardRunning;
                        while sub.backward_step()? {}
                        Ok((sub.log, sub.events, sub.marg_ratios))
                    }));
                }
            }
            if !more {
                break;
            }
        }
        self.sync_forward_log();
        if let Some(h) = handle {
            let (sub_log, events, ratios) = h.join().expect("backward thread panicked")?;
            for (id, e) in sub_log.entries {
                if let Some(refined) = e.pose_refined {
                    if let Some(mine) = self.log.entries.get_mut(&id) {
                        mine.pose_refined = Some(refined);
                    }
                }
            }
            self.events.extend(events);
            self.marg_ratios.extend(ratios);
            self.phase = PhaseState::BackwardDone;
        }
        Ok(())
    }
}

/// Real-time stitched trajectory. Frames before the refinement frontier `j`
/// keep their already-published forward poses. Frames at/after `j` are
/// transformed so the output stays continuous with the published trajectory:
/// the refined segment is rigidly re-based onto the forward pose at `j`.
/// The starting pose therefore never changes.
pub fn realtime_stitch(log: &TrajectoryLog) -> Vec<(u64, f64, Pose)> {
    let Some(j) = log.refined_frontier() else {
        return log.entries.iter().map(|(id, e)| (*id, e.t, e.pose_forward)).collect();
    };
    let ej = &log.entries[&j];
    let fwd_j = ej.pose_forward;
    let ref_j = ej.pose_refined.unwrap();
    // Junction transform: published pose composed with the inverse refined
    // pose at j.
    let rot = fwd_j.rotation * ref_j.rotation.inverse();
    log.entries
        .iter()
        .map(|(id, e)| {
            if *id < j {
                (*id, e.t, e.pose_forward)
            } else if *id == j {
                // The transform maps the refined junction pose back onto the
                // published one exactly; skip the round trip.
                (*id, e.t, fwd_j)
            } else {
                let cur = e.pose_refined.unwrap_or(e.pose_forward);
                let out = Pose::new(
                    rot * cur.rotation,
                    rot * (cur.translation - ref_j.translation) + fwd_j.translation,
                );
                (*id, e.t, out)
            }
        })
        .collect()
}
