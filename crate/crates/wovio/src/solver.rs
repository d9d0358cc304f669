//! Sliding-window nonlinear least squares: cost assembly over all factor
//! families, dogleg trust-region minimization with landmark Schur
//! elimination, Schur-complement marginalization into a linear prior, the
//! parameter-fixing policy, and the bounded-marginalization rule.

use crate::factors::{
    imuodo_residual, reproj_residual, roll_prior_residual, BlockKey, BlockValue, Extrinsics,
    FactorError, Landmark, MarginalPrior,
};
use crate::geometry::{exp_so3, exp_so3_quat, MotionState, Rot3, RotQ, Vec3};
use crate::preint::{Preintegrated, PreintError};
use crate::sim::CameraModel;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("window must hold at least 2 frames")]
    WindowTooSmall,
    #[error("frame {0} not in window")]
    FrameNotInWindow(u64),
    #[error("normal equations indefinite after damping (Jacobian bug?)")]
    Indefinite,
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Preint(#[from] PreintError),
}

/// Which parameter groups are held constant during optimization.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamPolicy {
    pub fix_accel_bias: bool,
    pub fix_extrinsics: bool,
    /// Implies `fix_accel_bias`; the engine also zeroes the estimates.
    pub zero_accel_bias: bool,
}

impl ParamPolicy {
    pub fn accel_bias_fixed(&self) -> bool {
        self.fix_accel_bias || self.zero_accel_bias
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub id: u64,
    pub t: f64,
    pub state: MotionState,
}

/// The sliding-window estimation problem.
#[derive(Debug, Clone)]
pub struct Window {
    pub frames: Vec<Frame>,
    /// One pre-integration per consecutive frame pair.
    pub preints: Vec<Preintegrated>,
    pub landmarks: BTreeMap<u64, Landmark>,
    /// Per landmark: (frame id, pixel) observations sorted by frame.
    pub tracks: BTreeMap<u64, Vec<(u64, (f64, f64))>>,
    pub extrinsics: Extrinsics,
    pub prior: Option<MarginalPrior>,
    pub policy: ParamPolicy,
}

impl Window {
    pub fn frame_index(&self, id: u64) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn frame(&self, id: u64) -> Option<&Frame> {
        self.frames.iter().find(|f| f.id == id)
    }

    /// Snapshot of every parameter block (free and fixed).
    pub fn current_values(&self) -> BTreeMap<BlockKey, BlockValue> {
        let mut m = BTreeMap::new();
        for f in &self.frames {
            m.insert(BlockKey::FramePos(f.id), BlockValue::Vector(f.state.p));
            m.insert(BlockKey::FrameVel(f.id), BlockValue::Vector(f.state.v));
            m.insert(BlockKey::FrameAtt(f.id), BlockValue::Rotation(f.state.q));
            m.insert(BlockKey::FrameBa(f.id), BlockValue::Vector(f.state.ba));
            m.insert(BlockKey::FrameBw(f.id), BlockValue::Vector(f.state.bw));
        }
        let e = &self.extrinsics;
        m.insert(
            BlockKey::ExtRbcAtt,
            BlockValue::Rotation(RotQ::from_rotation_matrix(&e.rbc)),
        );
        m.insert(BlockKey::ExtPbc, BlockValue::Vector(e.pbc));
        m.insert(
            BlockKey::ExtRboAtt,
            BlockValue::Rotation(RotQ::from_rotation_matrix(&e.rbo)),
        );
        m.insert(BlockKey::ExtPbo, BlockValue::Vector(e.pbo));
        for (id, lm) in &self.landmarks {
            m.insert(BlockKey::Landmark(*id), BlockValue::Scalar(lm.inv_depth));
        }
        m
    }

    /// Ordered free parameter blocks: frame states, extrinsics, then
    /// landmarks (landmarks last enables diagonal Schur elimination).
    pub fn free_layout(&self) -> Vec<BlockKey> {
        let mut layout = Vec::new();
        for f in &self.frames {
            layout.push(BlockKey::FramePos(f.id));
            layout.push(BlockKey::FrameVel(f.id));
            layout.push(BlockKey::FrameAtt(f.id));
            if !self.policy.accel_bias_fixed() {
                layout.push(BlockKey::FrameBa(f.id));
            }
            layout.push(BlockKey::FrameBw(f.id));
        }
        if !self.policy.fix_extrinsics {
            layout.push(BlockKey::ExtRbcAtt);
            layout.push(BlockKey::ExtPbc);
            layout.push(BlockKey::ExtRboAtt);
            layout.push(BlockKey::ExtPbo);
        }
        for id in self.landmarks.keys() {
            layout.push(BlockKey::Landmark(*id));
        }
        layout
    }

    /// Apply a local step over the given layout, returning the moved window.
    pub fn apply_step(&self, layout: &[BlockKey], delta: &DVector<f64>) -> Window {
        let mut w = self.clone();
        let mut off = 0;
        for key in layout {
            let d = key.dim();
            let dv = delta.rows(off, d);
            match *key {
                BlockKey::FramePos(id) => {
                    let i = w.frame_index(id).unwrap();
                    w.frames[i].state.p += Vec3::new(dv[0], dv[1], dv[2]);
                }
                BlockKey::FrameVel(id) => {
                    let i = w.frame_index(id).unwrap();
                    w.frames[i].state.v += Vec3::new(dv[0], dv[1], dv[2]);
                }
                BlockKey::FrameAtt(id) => {
                    let i = w.frame_index(id).unwrap();
                    let q = w.frames[i].state.q;
                    w.frames[i].state.q = q * exp_so3_quat(&Vec3::new(dv[0], dv[1], dv[2]));
                }
                BlockKey::FrameBa(id) => {
                    let i = w.frame_index(id).unwrap();
                    w.frames[i].state.ba += Vec3::new(dv[0], dv[1], dv[2]);
                }
                BlockKey::FrameBw(id) => {
                    let i = w.frame_index(id).unwrap();
                    w.frames[i].state.bw += Vec3::new(dv[0], dv[1], dv[2]);
                }
                BlockKey::ExtRbcAtt => {
                    w.extrinsics.rbc = w.extrinsics.rbc * exp_so3(&Vec3::new(dv[0], dv[1], dv[2]));
                }
                BlockKey::ExtPbc => w.extrinsics.pbc += Vec3::new(dv[0], dv[1], dv[2]),
                BlockKey::ExtRboAtt => {
                    w.extrinsics.rbo = w.extrinsics.rbo * exp_so3(&Vec3::new(dv[0], dv[1], dv[2]));
                }
                BlockKey::ExtPbo => w.extrinsics.pbo += Vec3::new(dv[0], dv[1], dv[2]),
                BlockKey::Landmark(id) => {
                    let lm = w.landmarks.get_mut(&id).unwrap();
                    lm.inv_depth = (lm.inv_depth + dv[0]).max(crate::factors::MIN_INV_DEPTH);
                }
            }
            off += d;
        }
        w
    }

    /// Drop landmarks with fewer than two in-window observations.
    pub fn prune_landmarks(&mut self) {
        let ids: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, obs)| obs.len() < 2)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            self.tracks.remove(&id);
            self.landmarks.remove(&id);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub camera: CameraModel,
    pub gravity_w: Vec3,
    /// Reprojection pixel sigma defining the uniform information weight.
    pub pixel_sigma: f64,
    pub huber: bool,
    pub huber_delta_px: f64,
    pub max_iters: usize,
    pub cost_decrease_tol: f64,
    pub step_tol: f64,
    pub trust_init: f64,
    pub roll_prior_weight: f64,
    /// Reference rotation whose roll the R^b_o prior confines.
    pub roll_prior_ref: Rot3,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            camera: CameraModel::default(),
            gravity_w: Vec3::new(0.0, 0.0, -9.81),
            pixel_sigma: 1.0,
            huber: false,
            huber_delta_px: 1.5,
            max_iters: 10,
            cost_decrease_tol: 1e-6,
            step_tol: 1e-8,
            trust_init: 1.0,
            roll_prior_weight: crate::factors::DEFAULT_ROLL_PRIOR_WEIGHT,
            roll_prior_ref: Rot3::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TermCosts {
    pub reproj: f64,
    pub imuodo: f64,
    pub prior: f64,
    pub roll_prior: f64,
}

impl TermCosts {
    pub fn total(&self) -> f64 {
        self.reproj + self.imuodo + self.prior + self.roll_prior
    }
}

/// Assembled Gauss-Newton normal equations: cost Σ‖e‖², gradient g = Jᵀe,
/// Hessian H = JᵀJ over the layout's local parameters.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub layout: Vec<BlockKey>,
    pub offsets: BTreeMap<BlockKey, usize>,
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub term_costs: TermCosts,
}

fn layout_offsets(layout: &[BlockKey]) -> (BTreeMap<BlockKey, usize>, usize) {
    let mut offsets = BTreeMap::new();
    let mut n = 0;
    for k in layout {
        offsets.insert(*k, n);
        n += k.dim();
    }
    (offsets, n)
}

struct Assembler<'a> {
    w: &'a Window,
    cfg: &'a SolverConfig,
    offsets: &'a BTreeMap<BlockKey, usize>,
    h: DMatrix<f64>,
    g: DVector<f64>,
    term: TermCosts,
    derivs: bool,
}

impl<'a> Assembler<'a> {
    fn new(
        w: &'a Window,
        cfg: &'a SolverConfig,
        offsets: &'a BTreeMap<BlockKey, usize>,
        n: usize,
        derivs: bool,
    ) -> Self {
        Assembler {
            w,
            cfg,
            offsets,
            h: DMatrix::zeros(if derivs { n } else { 0 }, if derivs { n } else { 0 }),
            g: DVector::zeros(if derivs { n } else { 0 }),
            term: TermCosts::default(),
            derivs,
        }
    }

    fn scatter(&mut self, r: &DVector<f64>, blocks: &[(BlockKey, DMatrix<f64>)]) {
        if !self.derivs {
            return;
        }
        for (k1, j1) in blocks {
            let Some(&o1) = self.offsets.get(k1) else { continue };
            let jt = j1.transpose();
            let gi = &jt * r;
            self.g.rows_mut(o1, j1.ncols()).zip_apply(&gi, |a, b| *a += b);
            for (k2, j2) in blocks {
                let Some(&o2) = self.offsets.get(k2) else { continue };
                let hb = &jt * j2;
                self.h
                    .view_mut((o1, o2), (j1.ncols(), j2.ncols()))
                    .zip_apply(&hb, |a, b| *a += b);
            }
        }
    }

    /// One reprojection factor (landmark observed away from its anchor).
    fn add_reproj(&mut self, lm: &Landmark, obs_frame: u64, uv: (f64, f64)) -> Result<(), SolveError> {
        let w = self.w;
        let (Some(si), Some(sj)) = (w.frame(lm.anchor_frame), w.frame(obs_frame)) else {
            return Err(SolveError::FrameNotInWindow(obs_frame));
        };
        let eval = match reproj_residual(
            &self.cfg.camera,
            &si.state,
            &sj.state,
            &w.extrinsics,
            lm,
            uv,
            lm.anchor_frame,
            obs_frame,
        ) {
            Ok(e) => e,
            // Point behind the image plane: residual invalid this iteration.
            Err(FactorError::InvalidDepth(_)) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let mut scale = 1.0 / self.cfg.pixel_sigma;
        let rn = eval.residual.norm() * scale;
        if self.cfg.huber && rn > self.cfg.huber_delta_px {
            scale *= (self.cfg.huber_delta_px / rn).sqrt();
        }
        let r = DVector::from_column_slice((eval.residual * scale).as_slice());
        self.term.reproj += r.norm_squared();
        if !self.derivs {
            return Ok(());
        }
        let mut blocks: Vec<(BlockKey, DMatrix<f64>)> = Vec::with_capacity(8);
        let pi = eval.j_pose_i * scale;
        let pj = eval.j_pose_j * scale;
        blocks.push((
            BlockKey::FramePos(lm.anchor_frame),
            DMatrix::from_column_slice(2, 3, pi.fixed_view::<2, 3>(0, 0).clone_owned().as_slice()),
        ));
        blocks.push((
            BlockKey::FrameAtt(lm.anchor_frame),
            DMatrix::from_column_slice(2, 3, pi.fixed_view::<2, 3>(0, 3).clone_owned().as_slice()),
        ));
        blocks.push((
            BlockKey::FramePos(obs_frame),
            DMatrix::from_column_slice(2, 3, pj.fixed_view::<2, 3>(0, 0).clone_owned().as_slice()),
        ));
        blocks.push((
            BlockKey::FrameAtt(obs_frame),
            DMatrix::from_column_slice(2, 3, pj.fixed_view::<2, 3>(0, 3).clone_owned().as_slice()),
        ));
        blocks.push((
            BlockKey::ExtRbcAtt,
            DMatrix::from_column_slice(2, 3, (eval.j_rbc * scale).as_slice()),
        ));
        blocks.push((
            BlockKey::ExtPbc,
            DMatrix::from_column_slice(2, 3, (eval.j_pbc * scale).as_slice()),
        ));
        blocks.push((
            BlockKey::Landmark(lm.id),
            DMatrix::from_column_slice(2, 1, (eval.j_lambda * scale).as_slice()),
        ));
        self.scatter(&r, &blocks);
        Ok(())
    }

    /// One whitened IMU-odometer factor between consecutive frames.
    fn add_imuodo(&mut self, pair: usize) -> Result<(), SolveError> {
        let w = self.w;
        let (fk, fk1) = (&w.frames[pair], &w.frames[pair + 1]);
        let eval = imuodo_residual(
            &fk.state,
            &fk1.state,
            &w.preints[pair],
            &w.extrinsics,
            &self.cfg.gravity_w,
            true,
        )?;
        let r = DVector::from_column_slice(eval.residual.as_slice());
        self.term.imuodo += r.norm_squared();
        if !self.derivs {
            return Ok(());
        }
        let mut blocks: Vec<(BlockKey, DMatrix<f64>)> = Vec::with_capacity(12);
        let keys = |id: u64| {
            [
                BlockKey::FramePos(id),
                BlockKey::FrameVel(id),
                BlockKey::FrameAtt(id),
                BlockKey::FrameBa(id),
                BlockKey::FrameBw(id),
            ]
        };
        for (jac, id) in [(&eval.j_state_k, fk.id), (&eval.j_state_k1, fk1.id)] {
            for (bi, key) in keys(id).into_iter().enumerate() {
                blocks.push((
                    key,
                    DMatrix::from_column_slice(
                        18,
                        3,
                        jac.columns(bi * 3, 3).clone_owned().as_slice(),
                    ),
                ));
            }
        }
        blocks.push((BlockKey::ExtRboAtt, DMatrix::from_column_slice(18, 3, eval.j_rbo.as_slice())));
        blocks.push((BlockKey::ExtPbo, DMatrix::from_column_slice(18, 3, eval.j_pbo.as_slice())));
        self.scatter(&r, &blocks);
        Ok(())
    }

    fn add_prior(&mut self, prior: &MarginalPrior) -> Result<(), SolveError> {
        let current = self.w.current_values();
        let r = prior.residual(&current)?;
        self.term.prior += r.norm_squared();
        if !self.derivs {
            return Ok(());
        }
        let mut blocks = Vec::with_capacity(prior.blocks.len());
        let mut col = 0;
        for (key, _) in &prior.blocks {
            let d = key.dim();
            // Residual = r − Jδ, so the Jacobian w.r.t. δ is −J.
            blocks.push((*key, -prior.j.columns(col, d).clone_owned()));
            col += d;
        }
        self.scatter(&r, &blocks);
        Ok(())
    }

    fn add_roll_prior(&mut self) {
        let (r, j) = roll_prior_residual(
            &self.w.extrinsics.rbo,
            &self.cfg.roll_prior_ref,
            self.cfg.roll_prior_weight,
        );
        self.term.roll_prior += r * r;
        if !self.derivs {
            return;
        }
        let blocks = [(BlockKey::ExtRboAtt, DMatrix::from_column_slice(1, 3, j.as_slice()))];
        self.scatter(&DVector::from_element(1, r), &blocks);
    }

    /// All reprojection factors of every window landmark.
    fn add_all_reproj(&mut self) -> Result<(), SolveError> {
        let lms: Vec<Landmark> = self.w.landmarks.values().copied().collect();
        for lm in lms {
            let Some(track) = self.w.tracks.get(&lm.id) else { continue };
            for (fid, uv) in track.clone() {
                if fid != lm.anchor_frame {
                    self.add_reproj(&lm, fid, uv)?;
                }
            }
        }
        Ok(())
    }
}

/// Assemble the normal equations of the full window cost over the free
/// layout. `include_prior` controls whether the marginalization prior (and
/// the roll prior, which anchors an always-unobservable direction) enters.
pub fn assemble(w: &Window, cfg: &SolverConfig, include_prior: bool) -> Result<Assembly, SolveError> {
    let layout = w.free_layout();
    let (offsets, n) = layout_offsets(&layout);
    let mut a = Assembler::new(w, cfg, &offsets, n, true);
    a.add_all_reproj()?;
    for pair in 0..w.preints.len() {
        a.add_imuodo(pair)?;
    }
    if include_prior {
        if let Some(prior) = &w.prior {
            a.add_prior(prior)?;
        }
        if !w.policy.fix_extrinsics {
            a.add_roll_prior();
        }
    }
    let (h, g, term) = (a.h, a.g, a.term);
    Ok(Assembly { layout, offsets, h, g, term_costs: term })
}

/// Total cost Σ‖e‖² without derivative assembly.
pub fn evaluate_cost(w: &Window, cfg: &SolverConfig, include_prior: bool) -> Result<TermCosts, SolveError> {
    let layout: Vec<BlockKey> = Vec::new();
    let (offsets, _) = layout_offsets(&layout);
    let mut a = Assembler::new(w, cfg, &offsets, 0, false);
    a.add_all_reproj()?;
    for pair in 0..w.preints.len() {
        a.add_imuodo(pair)?;
    }
    if include_prior {
        if let Some(prior) = &w.prior {
            a.add_prior(prior)?;
        }
        if !w.policy.fix_extrinsics {
            a.add_roll_prior();
        }
    }
    Ok(a.term)
}

/// Solve H δ = −g with the landmark block (diagonal tail) eliminated by
/// Schur complement. `n_pose` is the total dimension of non-landmark blocks.
pub fn schur_solve(h: &DMatrix<f64>, g: &DVector<f64>, n_pose: usize) -> Result<DVector<f64>, SolveError> {
    let n = h.nrows();
    let nl = n - n_pose;
    let a = h.view((0, 0), (n_pose, n_pose)).clone_owned();
    let b = h.view((0, n_pose), (n_pose, nl)).clone_owned();
    let mut dinv = DVector::zeros(nl);
    for i in 0..nl {
        let d = h[(n_pose + i, n_pose + i)];
        dinv[i] = if d > 1e-12 { 1.0 / d } else { 0.0 };
    }
    let gl = g.rows(n_pose, nl).clone_owned();
    let mut hs = a;
    let mut gs = g.rows(0, n_pose).clone_owned();
    // hs -= B D⁻¹ Bᵀ; gs -= B D⁻¹ g_l.
    let bd = {
        let mut bd = b.clone();
        for i in 0..nl {
            bd.column_mut(i).scale_mut(dinv[i]);
        }
        bd
    };
    hs -= &bd * b.transpose();
    gs -= &bd * &gl;

    // Cholesky with escalating damping; indefiniteness signals a bug.
    let mut damp = 0.0;
    let scale = hs.diagonal().amax().max(1.0);
    let dp = loop {
        let mut m = hs.clone();
        for i in 0..n_pose {
            m[(i, i)] += damp;
        }
        match m.cholesky() {
            Some(ch) => break ch.solve(&(-&gs)),
            None => {
                damp = if damp == 0.0 { 1e-12 * scale } else { damp * 100.0 };
                if damp > 1e-2 * scale {
                    return Err(SolveError::Indefinite);
                }
            }
        }
    };
    let mut delta = DVector::zeros(n);
    delta.rows_mut(0, n_pose).copy_from(&dp);
    let back = -gl - b.transpose() * &dp;
    for i in 0..nl {
        delta[n_pose + i] = dinv[i] * back[i];
    }
    Ok(delta)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptStats {
    pub frame_ids: Vec<u64>,
    pub iterations: usize,
    pub final_cost: f64,
    pub term_costs: TermCosts,
    /// Marginalization-prior share of the total cost.
    pub marg_ratio: f64,
}

/// Minimize the window cost by dogleg trust-region iterations on the
/// Gauss-Newton normal equations. Accepted steps never increase the cost.
pub fn optimize(w: &mut Window, cfg: &SolverConfig) -> Result<OptStats, SolveError> {
    if w.frames.len() < 2 {
        return Err(SolveError::WindowTooSmall);
    }
    let mut trust = cfg.trust_init;
    let mut cost = evaluate_cost(w, cfg, true)?.total();
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let asm = assemble(w, cfg, true)?;
        let n_pose: usize = asm
            .layout
            .iter()
            .filter(|k| !matches!(k, BlockKey::Landmark(_)))
            .map(|k| k.dim())
            .sum();
        let gn = schur_solve(&asm.h, &asm.g, n_pose)?;
        if gn.norm() < cfg.step_tol {
            break;
        }

        // Dogleg step selection within the current trust radius.
        let g = &asm.g;
        let ghg = (g.transpose() * &asm.h * g)[(0, 0)];
        let sd = if ghg > 0.0 { g * (-(g.norm_squared() / ghg)) } else { -g.clone() };
        let mut accepted = false;
        for _ in 0..8 {
            let step = if gn.norm() <= trust {
                gn.clone()
            } else if sd.norm() >= trust {
                &sd * (trust / sd.norm())
            } else {
                // Blend point on the segment sd → gn hitting the boundary.
                let d = &gn - &sd;
                let a = d.norm_squared();
                let b = 2.0 * sd.dot(&d);
                let c = sd.norm_squared() - trust * trust;
                let tau = (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
                &sd + d * tau
            };
            let predicted = -(g.dot(&step)) - 0.5 * (step.transpose() * &asm.h * &step)[(0, 0)];
            let cand = w.apply_step(&asm.layout, &step);
            // A step past the bias-correction trust region is simply a bad
            // candidate, not an error: reject it and shrink.
            let new_cost = match evaluate_cost(&cand, cfg, true) {
                Ok(tc) => tc.total(),
                Err(SolveError::Factor(FactorError::Preint(
                    PreintError::ReintegrateRequired(..),
                ))) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            // Costs are Σ‖e‖² = 2·model units.
            let actual = 0.5 * (cost - new_cost);
            let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };
            if rho > 0.75 && (step.norm() - trust).abs() < 1e-9 {
                trust *= 2.0;
            } else if rho < 0.25 {
                trust *= 0.25;
            }
            if new_cost < cost {
                let small_step = step.norm() < cfg.step_tol;
                let small_decrease = (cost - new_cost) <= cfg.cost_decrease_tol * cost.max(1e-300);
                *w = cand;
                cost = new_cost;
                accepted = true;
                if small_step || small_decrease {
                    let tc = evaluate_cost(w, cfg, true)?;
                    return Ok(OptStats {
                        frame_ids: w.frames.iter().map(|f| f.id).collect(),
                        iterations,
                        final_cost: tc.total(),
                        marg_ratio: if tc.total() > 0.0 { tc.prior / tc.total() } else { 0.0 },
                        term_costs: tc,
                    });
                }
                break;
            }
            if trust < 1e-12 {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    let tc = evaluate_cost(w, cfg, true)?;
    Ok(OptStats {
        frame_ids: w.frames.iter().map(|f| f.id).collect(),
        iterations,
        final_cost: tc.total(),
        marg_ratio: if tc.total() > 0.0 { tc.prior / tc.total() } else { 0.0 },
        term_costs: tc,
    })
}

/// Which end of the window is being dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MargMode {
    Oldest,
    Newest,
}

/// Eigenvalues below this absolute floor are truncated when square-rooting
/// the marginal Hessian.
pub const MARG_EIG_FLOOR: f64 = 1e-10;

fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax().max(1e-300);
    let mut inv = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let l = eig.eigenvalues[i];
        if l > 1e-12 * lmax {
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

/// Factor (H*, g*) into a linear prior r − Jδ with JᵀJ = H*, −Jᵀr = g*.
fn prior_from_quadratic(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    blocks: Vec<(BlockKey, BlockValue)>,
) -> MarginalPrior {
    let eig = h.clone().symmetric_eigen();
    let keep: Vec<usize> = (0..h.nrows())
        .filter(|&i| eig.eigenvalues[i] > MARG_EIG_FLOOR)
        .collect();
    let mut j = DMatrix::zeros(keep.len(), h.ncols());
    let mut r = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let l = eig.eigenvalues[i];
        let v = eig.eigenvectors.column(i);
        j.row_mut(row).copy_from(&(v.transpose() * l.sqrt()));
        r[row] = (v.transpose() * (-g))[(0, 0)] / l.sqrt();
    }
    MarginalPrior { r, j, blocks }
}

/// Marginalize one end frame out of the window: build the Gauss-Newton
/// quadratic of every factor touching it (plus the existing prior), Schur-
/// eliminate the dropped frame state and dropped-anchor landmarks, and
/// install the resulting prior. Landmarks anchored at the dropped frame are
/// re-anchored (inverse depth shifted) when they keep ≥ 2 observations.
pub fn marginalize(
    w: &mut Window,
    drop: u64,
    mode: MargMode,
    cfg: &SolverConfig,
) -> Result<MarginalPrior, SolveError> {
    let drop_idx = w.frame_index(drop).ok_or(SolveError::FrameNotInWindow(drop))?;

    // Landmarks anchored at the dropped frame: these are eliminated.
    let dropped_anchor: Vec<u64> = w
        .landmarks
        .values()
        .filter(|lm| lm.anchor_frame == drop)
        .map(|lm| lm.id)
        .collect();

    // Collect the involved block set and factor list.
    let mut eliminated: Vec<BlockKey> = vec![
        BlockKey::FramePos(drop),
        BlockKey::FrameVel(drop),
        BlockKey::FrameAtt(drop),
    ];
    if !w.policy.accel_bias_fixed() {
        eliminated.push(BlockKey::FrameBa(drop));
    }
    eliminated.push(BlockKey::FrameBw(drop));
    for id in &dropped_anchor {
        eliminated.push(BlockKey::Landmark(*id));
    }

    let mut retained: Vec<BlockKey> = Vec::new();
    let note = |k: BlockKey, retained: &mut Vec<BlockKey>| {
        if !eliminated.contains(&k) && !retained.contains(&k) {
            retained.push(k);
        }
    };
    let frame_keys = |w: &Window, id: u64| {
        let mut v = vec![BlockKey::FramePos(id), BlockKey::FrameVel(id), BlockKey::FrameAtt(id)];
        if !w.policy.accel_bias_fixed() {
            v.push(BlockKey::FrameBa(id));
        }
        v.push(BlockKey::FrameBw(id));
        v
    };

    // Pre-integration factors adjacent to the dropped frame.
    let mut pairs: Vec<usize> = Vec::new();
    if drop_idx > 0 && drop_idx - 1 < w.preints.len() {
        pairs.push(drop_idx - 1);
    }
    if drop_idx + 1 < w.frames.len() && drop_idx < w.preints.len() {
        pairs.push(drop_idx);
    }
    for &p in &pairs {
        for fid in [w.frames[p].id, w.frames[p + 1].id] {
            for k in frame_keys(w, fid) {
                note(k, &mut retained);
            }
        }
        if !w.policy.fix_extrinsics {
            note(BlockKey::ExtRboAtt, &mut retained);
            note(BlockKey::ExtPbo, &mut retained);
        }
    }
    // Reprojection factors of landmarks anchored at the dropped frame.
    for id in &dropped_anchor {
        if let Some(track) = w.tracks.get(id) {
            for (fid, _) in track {
                if *fid != drop {
                    for k in [BlockKey::FramePos(*fid), BlockKey::FrameAtt(*fid)] {
                        note(k, &mut retained);
                    }
                }
            }
            if !w.policy.fix_extrinsics && track.len() >= 2 {
                note(BlockKey::ExtRbcAtt, &mut retained);
                note(BlockKey::ExtPbc, &mut retained);
            }
        }
    }
    // Existing prior is always folded in.
    if let Some(prior) = &w.prior {
        for (k, _) in &prior.blocks {
            note(*k, &mut retained);
        }
    }

    // Assemble over [retained | eliminated].
    let mut layout = retained.clone();
    layout.extend(eliminated.iter().copied());
    let (offsets, n) = layout_offsets(&layout);
    let n_r: usize = retained.iter().map(|k| k.dim()).sum();
    let mut a = Assembler::new(w, cfg, &offsets, n, true);
    for &p in &pairs {
        a.add_imuodo(p)?;
    }
    for id in &dropped_anchor {
        let lm = w.landmarks[id];
        if let Some(track) = w.tracks.get(id).cloned() {
            for (fid, uv) in track {
                if fid != drop {
                    a.add_reproj(&lm, fid, uv)?;
                }
            }
        }
    }
    if let Some(prior) = w.prior.clone() {
        a.add_prior(&prior)?;
    }

    // Schur complement onto the retained blocks.
    let n_e = n - n_r;
    let prior = if n_r == 0 {
        MarginalPrior { r: DVector::zeros(0), j: DMatrix::zeros(0, 0), blocks: Vec::new() }
    } else {
        let hrr = a.h.view((0, 0), (n_r, n_r)).clone_owned();
        let hre = a.h.view((0, n_r), (n_r, n_e)).clone_owned();
        let hee = a.h.view((n_r, n_r), (n_e, n_e)).clone_owned();
        let gr = a.g.rows(0, n_r).clone_owned();
        let ge = a.g.rows(n_r, n_e).clone_owned();
        let (h_star, g_star) = if n_e > 0 {
            let hee_inv = pseudo_inverse_sym(&hee);
            (
                &hrr - &hre * &hee_inv * hre.transpose(),
                &gr - &hre * &hee_inv * &ge,
            )
        } else {
            (hrr, gr)
        };
        let current = w.current_values();
        let blocks: Vec<(BlockKey, BlockValue)> =
            retained.iter().map(|k| (*k, current[k])).collect();
        prior_from_quadratic(&h_star, &g_star, blocks)
    };

    // Mutate the window: remove the frame, its pre-integration, and its
    // observations; re-anchor or drop its landmarks.
    let drop_state = w.frames[drop_idx].state;
    w.frames.remove(drop_idx);
    if !w.preints.is_empty() {
        let pre_idx = if drop_idx == 0 { 0 } else { drop_idx - 1 };
        if pre_idx < w.preints.len() {
            w.preints.remove(pre_idx);
        }
    }
    for track in w.tracks.values_mut() {
        track.retain(|(fid, _)| *fid != drop);
    }
    for id in dropped_anchor {
        let keep = w.tracks.get(&id).map(|t| t.len() >= 2).unwrap_or(false);
        if !keep {
            w.tracks.remove(&id);
            w.landmarks.remove(&id);
            continue;
        }
        let track = w.tracks[&id].clone();
        // New anchor: nearest remaining observer on the surviving side.
        let (new_anchor, new_uv) = match mode {
            MargMode::Oldest => track[0],
            MargMode::Newest => *track.last().unwrap(),
        };
        let new_state = w.frame(new_anchor).unwrap().state;
        let lm = w.landmarks.get_mut(&id).unwrap();
        match shift_inverse_depth(
            &cfg.camera,
            &drop_state,
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
                w.tracks.remove(&id);
                w.landmarks.remove(&id);
            }
        }
    }
    w.prune_landmarks();
    w.prior = Some(prior.clone());
    Ok(prior)
}

/// Inverse depth of a landmark re-expressed along the new anchor's camera
/// ray (z-depth extraction). Returns None when the shifted depth is too
/// small to keep the landmark.
pub fn shift_inverse_depth(
    cam: &CameraModel,
    old_state: &MotionState,
    new_state: &MotionState,
    ext: &Extrinsics,
    old_uv: (f64, f64),
    inv_depth: f64,
) -> Option<f64> {
    let p_c_old = cam.unproject(old_uv.0, old_uv.1) / inv_depth;
    let p_b_old = ext.rbc * p_c_old + ext.pbc;
    let p_w = old_state.rot() * p_b_old + old_state.p;
    let p_b_new = new_state.rot().inverse() * (p_w - new_state.p);
    let p_c_new = ext.rbc.inverse() * (p_b_new - ext.pbc);
    if p_c_new.z <= crate::factors::MIN_FACTOR_DEPTH {
        None
    } else {
        Some(1.0 / p_c_new.z)
    }
}

/// Bounded marginalization: when the prior's cost share exceeds `ratio`,
/// scale r^m and J^m by `mu` (cost scales by μ², zero-set unchanged).
/// Returns true when scaling was applied.
pub fn bound_marginal_prior(
    prior: &mut MarginalPrior,
    marg_cost: f64,
    total_cost: f64,
    mu: f64,
    ratio: f64,
) -> bool {
    if total_cost > 0.0 && marg_cost / total_cost > ratio {
        prior.scale(mu);
        true
    } else {
        false
    }
}

/// Keyframe test: mean pixel parallax against the last keyframe above the
/// threshold, or too few tracked features.
pub fn is_keyframe(
    matches: &[((f64, f64), (f64, f64))],
    parallax_px: f64,
    min_tracked: usize,
) -> bool {
    if matches.len() < min_tracked {
        return true;
    }
    let mean: f64 = matches
        .iter()
        .map(|((u0, v0), (u1, v1))| ((u1 - u0).powi(2) + (v1 - v0).powi(2)).sqrt())
        .sum::<f64>()
        / matches.len() as f64;
    mean > parallax_px
}

/// Gauge-fixing prior on one frame: position (3 rows) and yaw (1 row),
/// zero residual at the given state.
pub fn anchor_prior(frame_id: u64, state: &MotionState, weight: f64) -> MarginalPrior {
    let sw = weight.sqrt();
    let mut j = DMatrix::zeros(4, 6);
    for i in 0..3 {
        j[(i, i)] = sw;
    }
    // Global yaw: right-local increment direction R₀ᵀ e_z.
    let axis = state.rot().matrix().transpose() * Vec3::new(0.0, 0.0, 1.0);
    for i in 0..3 {
        j[(3, 3 + i)] = sw * axis[i];
    }
    MarginalPrior {
        r: DVector::zeros(4),
        j,
        blocks: vec![
            (BlockKey::FramePos(frame_id), BlockValue::Vector(state.p)),
            (BlockKey::FrameAtt(frame_id), BlockValue::Rotation(state.q)),
        ],
    }
}
