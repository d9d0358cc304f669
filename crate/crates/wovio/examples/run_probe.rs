use wovio::engine::{Engine, EngineConfig, SensorData};
use wovio::geometry::{MotionState, Vec3};
use wovio::sim::{Segment, SensorRig, TrajectorySpec};
use wovio::solver::SolverConfig;

fn main() {
    let rig = SensorRig::default();
    let spec = TrajectorySpec {
        segments: vec![Segment::Straight { length: 80.0, speed: 2.0 }],
        ..TrajectorySpec::default()
    };
    let (data, truth) = SensorData::from_sim(&spec, &rig, 200, 21).unwrap();
    let f0 = &truth.frames[0];
    let cfg = EngineConfig {
        solver: SolverConfig {
            camera: rig.camera,
            gravity_w: rig.gravity_w,
            pixel_sigma: rig.noise.pixel_sigma.max(0.25),
            roll_prior_ref: rig.extrinsics_true.rbo,
            ..SolverConfig::default()
        },
        noise: rig.noise,
        initial_state: MotionState { p: f0.p, v: f0.v, q: f0.q, ba: Vec3::zeros(), bw: Vec3::zeros() },
        initial_extrinsics: rig.extrinsics_true,
        forward_only: true,
        ..EngineConfig::default()
    };
    let mut seen = std::collections::BTreeSet::new();
    for (i, feats) in data.features.iter().enumerate() {
        let new: Vec<u64> =
            feats.iter().map(|(l, _)| *l).filter(|l| !seen.contains(l)).collect();
        for &l in &new {
            seen.insert(l);
        }
        if i % 20 == 0 || !new.is_empty() {
            println!("feat frame {:4}  obs {:3}  new {:2}  total_seen {:3}", i, feats.len(), new.len(), seen.len());
        }
        if i > 120 { break; }
    }
    let mut e = Engine::new(cfg, data);
    let mut step = 0usize;
    loop {
        let more = e.forward_step().unwrap();
        if !more {
            break;
        }
        step += 1;
        if step % 10 == 0 || step > 280 {
            let f = e.window.frames.last().unwrap();
            let gt = &truth.frames[f.id as usize];
            let ratio = e.marg_ratios.last().copied().unwrap_or(-1.0);
            println!(
                "frame {:4}  err {:10.4}  verr {:9.4}  |ba| {:8.4}  |bw| {:8.5}  lm {:3}  marg_ratio {:8.4}",
                f.id,
                (f.state.p - gt.p).norm(),
                (f.state.v - gt.v).norm(),
                f.state.ba.norm(),
                f.state.bw.norm(),
                e.window.landmarks.len(),
                ratio,
            );
        }
    }
    println!("events: {:?}", e.events.iter().map(|ev| (ev.phase, ev.t)).collect::<Vec<_>>());
}
