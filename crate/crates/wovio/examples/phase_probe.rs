use wovio::engine::{Engine, EngineConfig, SensorData};
use wovio::geometry::{MotionState, Vec3};
use wovio::preint::NoiseSpec;
use wovio::sim::{Segment, SensorRig, TrajectorySpec};
use wovio::solver::SolverConfig;

fn exp_so3(w: &Vec3) -> nalgebra::Rotation3<f64> {
    nalgebra::Rotation3::new(*w)
}

fn main() {
    let mut rig = SensorRig::default();
    rig.noise = NoiseSpec {
        gyro_density: 0.0,
        accel_density: 0.0,
        gyro_bias_walk: 0.0,
        accel_bias_walk: 0.0,
        wheel_sigma: 0.0,
        pixel_sigma: 0.0,
    };
    rig.bias_a_true = Vec3::zeros();
    rig.bias_w_true = Vec3::zeros();
    let spec = TrajectorySpec {
        segments: vec![
            Segment::Straight { length: 20.0, speed: 2.0 },
            Segment::Arc { angle_deg: 90.0, radius: 5.0, speed: 2.0 },
            Segment::Straight { length: 40.0, speed: 2.0 },
        ],
        ..TrajectorySpec::default()
    };
    let (data, truth) = SensorData::from_sim(&spec, &rig, 200, 9).unwrap();
    let f0 = &truth.frames[0];
    let u = rig.extrinsics_true.rbc.transpose() * Vec3::new(1.0, 0.0, 0.0);
    let mut cfg = EngineConfig {
        solver: SolverConfig {
            camera: rig.camera,
            gravity_w: rig.gravity_w,
            pixel_sigma: rig.noise.pixel_sigma.max(0.25),
            roll_prior_ref: rig.extrinsics_true.rbo,
            ..SolverConfig::default()
        },
        noise: NoiseSpec::default(),
        initial_state: MotionState { p: f0.p, v: f0.v, q: f0.q, ba: Vec3::zeros(), bw: Vec3::zeros() },
        initial_extrinsics: rig.extrinsics_true,
        forward_only: true,
        ..EngineConfig::default()
    };
    let inject: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    cfg.initial_extrinsics.rbc = rig.extrinsics_true.rbc * exp_so3(&(u * inject.to_radians()));
    let mut e = Engine::new(cfg, data);
    let mut step = 0;
    loop {
        if !e.forward_step().unwrap() {
            break;
        }
        step += 1;
        if step % 20 == 0 {
            let f = e.window.frames.last().unwrap();
            println!(
                "t {:6.2}  lm {:3}  |ba| {:.4}  events {:?}",
                f.t,
                e.window.landmarks.len(),
                f.state.ba.norm(),
                e.events.iter().map(|ev| (ev.phase, ev.t)).collect::<Vec<_>>()
            );
        }
    }
    println!("turn_time {:?} ext_free {:?}", e.turn_time, e.extrinsics_free_time);
}
