use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wovio::config::{RunConfig, SimConfig};
use wovio::engine::{Engine, EngineConfig, SensorData};
use wovio::geometry::{MotionState, Pose};
use wovio::io::{self, Manifest, SensorRecord};
use wovio::metrics;
use wovio::obsv;
use wovio::preint::NoiseSpec;
use wovio::sim::SensorRig;
use wovio::solver::SolverConfig;
use wovio::sweep;

#[derive(Parser)]
#[command(name = "wovio", about = "Odometer-aided visual-inertial estimator", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a dataset: sensor JSONL log plus ground-truth TUM file.
    Simulate {
        /// Simulation config (TOML).
        spec: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the estimator on a recorded sensor log.
    Run {
        /// Run config (TOML).
        config: PathBuf,
    },
    /// Per-window observability reports on a recorded sensor log (CSV).
    Obsv {
        /// Run config (TOML).
        config: PathBuf,
    },
    /// Evaluate an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Metric: "ate" (aligned RMSE) or "start" (start-aligned mean error).
        #[arg(long, default_value = "ate")]
        metric: String,
    },
    /// Turning-angle sweep: post-turn accelerometer-bias error per angle.
    Sweep {
        /// Angle range start:stop:step in degrees, e.g. 0:90:5.
        #[arg(long)]
        turning: String,
        /// Output CSV path (stdout when omitted).
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum AppError {
    /// Bad arguments or malformed config/input files.
    Usage(String),
    /// Failure while executing a well-formed request.
    Runtime(String),
}

impl AppError {
    fn usage(e: impl std::fmt::Display) -> AppError {
        AppError::Usage(e.to_string())
    }
    fn runtime(e: impl std::fmt::Display) -> AppError {
        AppError::Runtime(e.to_string())
    }
}

fn dispatch(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::Simulate { spec, output } => simulate(&spec, &output),
        Cmd::Run { config } => run(&config),
        Cmd::Obsv { config } => obsv_cmd(&config),
        Cmd::Eval { est, gt, metric } => eval(&est, &gt, &metric),
        Cmd::Sweep { turning, output, seed } => sweep_cmd(&turning, output.as_deref(), seed),
    }
}

fn simulate(spec_path: &Path, out_dir: &Path) -> Result<(), AppError> {
    let text = std::fs::read_to_string(spec_path).map_err(AppError::usage)?;
    let cfg = SimConfig::from_toml(&text).map_err(AppError::usage)?;
    let mut rig = SensorRig::default();
    rig.noise = cfg.noise;
    let (data, truth) = SensorData::from_sim(&cfg.trajectory, &rig, cfg.landmarks, cfg.seed)
        .map_err(AppError::runtime)?;
    std::fs::create_dir_all(out_dir).map_err(AppError::runtime)?;

    let recs = io::sensor_records(&data.frame_times, &data.features, &data.imu, &data.wheel);
    let f = std::fs::File::create(out_dir.join("sensors.jsonl")).map_err(AppError::runtime)?;
    io::write_jsonl(std::io::BufWriter::new(f), &recs).map_err(AppError::runtime)?;

    let gt: Vec<(f64, Pose)> =
        truth.frames.iter().map(|s| (s.t, Pose::new(s.q, s.p))).collect();
    io::write_tum_file(&out_dir.join("groundtruth.tum"), &gt).map_err(AppError::runtime)?;
    Manifest::new(&text, cfg.seed, true)
        .write(&out_dir.join("manifest.json"))
        .map_err(AppError::runtime)?;
    Ok(())
}

/// Shared setup for `run` and `obsv`: parse the config, load the sensor log,
/// and build the engine.
fn build_engine(config_path: &Path) -> Result<(Engine, RunConfig, String), AppError> {
    let text = std::fs::read_to_string(config_path).map_err(AppError::usage)?;
    let cfg = RunConfig::from_toml(&text).map_err(AppError::usage)?;
    let log_file = std::fs::File::open(&cfg.paths.sensor_log).map_err(AppError::usage)?;
    let recs: Vec<SensorRecord> =
        io::read_jsonl(std::io::BufReader::new(log_file)).map_err(AppError::usage)?;
    let s = io::split_records(&recs);
    let data = SensorData {
        frame_times: s.frame_times,
        features: s.features,
        imu: s.imu,
        wheel: s.wheel,
    };
    let e = &cfg.estimator;
    // Nominal factory calibration as the starting guess: the camera mounting
    // of the default rig, identity odometer mounting.
    let mut initial_extrinsics = SensorRig::default().extrinsics_true;
    initial_extrinsics.rbo = wovio::geometry::Rot3::identity();
    let engine_cfg = EngineConfig {
        solver: SolverConfig {
            pixel_sigma: e.noise.pixel_sigma.max(0.25),
            ..SolverConfig::default()
        },
        noise: sanitize_noise(&e.noise),
        window_size: e.window_size,
        turn_threshold_deg: e.turn_threshold_deg,
        bias_window: e.bias_window,
        bias_tol: e.bias_tol,
        backward_delay: e.backward_delay,
        keyframe_parallax_px: e.keyframe_parallax_px,
        keyframe_min_tracked: e.keyframe_min_tracked,
        marg_scale_mu: e.marg_scale_mu,
        marg_ratio_max: e.marg_ratio_max,
        forward_only: cfg.modes.forward_only,
        initial_state: MotionState::identity(),
        initial_extrinsics,
        default_depth: e.default_depth,
        ..EngineConfig::default()
    };
    Ok((Engine::new(engine_cfg, data), cfg, text))
}

/// The whitening model cannot accept exact zeros (singular covariance); floor
/// any zero entry at a tiny positive value.
fn sanitize_noise(n: &NoiseSpec) -> NoiseSpec {
    let f = |x: f64, floor: f64| if x > 0.0 { x } else { floor };
    NoiseSpec {
        gyro_density: f(n.gyro_density, 1e-8),
        accel_density: f(n.accel_density, 1e-7),
        gyro_bias_walk: f(n.gyro_bias_walk, 1e-9),
        accel_bias_walk: f(n.accel_bias_walk, 1e-8),
        wheel_sigma: f(n.wheel_sigma, 1e-6),
        pixel_sigma: f(n.pixel_sigma, 1e-3),
    }
}

fn run(config_path: &Path) -> Result<(), AppError> {
    let (mut engine, cfg, text) = build_engine(config_path)?;
    if cfg.modes.deterministic {
        engine.run().map_err(AppError::runtime)?;
    } else {
        engine.run_threaded().map_err(AppError::runtime)?;
    }

    let out = &cfg.paths.output_dir;
    std::fs::create_dir_all(out).map_err(AppError::runtime)?;
    let forward: Vec<(f64, Pose)> =
        engine.log.entries.values().map(|e| (e.t, e.pose_forward)).collect();
    io::write_tum_file(&out.join("forward.tum"), &forward).map_err(AppError::runtime)?;
    let refined: Vec<(f64, Pose)> = engine
        .log
        .entries
        .values()
        .filter_map(|e| e.pose_refined.map(|p| (e.t, p)))
        .collect();
    io::write_tum_file(&out.join("refined.tum"), &refined).map_err(AppError::runtime)?;
    let stitched: Vec<(f64, Pose)> = wovio::engine::realtime_stitch(&engine.log)
        .into_iter()
        .map(|(_, t, p)| (t, p))
        .collect();
    io::write_tum_file(&out.join("realtime.tum"), &stitched).map_err(AppError::runtime)?;

    let mut events = String::new();
    for ev in &engine.events {
        events.push_str(&serde_json::to_string(ev).map_err(AppError::runtime)?);
        events.push('\n');
    }
    std::fs::write(out.join("events.jsonl"), events).map_err(AppError::runtime)?;
    Manifest::new(&text, cfg.estimator.seed, cfg.modes.deterministic)
        .write(&out.join("manifest.json"))
        .map_err(AppError::runtime)?;
    Ok(())
}

fn obsv_cmd(config_path: &Path) -> Result<(), AppError> {
    let (mut engine, cfg, _text) = build_engine(config_path)?;
    // Observability probing needs the extrinsic blocks in the Hessian from
    // the start; hold the accelerometer bias at zero instead.
    engine.cfg.policy_override = Some(wovio::solver::ParamPolicy {
        fix_accel_bias: true,
        fix_extrinsics: false,
        zero_accel_bias: true,
    });
    engine.window.policy = engine.cfg.policy_override.unwrap();
    let out = &cfg.paths.output_dir;
    std::fs::create_dir_all(out).map_err(AppError::runtime)?;
    let mut csv = String::from("t,roll_ratio,small_eig_count,overlaps\n");
    loop {
        let more = engine.forward_step().map_err(AppError::runtime)?;
        if !more {
            break;
        }
        if engine.window.frames.len() < engine.cfg.window_size {
            continue;
        }
        let t = engine.window.frames.last().unwrap().t;
        match obsv::analyze(&engine.window, &engine.cfg.solver, cfg.modes.include_prior) {
            Ok(rep) => {
                let overlaps: Vec<String> =
                    rep.direction_overlaps.iter().map(|o| format!("{o:.6}")).collect();
                csv.push_str(&format!(
                    "{t:.3},{:.6e},{},{}\n",
                    rep.roll_ratio,
                    rep.small_eig_count,
                    overlaps.join(";")
                ));
            }
            Err(_) => csv.push_str(&format!("{t:.3},,,\n")),
        }
    }
    std::fs::write(out.join("obsv.csv"), csv).map_err(AppError::runtime)?;
    Ok(())
}

fn eval(est: &Path, gt: &Path, metric: &str) -> Result<(), AppError> {
    let est = io::read_tum_file(est).map_err(AppError::usage)?;
    let gt = io::read_tum_file(gt).map_err(AppError::usage)?;
    let v = match metric {
        "ate" => metrics::ate(&est, &gt).map_err(AppError::runtime)?,
        "start" => metrics::start_aligned_error(&est, &gt, 100.0).map_err(AppError::runtime)?,
        other => return Err(AppError::Usage(format!("unknown metric '{other}'"))),
    };
    println!("{v:.3}");
    Ok(())
}

fn sweep_cmd(turning: &str, output: Option<&Path>, seed: u64) -> Result<(), AppError> {
    let angles = sweep::parse_angle_range(turning)
        .ok_or_else(|| AppError::Usage(format!("bad angle range '{turning}'")))?;
    let noise = NoiseSpec::default();
    let rows = sweep::bias_sweep(&angles, &noise, seed, 3).map_err(AppError::runtime)?;
    let mut csv = String::from("angle_deg,mean_bias_err,mean_successive_diff\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:.1},{:.6e},{:.6e}\n",
            r.angle_deg, r.mean_bias_err, r.mean_successive_diff
        ));
    }
    match output {
        Some(p) => std::fs::write(p, csv).map_err(AppError::runtime)?,
        None => print!("{csv}"),
    }
    Ok(())
}
