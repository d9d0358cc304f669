fn main() {
    let walk: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let reps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let accel: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let pixel: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let noise = wovio::preint::NoiseSpec {
        gyro_density: 1e-5,
        accel_density: accel,
        gyro_bias_walk: 1e-6,
        accel_bias_walk: walk,
        wheel_sigma: 1e-4,
        pixel_sigma: pixel,
    };
    let angles = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0, 45.0, 60.0, 75.0, 90.0];
    for r in wovio::sweep::bias_sweep(&angles, &noise, 42, reps).unwrap() {
        println!("{:5.1}  err {:.4e}  diff {:.4e}", r.angle_deg, r.mean_bias_err, r.mean_successive_diff);
    }
}
