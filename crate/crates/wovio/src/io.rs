//! Plain-text persistence: TUM trajectories, JSONL sensor logs, and run
//! manifests.

use crate::geometry::{Pose, RotQ, Vec3};
use crate::preint::{ImuSample, WheelSample};
use nalgebra::Quaternion;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected 8 fields, found {1}")]
    BadFieldCount(usize, usize),
    #[error("line {0}: {1}")]
    BadNumber(usize, std::num::ParseFloatError),
    #[error("line {0}: {1}")]
    BadRecord(usize, serde_json::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Write a trajectory as TUM lines `t tx ty tz qx qy qz qw`, one per pose.
/// Numbers use the shortest round-trip decimal form, so a read-back is
/// bit-exact.
pub fn write_tum<W: Write>(mut w: W, traj: &[(f64, Pose)]) -> Result<(), IoError> {
    for (t, pose) in traj {
        let p = pose.translation;
        let q = pose.rotation.quaternion();
        writeln!(w, "{} {} {} {} {} {} {} {}", t, p.x, p.y, p.z, q.i, q.j, q.k, q.w)?;
    }
    Ok(())
}

/// Parse TUM lines; `#`-prefixed and blank lines are skipped.
pub fn read_tum<R: std::io::Read>(r: R) -> Result<Vec<(f64, Pose)>, IoError> {
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let f = f.map_err(|e| IoError::BadNumber(ln + 1, e))?;
        if f.len() != 8 {
            return Err(IoError::BadFieldCount(ln + 1, f.len()));
        }
        let q = RotQ::from_quaternion(Quaternion::new(f[7], f[4], f[5], f[6]));
        out.push((f[0], Pose::new(q, Vec3::new(f[1], f[2], f[3]))));
    }
    Ok(out)
}

pub fn write_tum_file(path: &Path, traj: &[(f64, Pose)]) -> Result<(), IoError> {
    write_tum(std::io::BufWriter::new(std::fs::File::create(path)?), traj)
}

pub fn read_tum_file(path: &Path) -> Result<Vec<(f64, Pose)>, IoError> {
    read_tum(std::fs::File::open(path)?)
}

/// One line of a JSONL sensor log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SensorRecord {
    Imu { t: f64, gyro: [f64; 3], accel: [f64; 3] },
    Wheel { t: f64, speed: f64 },
    Img { t: f64, frame: u64, features: Vec<(u64, f64, f64)> },
}

/// Flatten a recorded dataset into time-ordered JSONL records.
pub fn sensor_records(
    frame_times: &[f64],
    features: &[Vec<(u64, (f64, f64))>],
    imu: &[ImuSample],
    wheel: &[WheelSample],
) -> Vec<SensorRecord> {
    let mut recs: Vec<SensorRecord> = Vec::with_capacity(imu.len() + wheel.len() + frame_times.len());
    recs.extend(imu.iter().map(|s| SensorRecord::Imu {
        t: s.t,
        gyro: s.gyro.into(),
        accel: s.accel.into(),
    }));
    recs.extend(wheel.iter().map(|s| SensorRecord::Wheel { t: s.t, speed: s.speed }));
    recs.extend(frame_times.iter().zip(features).enumerate().map(|(i, (t, f))| {
        SensorRecord::Img {
            t: *t,
            frame: i as u64,
            features: f.iter().map(|(id, (u, v))| (*id, *u, *v)).collect(),
        }
    }));
    // Stable by timestamp; equal timestamps keep the push order above, so
    // left/right-limit duplicates stay ordered.
    recs.sort_by(|a, b| rec_time(a).total_cmp(&rec_time(b)));
    recs
}

fn rec_time(r: &SensorRecord) -> f64 {
    match r {
        SensorRecord::Imu { t, .. } | SensorRecord::Wheel { t, .. } | SensorRecord::Img { t, .. } => {
            *t
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, recs: &[SensorRecord]) -> Result<(), IoError> {
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<R: std::io::Read>(r: R) -> Result<Vec<SensorRecord>, IoError> {
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::BadRecord(ln + 1, e))?);
    }
    Ok(out)
}

/// Split a record stream back into the per-stream representation used by the
/// engine. Image records must appear in frame order.
pub struct SensorStreams {
    pub frame_times: Vec<f64>,
    pub features: Vec<Vec<(u64, (f64, f64))>>,
    pub imu: Vec<ImuSample>,
    pub wheel: Vec<WheelSample>,
}

pub fn split_records(recs: &[SensorRecord]) -> SensorStreams {
    let mut s = SensorStreams {
        frame_times: Vec::new(),
        features: Vec::new(),
        imu: Vec::new(),
        wheel: Vec::new(),
    };
    for r in recs {
        match r {
            SensorRecord::Imu { t, gyro, accel } => s.imu.push(ImuSample {
                t: *t,
                gyro: Vec3::from(*gyro),
                accel: Vec3::from(*accel),
            }),
            SensorRecord::Wheel { t, speed } => s.wheel.push(WheelSample { t: *t, speed: *speed }),
            SensorRecord::Img { t, features, .. } => {
                s.frame_times.push(*t);
                s.features.push(features.iter().map(|(id, u, v)| (*id, (*u, *v))).collect());
            }
        }
    }
    s
}

/// Reproducibility manifest written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// SHA-256 of the verbatim config file contents.
    pub config_sha256: String,
    pub seed: u64,
    pub crate_version: String,
    pub deterministic: bool,
}

impl Manifest {
    pub fn new(config_text: &str, seed: u64, deterministic: bool) -> Manifest {
        Manifest {
            config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            deterministic,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3_quat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tum_round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traj: Vec<(f64, Pose)> = (0..100)
            .map(|i| {
                let axis = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen(), rng.gen());
                (
                    i as f64 * 0.1 + rng.gen::<f64>() * 1e-6,
                    Pose::new(
                        exp_so3_quat(&axis),
                        Vec3::new(rng.gen::<f64>() * 100.0, -rng.gen::<f64>(), rng.gen()),
                    ),
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_tum(&mut buf, &traj).unwrap();
        let back = read_tum(buf.as_slice()).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((ta, pa), (tb, pb)) in traj.iter().zip(&back) {
            assert_eq!(ta, tb);
            assert_eq!(pa.translation, pb.translation);
            assert_eq!(pa.rotation.quaternion().coords, pb.rotation.quaternion().coords);
        }
    }

    #[test]
    fn tum_skips_comments_and_rejects_bad_lines() {
        let text = "# header\n\n0 1 2 3 0 0 0 1\n";
        let traj = read_tum(text.as_bytes()).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].1.translation, Vec3::new(1.0, 2.0, 3.0));
        assert!(matches!(
            read_tum("0 1 2 3\n".as_bytes()),
            Err(IoError::BadFieldCount(1, 4))
        ));
        assert!(matches!(read_tum("a b c d e f g h\n".as_bytes()), Err(IoError::BadNumber(1, _))));
    }

    #[test]
    fn jsonl_round_trip_and_ordering() {
        let imu = vec![
            ImuSample { t: 0.0, gyro: Vec3::new(0.1, 0.2, 0.3), accel: Vec3::new(0.0, 0.0, 9.81) },
            ImuSample { t: 0.01, gyro: Vec3::zeros(), accel: Vec3::new(0.0, 0.0, 9.81) },
        ];
        let wheel = vec![WheelSample { t: 0.005, speed: 2.0 }];
        let frames = vec![0.0];
        let feats = vec![vec![(7u64, (320.0, 240.0))]];
        let recs = sensor_records(&frames, &feats, &imu, &wheel);
        let times: Vec<f64> = recs.iter().map(rec_time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));

        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let s = split_records(&back);
        assert_eq!(s.imu, imu);
        assert_eq!(s.wheel, wheel);
        assert_eq!(s.frame_times, frames);
        assert_eq!(s.features, feats);
    }

    #[test]
    fn manifest_hash_tracks_config_text() {
        let a = Manifest::new("threshold = 20", 42, true);
        let b = Manifest::new("threshold = 21", 42, true);
        assert_ne!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
        assert_eq!(a.seed, 42);
    }
}
