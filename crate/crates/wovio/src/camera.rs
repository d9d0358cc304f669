//! Pinhole camera model.

use crate::geometry::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

/// Pinhole intrinsics. Camera frame: x right, y down, z along the optical axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    /// Project a camera-frame point to pixel coordinates. Caller checks depth.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Ray through pixel (u, v), normalized to z = 1.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= f64::from(self.width) - 1.0 && v <= f64::from(self.height) - 1.0
    }

    /// Jacobian of `project` w.r.t. the camera-frame point (2×3, top rows of a Mat3).
    pub fn project_jacobian(&self, p: &Vec3) -> Mat3 {
        let iz = 1.0 / p.z;
        let mut j = Mat3::zeros();
        j[(0, 0)] = self.fx * iz;
        j[(0, 2)] = -self.fx * p.x * iz * iz;
        j[(1, 1)] = self.fy * iz;
        j[(1, 2)] = -self.fy * p.y * iz * iz;
        j
    }
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}
