//! Pinhole cameras, rigid transforms and point-to-pixel projection.
//!
//! Extrinsics map world coordinates into the camera frame, `p_cam = R p_world + t`,
//! with the camera looking down `+z`, `x` to the right and `y` down.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{input_err, Result};

/// Points closer than this to the camera plane never project.
pub const MIN_DEPTH: f64 = 1e-6;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelHit {
    pub point_index: usize,
    pub camera_index: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl PixelHit {
    /// Integer pixel containing the hit.
    pub fn pixel(&self) -> (usize, usize) {
        (self.u.floor() as usize, self.v.floor() as usize)
    }
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, rotation, translation, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(input_err("camera image size must be positive"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(input_err("focal lengths must be positive"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(input_err("principal point outside the image"));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !err.is_finite() || err > 1e-9 {
            return Err(input_err(format!("rotation is not orthonormal (error {err:.3e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(input_err("rotation must be proper (det = +1)"));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(input_err("translation must be finite"));
        }
        Ok(())
    }

    /// A camera at `center` (world) looking along yaw `yaw` (radians, about +z from +x)
    /// tilted down by `pitch` radians. World is z-up.
    #[allow(clippy::too_many_arguments)]
    pub fn looking(
        center: Point3,
        yaw: f64,
        pitch: f64,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let forward = Vector3::new(cy * cp, sy * cp, -sp);
        let right = Vector3::new(sy, -cy, 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let c = Vector3::from(center);
        let translation = -(rotation * c);
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, rotation, translation, width, height)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3 {
        let c = -(self.rotation.transpose() * self.translation);
        [c.x, c.y, c.z]
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * Vector3::from(*p) + self.translation
    }

    /// Projects one world point; `None` when behind the camera or outside the frame.
    pub fn project(&self, p: &Point3) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if !(pc.z > MIN_DEPTH) {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        // left/top inclusive, right/bottom exclusive
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u, v, pc.z))
        } else {
            None
        }
    }

    /// Inverse of [`project`](Self::project) for a known depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3 {
        let pc = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        let p = self.rotation.transpose() * (pc - self.translation);
        [p.x, p.y, p.z]
    }

    /// World-space ray direction (unit) through pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// The same physical camera after the world is moved by `x -> rot * x + shift`.
    pub fn with_world_transform(&self, rot: &Rotation3<f64>, shift: &Vector3<f64>) -> Self {
        let r = self.rotation * rot.matrix().transpose();
        let t = self.translation - r * shift;
        Self { rotation: r, translation: t, ..self.clone() }
    }
}

/// One hit per point that lands inside the image in front of the camera.
pub fn project_points(points: &[Point3], camera: &CameraModel, camera_index: usize) -> Vec<PixelHit> {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            camera.project(p).map(|(u, v, depth)| PixelHit { point_index: i, camera_index, u, v, depth })
        })
        .collect()
}

/// All hits of `points` over a camera rig, grouped per camera.
pub fn project_all(points: &[Point3], cameras: &[CameraModel]) -> Vec<Vec<PixelHit>> {
    cameras.iter().enumerate().map(|(k, c)| project_points(points, c, k)).collect()
}

/// For each point, the hit with the smallest depth across all cameras.
pub fn nearest_hits(points: &[Point3], cameras: &[CameraModel]) -> Vec<Option<PixelHit>> {
    let mut best: Vec<Option<PixelHit>> = vec![None; points.len()];
    for hits in project_all(points, cameras) {
        for h in hits {
            let slot = &mut best[h.point_index];
            if slot.is_none_or(|b| h.depth < b.depth) {
                *slot = Some(h);
            }
        }
    }
    best
}

/// Sorted indices of points visible in at least one camera.
pub fn visible_indices(points: &[Point3], cameras: &[CameraModel]) -> Vec<usize> {
    let mut seen = vec![false; points.len()];
    for hits in project_all(points, cameras) {
        for h in hits {
            seen[h.point_index] = true;
        }
    }
    seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

/// Indices of the frame's points seen by at least one of its cameras.
pub fn camera_subset(frame: &crate::synth::SceneFrame) -> Vec<usize> {
    visible_indices(&frame.points, &frame.cameras)
}

pub fn rotate_z(p: &Point3, angle: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}
