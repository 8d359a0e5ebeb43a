//! Coordinate frames, rigid transforms, pinhole projection and BEV grid indexing.
//!
//! Ego frame: x forward, y left, z up, origin on the ground below the vehicle
//! reference point. Camera frame: x right, y down, z along the optical axis.
//! BEV row `i` follows ego x, column `j` follows ego y, and the ego origin sits
//! at the grid center.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

/// Rigid transform `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation about +z by `yaw` followed by translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self { rotation, translation }
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("rotation not orthonormal (|R^T R - I| = {err:.3e})")));
        }
        if self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidPose("rotation is a reflection".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn transform_points(points: &[Vector3<f64>], pose: &Pose) -> Result<Vec<Vector3<f64>>> {
    pose.validate()?;
    Ok(points.iter().map(|p| pose.apply(p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: Matrix3<f64>,
    /// Camera-from-ego transform.
    pub extrinsics: Pose,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    /// Pinhole camera looking along ego yaw `yaw`, mounted at `position`.
    pub fn looking_at_yaw(yaw: f64, position: Vector3<f64>, fov: f64, width: usize, height: usize) -> Self {
        let f = (width as f64 / 2.0) / (fov / 2.0).tan();
        let intrinsics = Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0);
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), y (down), z (forward) expressed in ego coordinates
        let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let extrinsics = Pose { rotation, translation: -(rotation * position) };
        Self { intrinsics, extrinsics, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        self.extrinsics.validate()?;
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
            return Err(Error::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Horizontal field of view in radians.
    pub fn fov(&self) -> f64 {
        2.0 * ((self.width as f64 / 2.0) / self.intrinsics[(0, 0)]).atan()
    }

    /// Ego yaw of the optical axis.
    pub fn yaw(&self) -> f64 {
        let z = self.extrinsics.rotation.row(2);
        z[1].atan2(z[0])
    }
}

/// Projects an ego-frame point to pixel coordinates, or `None` when the point
/// is behind the camera or outside `[0, W) x [0, H)`.
pub fn project_to_image(point_ego: &Vector3<f64>, camera: &CameraSpec) -> Option<(f64, f64)> {
    let pc = camera.extrinsics.apply(point_ego);
    if pc.z <= 0.0 {
        return None;
    }
    let k = &camera.intrinsics;
    let u = k[(0, 0)] * pc.x / pc.z + k[(0, 1)] * pc.y / pc.z + k[(0, 2)];
    let v = k[(1, 1)] * pc.y / pc.z + k[(1, 2)];
    if u >= 0.0 && u < camera.width as f64 && v >= 0.0 && v < camera.height as f64 {
        Some((u, v))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    /// Rows along ego x.
    pub x: usize,
    /// Columns along ego y.
    pub y: usize,
    pub cell_size: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self { x: 32, y: 32, cell_size: 1.6 }
    }
}

impl BevGridSpec {
    pub fn new(x: usize, y: usize, cell_size: f64) -> Result<Self> {
        let g = Self { x, y, cell_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 || self.x % 2 != 0 || self.y % 2 != 0 {
            return Err(Error::InvalidGrid(format!("cell counts must be even and positive, got {}x{}", self.x, self.y)));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidGrid("cell size must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.x * self.y
    }

    pub fn half_extent_x(&self) -> f64 {
        self.x as f64 * self.cell_size / 2.0
    }

    pub fn half_extent_y(&self) -> f64 {
        self.y as f64 * self.cell_size / 2.0
    }

    #[inline]
    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.y + j
    }

    /// Ego-frame ground position of the center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (i as f64 + 0.5) * self.cell_size - self.half_extent_x(),
            (j as f64 + 0.5) * self.cell_size - self.half_extent_y(),
        )
    }

    /// Continuous cell coordinates: cell `(i, j)` spans `[i, i+1) x [j, j+1)`.
    pub fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + self.half_extent_x()) / self.cell_size, (y + self.half_extent_y()) / self.cell_size)
    }
}

/// Half-open floor binning of the ground-plane position of `point_ego`.
pub fn bev_cell_of(point_ego: &Vector3<f64>, grid: &BevGridSpec) -> Option<(usize, usize)> {
    let (fi, fj) = grid.continuous_index(point_ego.x, point_ego.y);
    if !(fi.is_finite() && fj.is_finite()) {
        return None;
    }
    let (i, j) = (fi.floor(), fj.floor());
    if i < 0.0 || j < 0.0 || i >= grid.x as f64 || j >= grid.y as f64 {
        None
    } else {
        Some((i as usize, j as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub cameras: Vec<CameraSpec>,
    /// Ego-from-sensor transform per radar.
    pub radar_poses: Vec<Pose>,
}

impl SensorRig {
    /// Four 90° cameras at 64x64 and five radars around the vehicle.
    pub fn default_rig() -> Self {
        Self::surround(4, std::f64::consts::FRAC_PI_2, 64, 64)
    }

    pub fn surround(n_cameras: usize, fov: f64, width: usize, height: usize) -> Self {
        let cameras = (0..n_cameras)
            .map(|c| {
                let yaw = c as f64 * std::f64::consts::TAU / n_cameras as f64;
                let pos = Vector3::new(1.0 * yaw.cos(), 0.5 * yaw.sin(), 1.6);
                CameraSpec::looking_at_yaw(yaw, pos, fov, width, height)
            })
            .collect();
        let radar_poses = [
            (0.0_f64, 3.6, 0.0),
            (72.0, 3.2, 0.8),
            (-72.0, 3.2, -0.8),
            (144.0, -0.9, 0.9),
            (-144.0, -0.9, -0.9),
        ]
        .iter()
        .map(|&(deg, x, y)| Pose::from_yaw(deg.to_radians(), Vector3::new(x, y, 0.5)))
        .collect();
        Self { cameras, radar_poses }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() || self.radar_poses.is_empty() {
            return Err(Error::Config("rig needs at least one camera and one radar".into()));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        for p in &self.radar_poses {
            p.validate()?;
        }
        let mut yaws: Vec<f64> = self.cameras.iter().map(|c| c.yaw().rem_euclid(std::f64::consts::TAU)).collect();
        yaws.sort_by(f64::total_cmp);
        let min_fov = self.cameras.iter().map(CameraSpec::fov).fold(f64::INFINITY, f64::min);
        let wrap_gap = yaws[0] + std::f64::consts::TAU - yaws[yaws.len() - 1];
        let max_gap = yaws.windows(2).map(|w| w[1] - w[0]).fold(wrap_gap, f64::max);
        if max_gap > min_fov + 1e-9 {
            return Err(Error::Config(format!(
                "camera coverage has a {:.1}° gap wider than the {:.1}° field of view",
                max_gap.to_degrees(),
                min_fov.to_degrees()
            )));
        }
        Ok(())
    }
}
