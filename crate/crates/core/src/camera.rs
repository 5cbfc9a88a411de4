//! Pinhole camera model, image containers, rigid poses and the per-frame
//! vertex/normal maps consumed by fusion, rendering and tracking.

use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Dense row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "image buffer has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image by evaluating `f(u, v)` for every pixel, rows in parallel.
    pub fn from_fn<F>(width: usize, height: usize, f: F) -> Self
    where
        T: Send,
        F: Fn(usize, usize) -> T + Sync + Send,
    {
        let rows = par::map_range(height, |v| (0..width).map(|u| f(u, v)).collect::<Vec<T>>());
        Self {
            width,
            height,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    /// Bounds-checked access with signed coordinates.
    #[inline]
    pub fn try_get(&self, u: i64, v: i64) -> Option<&T> {
        if u < 0 || v < 0 || u as usize >= self.width || v as usize >= self.height {
            None
        } else {
            Some(&self.data[v as usize * self.width + u as usize])
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn map<U, F>(&self, f: F) -> Image<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        Image {
            width: self.width,
            height: self.height,
            data: par::map_slice(&self.data, f),
        }
    }
}

pub type DepthImage = Image<f64>;
pub type ColorImage = Image<[f32; 3]>;
pub type PointMap = Image<Option<Vec3>>;

/// Pinhole intrinsics. `depth_scale` converts raw sensor units to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    1.0 / 5000.0
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale: default_depth_scale(),
        };
        intr.validate()?;
        Ok(intr)
    }

    /// The TUM freiburg default camera (525 px focal length, 640x480).
    pub fn tum_default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
            depth_scale: default_depth_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::param("fx/fy", "focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("width/height", "image size must be at least 1x1"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::param("depth_scale", "must be positive"));
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level` (each level halves the resolution).
    pub fn downsampled(&self, level: usize) -> Self {
        let s = (1u64 << level) as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width >> level,
            height: self.height >> level,
            depth_scale: self.depth_scale,
        }
    }

    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Unit-length viewing ray through pixel (u, v) in the camera frame.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        self.unproject(u, v, 1.0).normalize()
    }

    /// Nearest pixel for a camera-frame point, if it lands inside the image.
    #[inline]
    pub fn project_to_pixel(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let (u, v) = self.project(p);
        let (ui, vi) = (u.round(), v.round());
        if ui < 0.0 || vi < 0.0 || ui >= self.width as f64 || vi >= self.height as f64 {
            None
        } else {
            Some((ui as usize, vi as usize))
        }
    }

    pub(crate) fn check_dims<T>(&self, img: &Image<T>) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::Dimension {
                expected_width: self.width,
                expected_height: self.height,
                width: img.width(),
                height: img.height(),
            });
        }
        Ok(())
    }
}

/// Rigid transform, world-from-camera when used as a camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).amax();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::param("rotation", "not a proper rotation matrix"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// From a TUM-style translation plus unit quaternion (qx, qy, qz, qw).
    pub fn from_quaternion(t: Vec3, q: [f64; 4]) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        Self {
            rotation: *uq.to_rotation_matrix().matrix(),
            translation: t,
        }
    }

    /// Quaternion as (qx, qy, qz, qw) with qw >= 0.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    /// Camera pose at `eye` looking at `target`; `up` is the world direction that
    /// appears upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let mut x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            // looking along `up`: pick any perpendicular
            let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            x = alt.cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self {
            rotation: Mat3::from_columns(&[x, y, z]),
            translation: eye,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Rotation angle of a rotation matrix, in [0, pi].
pub fn rotation_angle(r: &Mat3) -> f64 {
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    v.norm().atan2(r.trace() - 1.0)
}

/// Translation distance and relative rotation angle between two poses.
pub fn pose_delta(a: &Pose, b: &Pose) -> (f64, f64) {
    let translation = (a.translation - b.translation).norm();
    let angle = rotation_angle(&(a.rotation.transpose() * b.rotation));
    (translation, angle)
}

/// Back-projects a metric depth map. Depth 0 marks invalid pixels.
pub fn unproject(depth: &DepthImage, intr: &Intrinsics) -> Result<PointMap> {
    intr.check_dims(depth)?;
    Ok(Image::from_fn(depth.width(), depth.height(), |u, v| {
        let z = *depth.get(u, v);
        (z > 0.0).then(|| intr.unproject(u as f64, v as f64, z))
    }))
}

/// Central-difference normals on a camera-frame vertex map, oriented toward the
/// camera. A pixel gets no normal if a neighbor is invalid or either difference
/// jumps more than `max_depth_jump` in z.
pub fn compute_normals(vertices: &PointMap, max_depth_jump: f64) -> PointMap {
    let (w, h) = (vertices.width(), vertices.height());
    Image::from_fn(w, h, |u, v| {
        if u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
            return None;
        }
        let c = (*vertices.get(u, v))?;
        let l = (*vertices.get(u - 1, v))?;
        let r = (*vertices.get(u + 1, v))?;
        let t = (*vertices.get(u, v - 1))?;
        let b = (*vertices.get(u, v + 1))?;
        let dx = r - l;
        let dy = b - t;
        if dx.z.abs() > max_depth_jump || dy.z.abs() > max_depth_jump {
            return None;
        }
        let n = dx.cross(&dy);
        let len = n.norm();
        if len < 1e-12 {
            return None;
        }
        let n = n / len;
        Some(if n.dot(&c) > 0.0 { -n } else { n })
    })
}

/// Edge-preserving depth smoothing; invalid pixels stay invalid and never
/// contribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilateralParams {
    pub radius: usize,
    pub sigma_space: f64,
    pub sigma_depth: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            radius: 2,
            sigma_space: 1.5,
            sigma_depth: 0.03,
        }
    }
}

pub fn bilateral_filter(depth: &DepthImage, params: &BilateralParams) -> DepthImage {
    let r = params.radius as i64;
    let inv_s = 0.5 / (params.sigma_space * params.sigma_space);
    let inv_d = 0.5 / (params.sigma_depth * params.sigma_depth);
    Image::from_fn(depth.width(), depth.height(), |u, v| {
        let z0 = *depth.get(u, v);
        if z0 <= 0.0 {
            return 0.0;
        }
        let (mut acc, mut wsum) = (0.0, 0.0);
        for dv in -r..=r {
            for du in -r..=r {
                let Some(&z) = depth.try_get(u as i64 + du, v as i64 + dv) else {
                    continue;
                };
                if z <= 0.0 {
                    continue;
                }
                let w = (-((du * du + dv * dv) as f64) * inv_s - (z - z0).powi(2) * inv_d).exp();
                acc += w * z;
                wsum += w;
            }
        }
        acc / wsum
    })
}

/// Options for deriving vertex and normal maps from raw frame data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOptions {
    pub smoothing: Option<BilateralParams>,
    pub max_depth_jump: f64,
}

impl Default for FrameOptions {
    fn default() -> Self {
        Self {
            smoothing: None,
            max_depth_jump: 0.05,
        }
    }
}

/// One RGB-D measurement with its derived camera-frame maps.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub depth: DepthImage,
    pub color: ColorImage,
    pub vertex_map: PointMap,
    pub normal_map: PointMap,
}

impl Frame {
    pub fn new(
        timestamp: f64,
        depth: DepthImage,
        color: Option<ColorImage>,
        intr: &Intrinsics,
        opts: &FrameOptions,
    ) -> Result<Self> {
        intr.check_dims(&depth)?;
        let color = match color {
            Some(c) => {
                intr.check_dims(&c)?;
                c
            }
            None => Image::new(depth.width(), depth.height(), [0.5; 3]),
        };
        let depth = match &opts.smoothing {
            Some(p) => bilateral_filter(&depth, p),
            None => depth,
        };
        let vertex_map = unproject(&depth, intr)?;
        let normal_map = compute_normals(&vertex_map, opts.max_depth_jump);
        Ok(Self {
            timestamp,
            depth,
            color,
            vertex_map,
            normal_map,
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }
}
