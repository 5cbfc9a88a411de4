//! Frame-to-model point-to-plane ICP on rendered model pyramids.

use nalgebra::{Matrix6, Rotation3, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::camera::{compute_normals, unproject, Frame, Intrinsics, PointMap, Pose, Vec3};
use crate::error::{Error, Result};
use crate::par;
use crate::raycast::{downsample_depth, RenderResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub levels: usize,
    /// Iterations per level, coarse to fine.
    pub iterations: Vec<usize>,
    /// Correspondence distance bound in meters.
    pub max_distance: f64,
    /// Correspondence normal-angle bound in radians.
    pub max_angle: f64,
    /// Stop a level once the update norm drops below this.
    pub epsilon: f64,
    pub min_inlier_fraction: f64,
    /// Smallest accepted eigenvalue ratio of the normal matrix.
    pub degeneracy_ratio: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: vec![10, 7, 4],
            max_distance: 0.1,
            max_angle: 20f64.to_radians(),
            epsilon: 1e-5,
            min_inlier_fraction: 0.1,
            degeneracy_ratio: 1e-6,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iterations.len() != self.levels {
            return Err(Error::param("icp.iterations", "need one iteration count per level"));
        }
        if self.iterations.contains(&0) {
            return Err(Error::param("icp.iterations", "counts must be positive"));
        }
        for (name, v) in [
            ("icp.max_distance", self.max_distance),
            ("icp.max_angle", self.max_angle),
            ("icp.epsilon", self.epsilon),
            ("icp.min_inlier_fraction", self.min_inlier_fraction),
            ("icp.degeneracy_ratio", self.degeneracy_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    /// World-from-camera estimate.
    pub pose: Pose,
    pub converged: bool,
    /// True when the normal matrix was rank deficient.
    pub degenerate: bool,
    pub inlier_fraction: f64,
    /// Mean absolute point-to-plane residual in meters.
    pub residual: f64,
}

impl TrackResult {
    fn lost(pose: Pose) -> Self {
        Self {
            pose,
            converged: false,
            degenerate: false,
            inlier_fraction: 0.0,
            residual: f64::INFINITY,
        }
    }
}

/// Camera-frame vertices and normals of one pyramid level of the input frame.
#[derive(Debug, Clone)]
pub struct FrameLevel {
    pub intrinsics: Intrinsics,
    pub vertices: PointMap,
    pub normals: PointMap,
}

impl FrameLevel {
    fn valid_count(&self) -> usize {
        self.normals.data().iter().filter(|n| n.is_some()).count()
    }
}

/// Level 0 reuses the frame maps; further levels average valid depths. The
/// depth-jump bound grows with the pixel footprint.
pub fn frame_pyramid(frame: &Frame, intr: &Intrinsics, levels: usize, max_depth_jump: f64) -> Result<Vec<FrameLevel>> {
    let mut out = vec![FrameLevel {
        intrinsics: *intr,
        vertices: frame.vertex_map.clone(),
        normals: frame.normal_map.clone(),
    }];
    let mut depth = frame.depth.clone();
    for level in 1..levels {
        depth = downsample_depth(&depth);
        let li = intr.downsampled(level);
        let vertices = unproject(&depth, &li)?;
        let normals = compute_normals(&vertices, max_depth_jump * (1u64 << level) as f64);
        out.push(FrameLevel {
            intrinsics: li,
            vertices,
            normals,
        });
    }
    Ok(out)
}

/// Accumulated Gauss-Newton system for the left-multiplied twist
/// (rotation, translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEquations {
    pub a: Matrix6<f64>,
    pub b: Vector6<f64>,
    /// Sum of squared residuals.
    pub error: f64,
    /// Sum of absolute residuals.
    pub abs_error: f64,
    pub count: usize,
}

impl NormalEquations {
    fn zero() -> Self {
        Self {
            a: Matrix6::zeros(),
            b: Vector6::zeros(),
            error: 0.0,
            abs_error: 0.0,
            count: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.a += other.a;
        self.b += other.b;
        self.error += other.error;
        self.abs_error += other.abs_error;
        self.count += other.count;
    }
}

/// Projective association of one frame pixel; returns (world point, model
/// point, model normal).
#[inline]
fn associate(
    frame: &FrameLevel,
    model: &RenderResult,
    model_from_world: &Pose,
    pose: &Pose,
    u: usize,
    v: usize,
    params: &IcpParams,
) -> Option<(Vec3, Vec3, Vec3)> {
    let p = (*frame.vertices.get(u, v))?;
    let np = (*frame.normals.get(u, v))?;
    let pw = pose.transform_point(&p);
    let (mu, mv) = model
        .intrinsics
        .project_to_pixel(&model_from_world.transform_point(&pw))?;
    let q = (*model.vertex_map.get(mu, mv))?;
    let nq = (*model.normal_map.get(mu, mv))?;
    if (pw - q).norm() > params.max_distance {
        return None;
    }
    let cos = pose.transform_vector(&np).dot(&nq);
    if cos < params.max_angle.cos() {
        return None;
    }
    Some((pw, q, nq))
}

/// Builds the point-to-plane system at `pose`. Rows are reduced in parallel
/// and summed in a fixed order, so the result does not depend on threading.
pub fn normal_equations(frame: &FrameLevel, model: &RenderResult, pose: &Pose, params: &IcpParams) -> NormalEquations {
    let model_from_world = model.pose.inverse();
    let w = frame.vertices.width();
    let rows = par::map_range(frame.vertices.height(), |v| {
        let mut acc = NormalEquations::zero();
        for u in 0..w {
            let Some((pw, q, n)) = associate(frame, model, &model_from_world, pose, u, v, params) else {
                continue;
            };
            let r = (pw - q).dot(&n);
            let c = pw.cross(&n);
            let j = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            acc.a += j * j.transpose();
            acc.b += j * r;
            acc.error += r * r;
            acc.abs_error += r.abs();
            acc.count += 1;
        }
        acc
    });
    let mut total = NormalEquations::zero();
    for row in &rows {
        total.add(row);
    }
    total
}

/// Applies a twist on the left: rotation by `xi[0..3]`, then translation.
pub fn apply_twist(xi: &Vector6<f64>, pose: &Pose) -> Pose {
    let w = Vec3::new(xi[0], xi[1], xi[2]);
    let v = Vec3::new(xi[3], xi[4], xi[5]);
    let r = *Rotation3::new(w).matrix();
    Pose {
        rotation: r * pose.rotation,
        translation: r * pose.translation + v,
    }
    .orthonormalized()
}

fn is_degenerate(a: &Matrix6<f64>, ratio: f64) -> bool {
    let eig = SymmetricEigen::new(*a).eigenvalues;
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    max <= 0.0 || min / max < ratio
}

/// Coarse-to-fine registration of `frame` against `model` starting at `init`.
/// `frame` and `model` are pyramids with level 0 at full resolution.
pub fn track(frame: &[FrameLevel], model: &[RenderResult], init: &Pose, params: &IcpParams) -> TrackResult {
    let levels = params.levels.min(frame.len()).min(model.len());
    if levels == 0 || model[0].valid_count() == 0 {
        return TrackResult::lost(*init);
    }
    let total = frame[0].valid_count();
    if total == 0 {
        return TrackResult::lost(*init);
    }
    let min_count =
        |level: usize| ((params.min_inlier_fraction * frame[level].valid_count() as f64).ceil() as usize).max(6);
    let mut pose = *init;
    let mut degenerate = false;
    for (k, level) in (0..levels).rev().enumerate() {
        let iterations = params.iterations.get(k + params.levels - levels).copied().unwrap_or(1);
        let mut prev: Option<(f64, Pose)> = None;
        for _ in 0..iterations {
            let eq = normal_equations(&frame[level], &model[level], &pose, params);
            if eq.count < min_count(level) {
                return TrackResult::lost(pose);
            }
            let mse = eq.error / eq.count as f64;
            if let Some((prev_mse, prev_pose)) = prev {
                if mse > prev_mse {
                    pose = prev_pose;
                    break;
                }
            }
            // coarse levels may lack support, only the finest one is decisive
            if is_degenerate(&eq.a, params.degeneracy_ratio) {
                degenerate = level == 0;
                break;
            }
            let Some(chol) = eq.a.cholesky() else {
                degenerate = level == 0;
                break;
            };
            let xi = -chol.solve(&eq.b);
            // a step beyond the association bounds means the level is unreliable
            if xi.fixed_rows::<3>(3).norm() > params.max_distance || xi.fixed_rows::<3>(0).norm() > params.max_angle {
                break;
            }
            prev = Some((mse, pose));
            pose = apply_twist(&xi, &pose);
            if xi.norm() < params.epsilon {
                break;
            }
        }
    }
    let eq = normal_equations(&frame[0], &model[0], &pose, params);
    let inlier_fraction = eq.count as f64 / total as f64;
    TrackResult {
        pose,
        converged: !degenerate && inlier_fraction >= params.min_inlier_fraction && eq.count > 0,
        degenerate,
        inlier_fraction,
        residual: if eq.count > 0 {
            eq.abs_error / eq.count as f64
        } else {
            f64::INFINITY
        },
    }
}
