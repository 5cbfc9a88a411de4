//! Trajectory and reconstruction metrics: relative pose error, post-fusion
//! depth MAE, memory statistics and dominant-plane axis alignment.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Rotation3, SymmetricEigen, Unit};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{rotation_angle, ColorImage, DepthImage, Frame, Image, Intrinsics, Mat3, Pose, Vec3};
use crate::combine::CombineParams;
use crate::dataset::DEFAULT_MAX_DT;
use crate::error::{Error, Result};
use crate::raycast::{render_store, RaycastParams, RenderResult};
use crate::trajectory::Trajectory;
use crate::voxel::{Mode, VoxelStore, BLOCK_VOXELS, VOXEL_RECORD_BYTES};

pub const RPE_WINDOW: usize = 30;

/// Per-frame values with their mean and 95% confidence half-width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub units: String,
    /// Frame index of each value.
    pub frames: Vec<usize>,
    pub values: Vec<f64>,
    /// NaN when there are no values.
    pub mean: f64,
    /// 1.96 * sample standard deviation / sqrt(n); 0 for a single value.
    pub ci95: f64,
    pub n: usize,
    /// Frames that produced no value.
    pub skipped: usize,
}

impl MetricReport {
    pub fn new(units: &str, frames: Vec<usize>, values: Vec<f64>, skipped: usize) -> Self {
        let n = values.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / n as f64
        };
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        };
        Self {
            units: units.to_string(),
            frames,
            values,
            mean,
            ci95,
            n,
            skipped,
        }
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean": self.mean,
            "ci95": self.ci95,
            "n": self.n,
            "skipped": self.skipped,
            "units": self.units,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,value\n");
        for (f, v) in self.frames.iter().zip(&self.values) {
            writeln!(out, "{f},{v:.9}").expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("serializable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Translational (mm) and rotational (degrees) relative pose error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpeReport {
    pub translation: MetricReport,
    pub rotation: MetricReport,
}

/// Relative pose error over `window` frames. Trajectories are associated by
/// timestamp; frame indices in the report refer to the associated pairs.
pub fn rpe(est: &Trajectory, gt: &Trajectory, window: usize) -> Result<RpeReport> {
    if window == 0 {
        return Err(Error::param("window", "must be at least 1"));
    }
    let pairs = est.associate(gt, DEFAULT_MAX_DT);
    if pairs.len() <= window {
        return Err(Error::Input(format!(
            "{} associated poses, need more than the window of {window}",
            pairs.len()
        )));
    }
    let (p, q) = (est.entries(), gt.entries());
    let mut trans = Vec::new();
    let mut rot = Vec::new();
    for i in 0..pairs.len() - window {
        let (a, b) = (pairs[i], pairs[i + window]);
        let rel_est = p[a.0].1.inverse() * p[b.0].1;
        let rel_gt = q[a.1].1.inverse() * q[b.1].1;
        let e = rel_gt.inverse() * rel_est;
        trans.push(e.translation.norm() * 1000.0);
        rot.push(rotation_angle(&e.rotation).to_degrees());
    }
    let frames: Vec<usize> = (0..trans.len()).collect();
    Ok(RpeReport {
        translation: MetricReport::new("mm", frames.clone(), trans, 0),
        rotation: MetricReport::new("deg", frames, rot, 0),
    })
}

/// Mean absolute depth difference over pixels valid in both images (and in
/// `mask`, if given), in meters. `None` without such pixels.
pub fn depth_mae(rendered: &DepthImage, input: &DepthImage, mask: Option<&Image<bool>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, (&r, &z)) in rendered.data().iter().zip(input.data()).enumerate() {
        if r > 0.0 && z > 0.0 && mask.is_none_or(|m| m.data()[k]) {
            sum += (r - z).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean per-channel absolute color difference over pixels valid in the
/// render (and in `mask`). `None` without such pixels.
pub fn color_error(rendered: &RenderResult, reference: &ColorImage, mask: Option<&Image<bool>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, (c, r)) in rendered.color.data().iter().zip(reference.data()).enumerate() {
        if rendered.valid.data()[k] && mask.is_none_or(|m| m.data()[k]) {
            sum += (0..3).map(|i| (c[i] - r[i]).abs() as f64).sum::<f64>();
            n += 3;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// One evaluated view: the estimated pose and the input depth taken there.
#[derive(Debug, Clone, Copy)]
pub struct EvalFrame<'a> {
    pub pose: Pose,
    pub depth: &'a DepthImage,
    /// Restricts the error to these pixels.
    pub mask: Option<&'a Image<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub combine: CombineParams,
    pub raycast: RaycastParams,
}

impl RenderParams {
    pub fn new(max_integration_distance: f64, truncation: f64) -> Self {
        Self {
            combine: CombineParams::new(max_integration_distance, truncation),
            raycast: RaycastParams::new(max_integration_distance, truncation),
        }
    }
}

/// Post-fusion depth MAE in mm. Directional stores are recombined at every
/// evaluated pose. Frames without mutually valid pixels are skipped.
pub fn post_fusion_mae(
    store: &VoxelStore,
    frames: &[EvalFrame<'_>],
    intr: &Intrinsics,
    params: &RenderParams,
) -> Result<MetricReport> {
    let mut idx = Vec::new();
    let mut values = Vec::new();
    for (k, f) in frames.iter().enumerate() {
        intr.check_dims(f.depth)?;
        let render = render_store(store, &f.pose, intr, &params.combine, &params.raycast)?;
        if let Some(e) = depth_mae(&render.depth, f.depth, f.mask) {
            idx.push(k);
            values.push(e * 1000.0);
        }
    }
    let skipped = frames.len() - values.len();
    if values.is_empty() && !frames.is_empty() {
        log::warn!("post-fusion MAE: no frame had mutually valid pixels");
    }
    Ok(MetricReport::new("mm", idx, values, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryStats {
    pub mode: Mode,
    /// Allocated block entries, one per (position, direction).
    pub block_count: usize,
    /// Distinct block positions.
    pub spatial_blocks: usize,
    pub bytes: usize,
    /// Block entries per direction, in `Direction::DIRECTED` order, then the
    /// undirected slot.
    pub per_direction: [usize; 7],
}

pub fn memory_stats(store: &VoxelStore) -> MemoryStats {
    let block_count = store.block_count();
    MemoryStats {
        mode: store.mode(),
        block_count,
        spatial_blocks: store.block_positions().len(),
        bytes: block_count * BLOCK_VOXELS * VOXEL_RECORD_BYTES,
        per_direction: store.direction_counts(),
    }
}

/// Directional over regular block count; `None` if the regular count is 0.
pub fn memory_ratio(directional: &MemoryStats, regular: &MemoryStats) -> Option<f64> {
    (regular.block_count > 0).then(|| directional.block_count as f64 / regular.block_count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAlignmentParams {
    pub iterations: usize,
    /// Inlier distance in meters.
    pub inlier_threshold: f64,
    /// Minimum inlier share of the valid vertices.
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl AxisAlignmentParams {
    pub fn new(voxel_size: f64, seed: u64) -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 2.0 * voxel_size,
            min_inlier_fraction: 0.2,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAlignment {
    /// Initial world-from-camera pose (rotation only).
    pub pose: Pose,
    /// False when no dominant plane was found and the pose is the identity.
    pub plane_found: bool,
    /// Dominant plane normal in the camera frame, facing the camera.
    pub normal: Option<Vec3>,
    pub inlier_fraction: f64,
}

impl AxisAlignment {
    fn identity() -> Self {
        Self {
            pose: Pose::identity(),
            plane_found: false,
            normal: None,
            inlier_fraction: 0.0,
        }
    }
}

/// Least-squares plane normal of `points` (smallest covariance eigenvector).
fn fit_normal(points: &[Vec3]) -> Option<Vec3> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let cov = points.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let v: Vec3 = eig.eigenvectors.column(k).into();
    (v.norm() > 0.5).then(|| v.normalize())
}

/// Finds the dominant plane of a frame with RANSAC and returns the rotation
/// that turns its normal onto the nearest coordinate axis.
pub fn estimate_axis_alignment(frame: &Frame, params: &AxisAlignmentParams) -> AxisAlignment {
    let points: Vec<Vec3> = frame.vertex_map.data().iter().flatten().copied().collect();
    if points.len() < 3 {
        return AxisAlignment::identity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Vec3, Vec3)> = None;
    for _ in 0..params.iterations {
        let a = points[rng.random_range(0..points.len())];
        let b = points[rng.random_range(0..points.len())];
        let c = points[rng.random_range(0..points.len())];
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-12 {
            continue;
        }
        let n = n.normalize();
        let count = points
            .iter()
            .filter(|p| (*p - a).dot(&n).abs() <= params.inlier_threshold)
            .count();
        if best.is_none_or(|(k, _, _)| count > k) {
            best = Some((count, n, a));
        }
    }
    let Some((count, n0, a)) = best else {
        return AxisAlignment::identity();
    };
    let fraction = count as f64 / points.len() as f64;
    if fraction < params.min_inlier_fraction {
        return AxisAlignment {
            inlier_fraction: fraction,
            ..AxisAlignment::identity()
        };
    }
    let inliers: Vec<Vec3> = points
        .iter()
        .filter(|p| (*p - a).dot(&n0).abs() <= params.inlier_threshold)
        .copied()
        .collect();
    let mut n = fit_normal(&inliers).unwrap_or(n0);
    let centroid = inliers.iter().sum::<Vec3>() / inliers.len() as f64;
    if n.dot(&centroid) > 0.0 {
        n = -n;
    }
    // nearest signed axis
    let k = n.iamax();
    let mut axis = Vec3::zeros();
    axis[k] = n[k].signum();
    let rotation = Rotation3::rotation_between(&n, &axis).unwrap_or_else(|| {
        // antiparallel cannot happen for the nearest axis; keep a sane fallback
        Rotation3::from_axis_angle(&Unit::new_normalize(n.cross(&Vec3::x())), std::f64::consts::PI)
    });
    AxisAlignment {
        pose: Pose::new(*rotation.matrix(), Vec3::zeros()).expect("rotation is orthonormal"),
        plane_found: true,
        normal: Some(n),
        inlier_fraction: fraction,
    }
}
