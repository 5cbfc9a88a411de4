//! Voxel-projection fusion of depth and color frames.
//!
//! Every allocated voxel inside the camera frustum is projected into the frame
//! and associated with its nearest pixel. Voxels further than the truncation
//! range in front of the measured surface are carved toward +1, voxels inside
//! the band are updated with a weighted running average.

use std::f64::consts::FRAC_PI_2;
use std::f64::consts::FRAC_PI_4;

use rustc_hash::FxHashMap;

use crate::camera::{Frame, Image, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::par;
use crate::voxel::{local_from_offset, voxel_center, BlockPos, Direction, Mode, VoxelStore, BLOCK_SIDE, BLOCK_VOXELS};

/// Membership weight of a surface with unit normal `n` in direction `dir`.
///
/// With `alpha` the angle between `n` and the direction's axis this is
/// `clamp((theta - alpha) / (2 theta - pi/2), 0, 1)`: one for
/// `alpha <= pi/2 - theta`, zero from `alpha >= theta` on, and linear in
/// between, so adjacent directions blend to a sum of one.
pub fn direction_weight(n: &Vec3, dir: Direction, theta: f64) -> Result<f64> {
    if !(theta > FRAC_PI_4 && theta <= FRAC_PI_2) {
        return Err(Error::param("theta", format!("{theta} not in (pi/4, pi/2]")));
    }
    let axis = dir
        .unit_vector()
        .ok_or_else(|| Error::param("dir", "undirected slot has no membership"))?;
    let alpha = n.dot(&axis).clamp(-1.0, 1.0).acos();
    Ok(((theta - alpha) / (2.0 * theta - FRAC_PI_2)).clamp(0.0, 1.0))
}

/// Point-to-plane distance `<p - x, n> / tau`, unclamped.
pub fn point_plane_sdf(p: &Vec3, x: &Vec3, n: &Vec3, tau: f64) -> f64 {
    (p - x).dot(n) / tau
}

/// Down-weighting of observations behind the surface: 1 in front, falling
/// linearly to 0.25 at the back end of the band.
pub fn behind_factor(d: f64) -> f64 {
    if d >= 0.0 {
        1.0
    } else {
        (1.0 + 0.75 * d).max(0.25)
    }
}

/// Depth weight of a new observation: cosine between surface normal `n`
/// (facing the camera) and the reversed view ray `r`, times the behind factor.
pub fn depth_fusion_weight(n: &Vec3, r: &Vec3, d: f64) -> f64 {
    n.dot(&-r).max(0.0) * behind_factor(d)
}

/// Color weight: the depth weight attenuated with distance between the
/// measured point and the voxel center.
pub fn color_weight(w_depth: f64, p: &Vec3, x: &Vec3, tau: f64) -> f64 {
    w_depth * (1.0 - ((p - x).norm() / tau).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub theta: f64,
    pub truncation: f64,
    /// Weight of a single free-space update.
    pub carve_weight: f32,
    /// Pixel radius of the depth-discontinuity check that gates carving.
    pub carve_guard_radius: usize,
    pub max_integration_distance: f64,
}

impl FusionParams {
    /// Defaults sharing theta and the truncation range with `store`.
    pub fn for_store(store: &VoxelStore) -> Self {
        Self {
            theta: store.params().theta,
            truncation: store.truncation(),
            carve_weight: 1.0,
            carve_guard_radius: 2,
            max_integration_distance: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > FRAC_PI_4 && self.theta <= FRAC_PI_2) {
            return Err(Error::param("theta", format!("{} not in (pi/4, pi/2]", self.theta)));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::param("truncation", "must be positive"));
        }
        if !(self.carve_weight >= 0.0) {
            return Err(Error::param("carve_weight", "must be non-negative"));
        }
        if !(self.max_integration_distance > 0.0) {
            return Err(Error::param("max_integration_distance", "must be positive"));
        }
        Ok(())
    }
}

/// Per-block bitmask of voxels whose data changed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangedVoxels {
    blocks: FxHashMap<BlockPos, [u64; 8]>,
}

impl ChangedVoxels {
    pub fn insert(&mut self, pos: BlockPos, offset: usize) {
        self.blocks.entry(pos).or_insert([0; 8])[offset >> 6] |= 1 << (offset & 63);
    }

    pub fn contains(&self, pos: &BlockPos, offset: usize) -> bool {
        self.blocks
            .get(pos)
            .is_some_and(|m| m[offset >> 6] & (1 << (offset & 63)) != 0)
    }

    pub fn merge(&mut self, other: &ChangedVoxels) {
        for (pos, mask) in &other.blocks {
            let m = self.blocks.entry(*pos).or_insert([0; 8]);
            for (a, b) in m.iter_mut().zip(mask) {
                *a |= b;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.blocks
            .values()
            .map(|m| m.iter().map(|w| w.count_ones() as usize).sum::<usize>())
            .sum()
    }

    /// Changed voxels as (block, local offset), in sorted order.
    pub fn voxels(&self) -> Vec<(BlockPos, usize)> {
        let mut positions: Vec<&BlockPos> = self.blocks.keys().collect();
        positions.sort_unstable();
        let mut out = Vec::new();
        for pos in positions {
            let mask = &self.blocks[pos];
            for o in 0..BLOCK_VOXELS {
                if mask[o >> 6] & (1 << (o & 63)) != 0 {
                    out.push((*pos, o));
                }
            }
        }
        out
    }

    pub fn block_positions(&self) -> Vec<BlockPos> {
        let mut v: Vec<BlockPos> = self.blocks.keys().copied().collect();
        v.sort_unstable();
        v
    }
}

/// Statistics of one fusion pass. Merging is commutative and associative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionStats {
    /// Voxel entries updated on the fuse path.
    pub fused: usize,
    /// Voxel entries updated on the carve path.
    pub carved: usize,
    /// Voxel entries that went from unobserved to observed.
    pub newly_observed: usize,
    pub changed: ChangedVoxels,
}

impl FusionStats {
    pub fn merge(&mut self, other: &FusionStats) {
        self.fused += other.fused;
        self.carved += other.carved;
        self.newly_observed += other.newly_observed;
        self.changed.merge(&other.changed);
    }
}

/// World-space measurement attached to a pixel.
#[derive(Debug, Clone, Copy)]
struct Sample {
    point: Vec3,
    normal: Vec3,
    color: [f32; 3],
    carve_ok: bool,
}

/// Whether no pixel within `radius` of (u, v) differs in depth by more than
/// `tau` or lacks a measurement.
pub fn carve_guard(depth: &Image<f64>, u: usize, v: usize, radius: usize, tau: f64) -> bool {
    let z0 = *depth.get(u, v);
    if z0 <= 0.0 {
        return false;
    }
    let r = radius as i64;
    for dv in -r..=r {
        for du in -r..=r {
            if du * du + dv * dv > r * r {
                continue;
            }
            let Some(&z) = depth.try_get(u as i64 + du, v as i64 + dv) else {
                continue;
            };
            if z <= 0.0 || (z - z0).abs() > tau {
                return false;
            }
        }
    }
    true
}

fn prepare_samples(frame: &Frame, pose: &Pose, params: &FusionParams) -> Image<Option<Sample>> {
    let depth = frame
        .depth
        .map(|&z| if z > params.max_integration_distance { 0.0 } else { z });
    Image::from_fn(frame.width(), frame.height(), |u, v| {
        if *depth.get(u, v) <= 0.0 {
            return None;
        }
        let p = (*frame.vertex_map.get(u, v))?;
        let n = (*frame.normal_map.get(u, v))?;
        Some(Sample {
            point: pose.transform_point(&p),
            normal: pose.transform_vector(&n),
            color: *frame.color.get(u, v),
            carve_ok: carve_guard(&depth, u, v, params.carve_guard_radius, params.truncation),
        })
    })
}

fn check_frame(frame: &Frame, intr: &Intrinsics) -> Result<()> {
    intr.check_dims(&frame.depth)?;
    intr.check_dims(&frame.color)?;
    if frame.vertex_map.width() != frame.width()
        || frame.vertex_map.height() != frame.height()
        || frame.normal_map.width() != frame.width()
        || frame.normal_map.height() != frame.height()
    {
        return Err(Error::Input("frame is missing its derived vertex/normal maps".into()));
    }
    Ok(())
}

/// Integrates one frame into the already allocated blocks of `store`.
pub fn fuse_frame(
    store: &mut VoxelStore,
    frame: &Frame,
    pose: &Pose,
    intr: &Intrinsics,
    params: &FusionParams,
) -> Result<FusionStats> {
    params.validate()?;
    check_frame(frame, intr)?;
    let samples = prepare_samples(frame, pose, params);
    let world_to_cam = pose.inverse();
    let center = pose.center();
    let voxel_size = store.voxel_size();
    let max_weight = store.params().max_weight as f64;
    let mode = store.mode();
    let tau = params.truncation;
    let block_radius = voxel_size * BLOCK_SIDE as f64 * 3f64.sqrt() / 2.0;

    let per_block = par::map_slice_mut(store.blocks_mut(), |block| {
        let mut stats = FusionStats::default();
        let pos = block.key.pos;
        let dir = block.key.dir;
        let mid = voxel_center(pos.voxel([4, 4, 4]), voxel_size) - Vec3::repeat(0.5 * voxel_size);
        if world_to_cam.transform_point(&mid).z < -block_radius {
            return stats;
        }
        let mut carved_any = false;
        for (offset, voxel) in block.voxels.iter_mut().enumerate() {
            let x = voxel_center(pos.voxel(local_from_offset(offset)), voxel_size);
            let Some((u, v)) = intr.project_to_pixel(&world_to_cam.transform_point(&x)) else {
                continue;
            };
            let Some(s) = samples.get(u, v) else {
                continue;
            };
            // normals face the camera; the distance is positive in front of the surface
            let d = point_plane_sdf(&s.point, &x, &-s.normal, tau);
            let was_observed = voxel.is_observed();
            if d > 1.0 {
                if !s.carve_ok {
                    continue;
                }
                let cw = params.carve_weight as f64;
                if cw <= 0.0 {
                    continue;
                }
                voxel.fuse_sdf(1.0, cw, max_weight);
                stats.carved += 1;
                carved_any = true;
            } else if d >= -1.0 {
                let ray = (x - center).normalize();
                let mut w_in = depth_fusion_weight(&s.normal, &ray, d);
                if mode == Mode::Directional {
                    w_in *= direction_weight(&s.normal, dir, params.theta).unwrap_or(0.0);
                }
                if w_in <= 0.0 {
                    continue;
                }
                voxel.fuse_sdf(d, w_in, max_weight);
                let wc_in = color_weight(w_in, &s.point, &x, tau);
                if wc_in > 0.0 {
                    voxel.fuse_color(&s.color, wc_in, max_weight);
                }
                stats.fused += 1;
            } else {
                continue;
            }
            if !was_observed {
                stats.newly_observed += 1;
            }
            stats.changed.insert(pos, offset);
        }
        if carved_any {
            block.carve_passes += 1;
        }
        stats
    });

    let mut total = FusionStats::default();
    for s in &per_block {
        total.merge(s);
    }
    Ok(total)
}

/// Allocation followed by fusion.
pub fn integrate(
    store: &mut VoxelStore,
    frame: &Frame,
    pose: &Pose,
    intr: &Intrinsics,
    params: &FusionParams,
) -> Result<FusionStats> {
    store.allocate_for_frame(frame, pose, params.max_integration_distance)?;
    fuse_frame(store, frame, pose, intr, params)
}
