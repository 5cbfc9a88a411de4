//! View-dependent combination of the six directional channels into one TSDF.
//!
//! For a fixed camera position each voxel blends the directional distances,
//! weighting every channel by how well its local gradient agrees with the
//! channel direction, how much it faces the camera, and its fusion weight.
//! The result is a regular TSDF that is valid for raycasting from (near) the
//! pose it was computed for.

use std::f64::consts::FRAC_PI_2;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::camera::{pose_delta, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::fusion::{direction_weight, ChangedVoxels};
use crate::par;
use crate::voxel::{
    local_from_offset, local_offset, split_index, voxel_center, BlockKey, BlockPos, Direction, Mode, StoreParams,
    Voxel, VoxelStore, BLOCK_SIDE, BLOCK_VOXELS,
};

/// Gradient magnitudes (in sdf units per voxel) at or below this count as
/// "no gradient".
pub const GRADIENT_EPSILON: f64 = 1e-6;

/// Share of the strongest contribution above which a direction is reported as
/// contributing.
pub const CONTRIBUTION_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinationWeight {
    pub weight: f64,
    /// False when the gradient was undefined and the axis fallback was used.
    pub from_gradient: bool,
}

/// Central-difference gradient of one channel from the six axis neighbors.
/// `None` if any neighbor is unobserved.
pub fn channel_gradient(store: &VoxelStore, dir: Direction, idx: [i32; 3]) -> Option<Vec3> {
    let s = |dx: i32, dy: i32, dz: i32| {
        store
            .voxel(dir, [idx[0] + dx, idx[1] + dy, idx[2] + dz])
            .map(|v| v.sdf as f64)
    };
    Some(Vec3::new(
        (s(1, 0, 0)? - s(-1, 0, 0)?) * 0.5,
        (s(0, 1, 0)? - s(0, -1, 0)?) * 0.5,
        (s(0, 0, 1)? - s(0, 0, -1)?) * 0.5,
    ))
}

/// Combination weight of direction `dir` at voxel `idx` seen from
/// `camera_center`. Returns `None` for unobserved voxels, which callers must
/// filter out beforehand.
pub fn combination_weight(
    store: &VoxelStore,
    dir: Direction,
    idx: [i32; 3],
    camera_center: &Vec3,
) -> Option<CombinationWeight> {
    let voxel = store.voxel(dir, idx)?;
    let axis = dir.unit_vector()?;
    let x = store.voxel_center(idx);
    let r = (x - camera_center).normalize();
    let w_d = voxel.weight as f64;
    match channel_gradient(store, dir, idx).filter(|g| g.norm() > GRADIENT_EPSILON) {
        Some(g) => {
            let n = g.normalize();
            let membership = direction_weight(&n, dir, store.params().theta).unwrap_or(0.0);
            Some(CombinationWeight {
                weight: membership * n.dot(&-r).max(0.0) * w_d,
                from_gradient: true,
            })
        }
        None => Some(CombinationWeight {
            weight: w_d * axis.dot(&-r).max(0.0),
            from_gradient: false,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedVoxel {
    pub sdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    /// Bit set of directions contributing a significant share.
    pub directions: u8,
}

impl Default for CombinedVoxel {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            weight: 0.0,
            color: [0.0; 3],
            directions: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombineParams {
    /// Frustum expansion as a fraction of the image size on each side.
    pub frustum_margin: f64,
    /// Farthest voxel depth considered, in meters.
    pub max_depth: f64,
}

impl CombineParams {
    pub fn new(max_integration_distance: f64, truncation: f64) -> Self {
        Self {
            frustum_margin: 0.125,
            max_depth: max_integration_distance + truncation,
        }
    }
}

/// Regular TSDF blended from the directional channels for one viewpoint.
#[derive(Debug, Clone)]
pub struct CombinedVolume {
    voxel_size: f64,
    truncation: f64,
    theta: f64,
    blocks: FxHashMap<BlockPos, Box<[CombinedVoxel; BLOCK_VOXELS]>>,
    /// Blocks `b` such that some block in `b + {0,1}^3` exists: the lowest
    /// corners of every trilinear cell touching a block lie in one of these.
    regions: FxHashSet<BlockPos>,
    pub stamped_pose: Pose,
    pub frame_index: usize,
    intrinsics: Intrinsics,
    params: CombineParams,
}

impl CombinedVolume {
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Observed entry at a global voxel index.
    #[inline]
    pub fn voxel(&self, idx: [i32; 3]) -> Option<&CombinedVoxel> {
        let (pos, local) = split_index(idx);
        self.blocks
            .get(&pos)
            .map(|b| &b[local_offset(local)])
            .filter(|v| v.weight > 0.0)
    }

    pub fn has_block(&self, pos: &BlockPos) -> bool {
        self.blocks.contains_key(pos)
    }

    /// Whether some cell with its lowest corner in block `pos` touches a block.
    pub fn region_touches_block(&self, pos: &BlockPos) -> bool {
        self.regions.contains(pos)
    }

    fn add_regions(regions: &mut FxHashSet<BlockPos>, pos: &BlockPos) {
        for c in 0..8 {
            regions.insert(BlockPos::new(pos.x - (c & 1), pos.y - ((c >> 1) & 1), pos.z - (c >> 2)));
        }
    }

    /// Raw voxels of a block, including unobserved ones (weight 0).
    pub fn block(&self, pos: &BlockPos) -> Option<&[CombinedVoxel; BLOCK_VOXELS]> {
        self.blocks.get(pos).map(|b| &**b)
    }

    pub fn observed_count(&self) -> usize {
        self.blocks
            .values()
            .map(|b| b.iter().filter(|v| v.weight > 0.0).count())
            .sum()
    }

    /// All observed entries in key order.
    pub fn entries(&self) -> Vec<([i32; 3], CombinedVoxel)> {
        let mut positions: Vec<&BlockPos> = self.blocks.keys().collect();
        positions.sort_unstable();
        let mut out = Vec::new();
        for pos in positions {
            for (o, v) in self.blocks[pos].iter().enumerate() {
                if v.weight > 0.0 {
                    out.push((pos.voxel(local_from_offset(o)), *v));
                }
            }
        }
        out
    }

    /// Whether `pose` is still close enough to the stamped pose for rendering.
    pub fn is_valid_for(&self, pose: &Pose, thresholds: &RecombineThresholds) -> bool {
        let (t, a) = pose_delta(&self.stamped_pose, pose);
        t <= thresholds.translation && a <= thresholds.rotation
    }

    fn set(&mut self, idx: [i32; 3], value: Option<CombinedVoxel>) {
        let (pos, local) = split_index(idx);
        match value {
            Some(v) => {
                let regions = &mut self.regions;
                self.blocks.entry(pos).or_insert_with(|| {
                    Self::add_regions(regions, &pos);
                    Box::new([CombinedVoxel::default(); BLOCK_VOXELS])
                })[local_offset(local)] = v;
            }
            None => {
                if let Some(b) = self.blocks.get_mut(&pos) {
                    b[local_offset(local)] = CombinedVoxel::default();
                }
            }
        }
    }

    /// Converts into a regular store, the combined TSDF being a regular TSDF.
    pub fn to_store(&self) -> Result<VoxelStore> {
        let mut params = StoreParams::new(Mode::Regular, self.voxel_size);
        params.truncation = self.truncation;
        params.theta = self.theta;
        let mut store = VoxelStore::new(params)?;
        let mut positions: Vec<&BlockPos> = self.blocks.keys().collect();
        positions.sort_unstable();
        for pos in positions {
            let key = BlockKey {
                pos: *pos,
                dir: Direction::Undirected,
            };
            store.allocate(key)?;
            let block = store.block_mut(&key).expect("just allocated");
            for (dst, src) in block.voxels.iter_mut().zip(self.blocks[pos].iter()) {
                *dst = Voxel {
                    sdf: src.sdf,
                    weight: src.weight,
                    color: src.color,
                    color_weight: src.weight,
                };
            }
        }
        Ok(store)
    }
}

fn in_expanded_frustum(x_cam: &Vec3, intr: &Intrinsics, params: &CombineParams) -> bool {
    if x_cam.z <= 0.0 || x_cam.z > params.max_depth {
        return false;
    }
    let (u, v) = intr.project(x_cam);
    let (w, h) = (intr.width as f64, intr.height as f64);
    let (mu, mv) = (w * params.frustum_margin, h * params.frustum_margin);
    u >= -0.5 - mu && u < w - 0.5 + mu && v >= -0.5 - mv && v < h - 0.5 + mv
}

/// Combined entry for one voxel, or `None` if it is outside the expanded
/// frustum or no direction contributes.
pub fn combine_voxel(
    store: &VoxelStore,
    idx: [i32; 3],
    pose: &Pose,
    world_to_cam: &Pose,
    intr: &Intrinsics,
    params: &CombineParams,
) -> Option<CombinedVoxel> {
    let x = voxel_center(idx, store.voxel_size());
    if !in_expanded_frustum(&world_to_cam.transform_point(&x), intr, params) {
        return None;
    }
    let center = pose.center();
    let mut weights = [0.0f64; 6];
    let mut values: [Option<&Voxel>; 6] = [None; 6];
    for (k, &dir) in Direction::DIRECTED.iter().enumerate() {
        if let Some(v) = store.voxel(dir, idx) {
            values[k] = Some(v);
            weights[k] = combination_weight(store, dir, idx, &center)
                .map(|c| c.weight)
                .unwrap_or(0.0);
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let max_w = weights.iter().cloned().fold(0.0, f64::max);
    let (mut sdf, mut color, mut mask) = (0.0, [0.0f64; 3], 0u8);
    for (k, v) in values.iter().enumerate() {
        let (Some(v), w) = (v, weights[k]) else { continue };
        if w <= 0.0 {
            continue;
        }
        sdf += w * v.sdf as f64;
        for (acc, &c) in color.iter_mut().zip(&v.color) {
            *acc += w * c as f64;
        }
        if w > CONTRIBUTION_SHARE * max_w {
            mask |= Direction::DIRECTED[k].bit();
        }
    }
    Some(CombinedVoxel {
        sdf: (sdf / total).clamp(-1.0, 1.0) as f32,
        weight: total as f32,
        color: [
            (color[0] / total) as f32,
            (color[1] / total) as f32,
            (color[2] / total) as f32,
        ],
        directions: mask,
    })
}

/// Combines every allocated voxel inside the expanded frustum of `pose`.
pub fn combine_full(
    store: &VoxelStore,
    pose: &Pose,
    intr: &Intrinsics,
    params: &CombineParams,
) -> Result<CombinedVolume> {
    if store.mode() != Mode::Directional {
        return Err(Error::Mode("combination requires a directional store".into()));
    }
    let world_to_cam = pose.inverse();
    let voxel_size = store.voxel_size();
    let block_radius = voxel_size * BLOCK_SIDE as f64 * 3f64.sqrt() / 2.0;
    let positions = store.block_positions();
    let blocks = par::map_slice(&positions, |pos| {
        let mid = voxel_center(pos.voxel([4, 4, 4]), voxel_size) - Vec3::repeat(0.5 * voxel_size);
        let c = world_to_cam.transform_point(&mid);
        if c.z < -block_radius || c.z > params.max_depth + block_radius {
            return None;
        }
        let mut block = Box::new([CombinedVoxel::default(); BLOCK_VOXELS]);
        let mut any = false;
        for (o, entry) in block.iter_mut().enumerate() {
            if let Some(v) = combine_voxel(
                store,
                pos.voxel(local_from_offset(o)),
                pose,
                &world_to_cam,
                intr,
                params,
            ) {
                *entry = v;
                any = true;
            }
        }
        any.then_some((*pos, block))
    });
    let blocks: FxHashMap<_, _> = blocks.into_iter().flatten().collect();
    let mut regions = FxHashSet::default();
    for pos in blocks.keys() {
        CombinedVolume::add_regions(&mut regions, pos);
    }
    Ok(CombinedVolume {
        voxel_size,
        truncation: store.truncation(),
        theta: store.params().theta,
        blocks,
        regions,
        stamped_pose: *pose,
        frame_index: 0,
        intrinsics: *intr,
        params: *params,
    })
}

/// Recomputes the entries of changed voxels at the volume's stamped pose.
/// Returns the number of entries recomputed.
pub fn combine_incremental(volume: &mut CombinedVolume, store: &VoxelStore, changed: &ChangedVoxels) -> usize {
    if changed.is_empty() {
        return 0;
    }
    let pose = volume.stamped_pose;
    let world_to_cam = pose.inverse();
    let intr = volume.intrinsics;
    let params = volume.params;
    let voxels = changed.voxels();
    let updated = par::map_slice(&voxels, |(pos, o)| {
        let idx = pos.voxel(local_from_offset(*o));
        (idx, combine_voxel(store, idx, &pose, &world_to_cam, &intr, &params))
    });
    for (idx, v) in &updated {
        volume.set(*idx, *v);
    }
    updated.len()
}

/// Frame counters and reference pose of conditional recombination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombineState {
    pub frames_since_start: usize,
    pub frames_since_last_update: usize,
    pub last_pose: Pose,
}

impl CombineState {
    pub fn new(pose: Pose) -> Self {
        Self {
            frames_since_start: 0,
            frames_since_last_update: 0,
            last_pose: pose,
        }
    }

    pub fn mark_recombined(&mut self, pose: Pose) {
        self.frames_since_last_update = 0;
        self.last_pose = pose;
    }

    pub fn advance(&mut self) {
        self.frames_since_start += 1;
        self.frames_since_last_update += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecombineThresholds {
    /// Recombine while fewer frames than this have been processed.
    pub boot_frames: usize,
    /// Recombine once more frames than this passed since the last update.
    pub stale_frames: usize,
    /// Translation bound in meters.
    pub translation: f64,
    /// Rotation bound in radians.
    pub rotation: f64,
}

impl Default for RecombineThresholds {
    fn default() -> Self {
        Self {
            boot_frames: 5,
            stale_frames: 50,
            translation: 0.05,
            rotation: 0.05 * FRAC_PI_2,
        }
    }
}

pub fn should_recombine(state: &CombineState, pose: &Pose, thresholds: &RecombineThresholds) -> bool {
    if state.frames_since_start < thresholds.boot_frames {
        return true;
    }
    if state.frames_since_last_update > thresholds.stale_frames {
        return true;
    }
    let (t, a) = pose_delta(pose, &state.last_pose);
    t > thresholds.translation || a > thresholds.rotation
}
