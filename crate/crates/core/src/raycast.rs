//! Per-pixel ray casting of a TSDF into depth, vertex, normal, color and
//! direction maps, plus the multi-resolution pyramid consumed by tracking.

use crate::camera::{compute_normals, unproject, DepthImage, Image, Intrinsics, PointMap, Pose, Vec3};
use crate::combine::{combine_full, CombineParams, CombinedVolume, RecombineThresholds};
use crate::error::{Error, Result};
use crate::voxel::{
    floor_i32, local_offset, split_index, trilinear, trilinear_stencil, BlockKey, BlockPos, Direction, Mode,
    VoxelStore, BLOCK_SIDE,
};

/// Interpolated value of a TSDF source at an integer voxel index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub sdf: f32,
    pub color: [f32; 3],
    pub directions: u8,
}

/// Anything that can be ray cast: a combined volume or one channel of a store.
pub trait RenderSource: Sync {
    fn voxel_size(&self) -> f64;
    fn truncation(&self) -> f64;
    /// Observed sample at a voxel index, `None` if unobserved.
    fn sample(&self, idx: [i32; 3]) -> Option<Sample>;
    /// sdf at the 8 corners of the cell with lowest corner `base`, bit 0 of
    /// the corner number selecting +x, bit 1 +y, bit 2 +z. `None` if any is
    /// unobserved.
    #[inline]
    fn cell_corners(&self, base: [i32; 3]) -> Option<[f64; 8]> {
        let mut c = [0.0; 8];
        for (k, v) in c.iter_mut().enumerate() {
            *v = self.sample(corner_index(base, k))?.sdf as f64;
        }
        Some(c)
    }
    /// Whether the block may hold observed voxels. Used to skip empty space.
    fn has_block(&self, _pos: BlockPos) -> bool {
        true
    }
    /// True if every cell whose lowest corner lies in block `b` is unobserved.
    fn empty_region(&self, b: BlockPos) -> bool {
        (0..8).all(|c| !self.has_block(BlockPos::new(b.x + (c & 1), b.y + ((c >> 1) & 1), b.z + (c >> 2))))
    }
    /// Pose the source was computed for, if it is view dependent.
    fn stamped_pose(&self) -> Option<Pose> {
        None
    }
}

#[inline]
fn corner_index(base: [i32; 3], k: usize) -> [i32; 3] {
    [
        base[0] + (k & 1) as i32,
        base[1] + ((k >> 1) & 1) as i32,
        base[2] + (k >> 2) as i32,
    ]
}

/// Corner offsets within one block when the whole cell lies inside it.
#[inline]
fn in_block_offsets(local: [usize; 3]) -> Option<[usize; 8]> {
    if local.iter().any(|&l| l + 1 >= BLOCK_SIDE as usize) {
        return None;
    }
    let o = local_offset(local);
    Some(std::array::from_fn(|k| {
        o + (k & 1) + 8 * ((k >> 1) & 1) + 64 * (k >> 2)
    }))
}

impl RenderSource for CombinedVolume {
    fn voxel_size(&self) -> f64 {
        CombinedVolume::voxel_size(self)
    }

    fn truncation(&self) -> f64 {
        CombinedVolume::truncation(self)
    }

    #[inline]
    fn sample(&self, idx: [i32; 3]) -> Option<Sample> {
        self.voxel(idx).map(|v| Sample {
            sdf: v.sdf,
            color: v.color,
            directions: v.directions,
        })
    }

    fn cell_corners(&self, base: [i32; 3]) -> Option<[f64; 8]> {
        let (pos, local) = split_index(base);
        match in_block_offsets(local) {
            Some(offsets) => {
                let block = self.block(&pos)?;
                let mut c = [0.0; 8];
                for (v, o) in c.iter_mut().zip(offsets) {
                    let voxel = &block[o];
                    if voxel.weight <= 0.0 {
                        return None;
                    }
                    *v = voxel.sdf as f64;
                }
                Some(c)
            }
            None => {
                let mut c = [0.0; 8];
                for (k, v) in c.iter_mut().enumerate() {
                    *v = self.sample(corner_index(base, k))?.sdf as f64;
                }
                Some(c)
            }
        }
    }

    fn has_block(&self, pos: BlockPos) -> bool {
        CombinedVolume::has_block(self, &pos)
    }

    fn empty_region(&self, b: BlockPos) -> bool {
        !self.region_touches_block(&b)
    }

    fn stamped_pose(&self) -> Option<Pose> {
        Some(self.stamped_pose)
    }
}

/// A single channel of a voxel store viewed as a regular TSDF.
#[derive(Debug, Clone, Copy)]
pub struct ChannelView<'a> {
    store: &'a VoxelStore,
    dir: Direction,
}

impl<'a> ChannelView<'a> {
    pub fn new(store: &'a VoxelStore, dir: Direction) -> Result<Self> {
        if !store.directions().contains(&dir) {
            return Err(Error::Mode(format!(
                "store in {} mode has no {dir} channel",
                store.mode()
            )));
        }
        Ok(Self { store, dir })
    }

    /// The single channel of a regular store.
    pub fn regular(store: &'a VoxelStore) -> Result<Self> {
        if store.mode() != Mode::Regular {
            return Err(Error::Mode("expected a regular store".into()));
        }
        Self::new(store, Direction::Undirected)
    }
}

impl RenderSource for ChannelView<'_> {
    fn voxel_size(&self) -> f64 {
        self.store.voxel_size()
    }

    fn truncation(&self) -> f64 {
        self.store.truncation()
    }

    #[inline]
    fn sample(&self, idx: [i32; 3]) -> Option<Sample> {
        self.store.voxel(self.dir, idx).map(|v| Sample {
            sdf: v.sdf,
            color: v.color,
            directions: self.dir.bit(),
        })
    }

    fn cell_corners(&self, base: [i32; 3]) -> Option<[f64; 8]> {
        let (pos, local) = split_index(base);
        match in_block_offsets(local) {
            Some(offsets) => {
                let block = self.store.block(&BlockKey { pos, dir: self.dir })?;
                let mut c = [0.0; 8];
                for (v, o) in c.iter_mut().zip(offsets) {
                    let voxel = &block.voxels[o];
                    if !voxel.is_observed() {
                        return None;
                    }
                    *v = voxel.sdf as f64;
                }
                Some(c)
            }
            None => {
                let mut c = [0.0; 8];
                for (k, v) in c.iter_mut().enumerate() {
                    *v = self.sample(corner_index(base, k))?.sdf as f64;
                }
                Some(c)
            }
        }
    }

    fn has_block(&self, pos: BlockPos) -> bool {
        self.store.block(&BlockKey { pos, dir: self.dir }).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaycastParams {
    /// Rays start this far from the camera center, in meters.
    pub near: f64,
    /// Maximum ray length in meters.
    pub far: f64,
    /// Maximum fixed-point refinement iterations.
    pub refine_iterations: usize,
    /// Accepted |sdf| at the hit, in voxels.
    pub hit_tolerance: f64,
    /// z-jump bound when recomputing normals on pyramid levels.
    pub max_depth_jump: f64,
}

impl RaycastParams {
    pub fn new(max_integration_distance: f64, truncation: f64) -> Self {
        Self {
            near: 0.05,
            far: max_integration_distance + truncation,
            refine_iterations: 8,
            hit_tolerance: 0.1,
            max_depth_jump: truncation,
        }
    }
}

/// Rendered model maps. Vertices and normals are in the world frame; invalid
/// pixels have depth 0 and no vertex or normal.
#[derive(Debug, Clone)]
pub struct RenderResult {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub depth: DepthImage,
    pub vertex_map: PointMap,
    pub normal_map: PointMap,
    pub color: Image<[f32; 3]>,
    pub direction_mask: Image<u8>,
    pub valid: Image<bool>,
}

impl RenderResult {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }

    fn empty(pose: Pose, intr: Intrinsics) -> Self {
        let (w, h) = (intr.width, intr.height);
        Self {
            pose,
            intrinsics: intr,
            depth: Image::new(w, h, 0.0),
            vertex_map: Image::new(w, h, None),
            normal_map: Image::new(w, h, None),
            color: Image::new(w, h, [0.0; 3]),
            direction_mask: Image::new(w, h, 0),
            valid: Image::new(w, h, false),
        }
    }
}

/// Trilinear (sdf, r, g, b) at a world point; unobserved unless all 8 corners
/// are observed.
#[inline]
pub fn interpolate<S: RenderSource + ?Sized>(source: &S, p: &Vec3) -> Option<[f64; 4]> {
    trilinear(p, source.voxel_size(), |idx| {
        source
            .sample(idx)
            .map(|s| [s.sdf as f64, s.color[0] as f64, s.color[1] as f64, s.color[2] as f64])
    })
}

#[inline]
fn sdf_at<S: RenderSource + ?Sized>(source: &S, p: &Vec3) -> Option<f64> {
    trilinear(p, source.voxel_size(), |idx| source.sample(idx).map(|s| [s.sdf as f64])).map(|[s]| s)
}

/// Normalized gradient of the interpolated field, pointing toward free space.
pub fn surface_normal<S: RenderSource + ?Sized>(source: &S, p: &Vec3) -> Option<Vec3> {
    let h = source.voxel_size();
    let mut g = Vec3::zeros();
    for axis in 0..3 {
        let mut e = Vec3::zeros();
        e[axis] = h;
        let (plus, minus) = (p + e, p - e);
        g[axis] = match (sdf_at(source, &plus), sdf_at(source, &minus)) {
            (Some(a), Some(b)) => a - b,
            (Some(a), None) => 2.0 * (a - sdf_at(source, p)?),
            (None, Some(b)) => 2.0 * (sdf_at(source, p)? - b),
            (None, None) => return None,
        };
    }
    let n = g.norm();
    (n > 1e-12).then(|| g / n)
}

/// Ray parameter of the zero crossing inside the bracket `[t0, t1]` where
/// the field goes from positive to non-positive.
fn refine<S: RenderSource + ?Sized>(
    source: &S,
    origin: &Vec3,
    dir: &Vec3,
    (mut t0, s0): (f64, f64),
    (mut t1, s1): (f64, f64),
    params: &RaycastParams,
) -> Option<f64> {
    let tau = source.truncation();
    let tol = params.hit_tolerance * source.voxel_size();
    let mut t = t0 + (t1 - t0) * s0 / (s0 - s1);
    let mut s = sdf_at(source, &(origin + dir * t))?;
    for _ in 0..params.refine_iterations {
        if (s * tau).abs() <= tol {
            return Some(t);
        }
        if s > 0.0 {
            t0 = t;
        } else {
            t1 = t;
        }
        t = (t + s * tau).clamp(t0, t1);
        s = sdf_at(source, &(origin + dir * t))?;
    }
    // bisection fallback keeps the bracket
    for _ in 0..40 {
        if (s * tau).abs() <= tol {
            return Some(t);
        }
        if s > 0.0 {
            t0 = t;
        } else {
            t1 = t;
        }
        t = 0.5 * (t0 + t1);
        s = sdf_at(source, &(origin + dir * t))?;
    }
    ((s * tau).abs() <= tol).then_some(t)
}

/// Sample spacing along the ray, in voxels.
pub const MARCH_STEP: f64 = 0.1;

/// Ray length from `p` to the exit of the box of trilinear cells, `side`
/// voxels wide, that contains it. A trilinear cell is the cube spanned by
/// eight neighboring voxel centers; observedness is constant inside one.
#[inline]
fn cell_exit(p: &Vec3, inv_dir: &[f64; 3], vs: f64, side: f64) -> f64 {
    let mut t = f64::INFINITY;
    for a in 0..3 {
        let inv = inv_dir[a];
        if inv.is_infinite() {
            continue;
        }
        let g = (p[a] / vs - 0.5) / side;
        let cell = floor_i32(g) as f64;
        let bound = if inv > 0.0 { cell + 1.0 } else { cell };
        t = t.min(((bound * side + 0.5) * vs - p[a]) * inv);
    }
    t.max(0.0)
}

/// Interpolated sdf at `p` and a bound on |d sdf / dt| along `dir` that holds
/// everywhere inside the cell of `p`.
#[inline]
fn cell_sample<S: RenderSource + ?Sized>(source: &S, p: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let vs = source.voxel_size();
    let (base, f) = trilinear_stencil(p, vs);
    let c = source.cell_corners(base)?;
    let mut s = 0.0;
    for (corner, value) in c.iter().enumerate() {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, corner >> 2);
        let w = (if dx == 1 { f[0] } else { 1.0 - f[0] })
            * (if dy == 1 { f[1] } else { 1.0 - f[1] })
            * (if dz == 1 { f[2] } else { 1.0 - f[2] });
        s += w * value;
    }
    // the partial along each axis is a blend of that axis' four edge differences
    let mut g = [0.0f64; 3];
    for corner in 0..8 {
        for (a, ga) in g.iter_mut().enumerate() {
            if corner & (1 << a) == 0 {
                *ga = ga.max((c[corner | (1 << a)] - c[corner]).abs());
            }
        }
    }
    let lipschitz = (g[0] * dir.x.abs() + g[1] * dir.y.abs() + g[2] * dir.z.abs()) / vs;
    Some((s, lipschitz))
}

/// Marches one world-space ray and returns the ray parameter of the first
/// positive-to-non-positive crossing between consecutive observed samples.
///
/// Samples lie on the grid `near + k * MARCH_STEP * voxel_size`. Grid points
/// are skipped only where the outcome is certain: inside unobserved cells, and
/// inside observed cells within the distance over which the sign cannot change.
pub fn march<S: RenderSource + ?Sized>(source: &S, origin: &Vec3, dir: &Vec3, params: &RaycastParams) -> Option<f64> {
    let vs = source.voxel_size();
    let h = MARCH_STEP * vs;
    let at = |k: u64| params.near + k as f64 * h;
    let last = ((params.far - params.near) / h).floor() as u64;
    // largest grid index strictly below t
    let index_below = |t: f64| {
        let x = (t - params.near) / h;
        let i = x as u64;
        if (i as f64) < x {
            i
        } else {
            i.saturating_sub(1)
        }
    };
    let inv_dir = [1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z];
    let mut prev: Option<(f64, f64)> = None;
    let mut k = 0u64;
    while k <= last {
        let t = at(k);
        let p = origin + dir * t;
        match cell_sample(source, &p, dir) {
            None => {
                prev = None;
                let b = trilinear_stencil(&p, vs).0.map(|i| i.div_euclid(BLOCK_SIDE));
                let empty = source.empty_region(BlockPos::new(b[0], b[1], b[2]));
                let side = if empty { BLOCK_SIDE as f64 } else { 1.0 };
                let skip_to = t + cell_exit(&p, &inv_dir, vs, side);
                k = (index_below(skip_to) + 1).max(k + 1);
            }
            Some((s, lipschitz)) => {
                if let Some((tp, sp)) = prev {
                    if sp > 0.0 && s <= 0.0 {
                        let linear = tp + (t - tp) * sp / (sp - s);
                        return refine(source, origin, dir, (tp, sp), (t, s), params).or(Some(linear));
                    }
                }
                prev = Some((t, s));
                let reach = if s == 0.0 { 0.0 } else { s.abs() / lipschitz };
                k = if reach <= h {
                    k + 1
                } else {
                    let limit = (t + reach).min(t + cell_exit(&p, &inv_dir, vs, 1.0));
                    index_below(limit).max(k + 1)
                };
            }
        }
    }
    None
}

/// Vertex, normal, color and direction mask of a ray hit.
type PixelHit = (Vec3, Vec3, [f32; 3], u8);

/// Renders all pixels of a virtual camera at `pose`.
pub fn raycast<S: RenderSource + ?Sized>(
    source: &S,
    pose: &Pose,
    intr: &Intrinsics,
    params: &RaycastParams,
) -> Result<RenderResult> {
    intr.validate()?;
    if let Some(stamp) = source.stamped_pose() {
        let th = RecombineThresholds::default();
        let (t, a) = crate::camera::pose_delta(&stamp, pose);
        if t > th.translation || a > th.rotation {
            log::warn!("rendering {t:.3} m / {a:.3} rad away from the combination pose");
        }
    }
    let origin = pose.center();
    let world_to_cam = pose.inverse();
    let (w, h) = (intr.width, intr.height);
    let pixels: Image<Option<PixelHit>> = Image::from_fn(w, h, |u, v| {
        let dir = pose.transform_vector(&intr.ray(u as f64, v as f64));
        let t = march(source, &origin, &dir, params)?;
        let hit = origin + dir * t;
        let normal = surface_normal(source, &hit)?;
        if normal.dot(&-dir) <= 0.0 {
            return None;
        }
        let [_, r, g, b] = interpolate(source, &hit)?;
        let g_idx = hit / source.voxel_size();
        let nearest = [g_idx.x.floor() as i32, g_idx.y.floor() as i32, g_idx.z.floor() as i32];
        let mask = source.sample(nearest).map(|s| s.directions).unwrap_or(0);
        Some((hit, normal, [r as f32, g as f32, b as f32], mask))
    });
    let mut out = RenderResult::empty(*pose, *intr);
    for v in 0..h {
        for u in 0..w {
            if let Some((hit, normal, color, mask)) = pixels.get(u, v) {
                *out.depth.get_mut(u, v) = world_to_cam.transform_point(hit).z;
                *out.vertex_map.get_mut(u, v) = Some(*hit);
                *out.normal_map.get_mut(u, v) = Some(*normal);
                *out.color.get_mut(u, v) = *color;
                *out.direction_mask.get_mut(u, v) = *mask;
                *out.valid.get_mut(u, v) = true;
            }
        }
    }
    Ok(out)
}

/// Halves the resolution, averaging the valid depths of each 2x2 cell.
pub fn downsample_depth(depth: &DepthImage) -> DepthImage {
    Image::from_fn(depth.width() / 2, depth.height() / 2, |u, v| {
        let (mut sum, mut n) = (0.0, 0);
        for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let z = *depth.get(2 * u + du, 2 * v + dv);
            if z > 0.0 {
                sum += z;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    })
}

fn downsample_result(prev: &RenderResult, max_depth_jump: f64) -> Result<RenderResult> {
    let intr = prev.intrinsics.downsampled(1);
    let depth = downsample_depth(&prev.depth);
    let cam_vertices = unproject(&depth, &intr)?;
    let cam_normals = compute_normals(&cam_vertices, max_depth_jump);
    let pose = prev.pose;
    let (w, h) = (intr.width, intr.height);
    let color = Image::from_fn(w, h, |u, v| {
        let (mut sum, mut n) = ([0.0f32; 3], 0.0f32);
        for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            if *prev.valid.get(2 * u + du, 2 * v + dv) {
                let c = prev.color.get(2 * u + du, 2 * v + dv);
                for k in 0..3 {
                    sum[k] += c[k];
                }
                n += 1.0;
            }
        }
        if n > 0.0 {
            [sum[0] / n, sum[1] / n, sum[2] / n]
        } else {
            [0.0; 3]
        }
    });
    let mask = Image::from_fn(w, h, |u, v| {
        [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .fold(0u8, |m, (du, dv)| m | prev.direction_mask.get(2 * u + du, 2 * v + dv))
    });
    let valid = Image::from_fn(w, h, |u, v| cam_normals.get(u, v).is_some());
    let depth = Image::from_fn(w, h, |u, v| if *valid.get(u, v) { *depth.get(u, v) } else { 0.0 });
    Ok(RenderResult {
        pose,
        intrinsics: intr,
        vertex_map: Image::from_fn(w, h, |u, v| {
            valid
                .get(u, v)
                .then(|| pose.transform_point(&cam_vertices.get(u, v).expect("valid")))
        }),
        normal_map: cam_normals.map(|n| n.map(|n| pose.transform_vector(&n))),
        depth,
        color,
        direction_mask: mask,
        valid,
    })
}

/// Level 0 is the input; each further level halves the resolution and
/// recomputes normals from the averaged depth, with the depth-jump bound
/// scaled by the pixel footprint.
pub fn render_pyramid(result: RenderResult, levels: usize, max_depth_jump: f64) -> Result<Vec<RenderResult>> {
    let max_levels = usize::BITS - result.width().min(result.height()).max(1).leading_zeros() - 1;
    if levels == 0 || levels as u32 > max_levels.max(1) {
        return Err(Error::Input(format!(
            "pyramid of {levels} levels for a {}x{} image",
            result.width(),
            result.height()
        )));
    }
    let mut out = vec![result];
    for level in 1..levels {
        let next = downsample_result(out.last().expect("non-empty"), max_depth_jump * (1u64 << level) as f64)?;
        out.push(next);
    }
    Ok(out)
}

/// Renders a store at `pose`: a directional store is first combined for that
/// pose, a regular store is cast directly.
pub fn render_store(
    store: &VoxelStore,
    pose: &Pose,
    intr: &Intrinsics,
    combine: &CombineParams,
    params: &RaycastParams,
) -> Result<RenderResult> {
    match store.mode() {
        Mode::Directional => raycast(&combine_full(store, pose, intr, combine)?, pose, intr, params),
        Mode::Regular => raycast(&ChannelView::regular(store)?, pose, intr, params),
    }
}
