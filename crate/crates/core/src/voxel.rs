//! Sparse voxel-block hash storage.
//!
//! Voxels live in 8x8x8 blocks addressed by `(block coords, direction)`. A
//! directional store keeps one block per signed coordinate axis, a regular
//! store a single undirected block per position.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::camera::{Frame, Pose, Vec3};
use crate::error::{Error, Result};
use crate::fusion::direction_weight;
use crate::par;

pub const BLOCK_SIDE: i32 = 8;
pub const BLOCK_VOXELS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    XPos = 0,
    XNeg = 1,
    YPos = 2,
    YNeg = 3,
    ZPos = 4,
    ZNeg = 5,
    Undirected = 6,
}

impl Direction {
    pub const DIRECTED: [Direction; 6] = [
        Direction::XPos,
        Direction::XNeg,
        Direction::YPos,
        Direction::YNeg,
        Direction::ZPos,
        Direction::ZNeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: i32) -> Option<Self> {
        match i {
            0 => Some(Direction::XPos),
            1 => Some(Direction::XNeg),
            2 => Some(Direction::YPos),
            3 => Some(Direction::YNeg),
            4 => Some(Direction::ZPos),
            5 => Some(Direction::ZNeg),
            6 => Some(Direction::Undirected),
            _ => None,
        }
    }

    /// Axis unit vector; `None` for the undirected slot.
    pub fn unit_vector(self) -> Option<Vec3> {
        Some(match self {
            Direction::XPos => Vec3::new(1.0, 0.0, 0.0),
            Direction::XNeg => Vec3::new(-1.0, 0.0, 0.0),
            Direction::YPos => Vec3::new(0.0, 1.0, 0.0),
            Direction::YNeg => Vec3::new(0.0, -1.0, 0.0),
            Direction::ZPos => Vec3::new(0.0, 0.0, 1.0),
            Direction::ZNeg => Vec3::new(0.0, 0.0, -1.0),
            Direction::Undirected => return None,
        })
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::XPos => Direction::XNeg,
            Direction::XNeg => Direction::XPos,
            Direction::YPos => Direction::YNeg,
            Direction::YNeg => Direction::YPos,
            Direction::ZPos => Direction::ZNeg,
            Direction::ZNeg => Direction::ZPos,
            Direction::Undirected => Direction::Undirected,
        }
    }

    pub fn is_directed(self) -> bool {
        self != Direction::Undirected
    }

    /// Bit used in direction masks.
    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::XPos => "X+",
            Direction::XNeg => "X-",
            Direction::YPos => "Y+",
            Direction::YNeg => "Y-",
            Direction::ZPos => "Z+",
            Direction::ZNeg => "Z-",
            Direction::Undirected => "U",
        };
        f.write_str(s)
    }
}

/// Stored sample: truncated distance in units of the truncation range, distance
/// weight, color and color weight. `weight == 0` means unobserved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub sdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    pub color_weight: f32,
}

impl Default for Voxel {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            weight: 0.0,
            color: [0.0; 3],
            color_weight: 0.0,
        }
    }
}

impl Voxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    /// Weighted running average of the distance; the accumulated weight is
    /// capped at `max_weight`.
    pub fn fuse_sdf(&mut self, sdf: f64, weight: f64, max_weight: f64) {
        let w = self.weight as f64;
        self.sdf = ((self.sdf as f64 * w + sdf * weight) / (w + weight)).clamp(-1.0, 1.0) as f32;
        self.weight = (w + weight).min(max_weight) as f32;
    }

    pub fn fuse_color(&mut self, color: &[f32; 3], weight: f64, max_weight: f64) {
        let w = self.color_weight as f64;
        for (c, &m) in self.color.iter_mut().zip(color) {
            *c = ((*c as f64 * w + m as f64 * weight) / (w + weight)) as f32;
        }
        self.color_weight = (w + weight).min(max_weight) as f32;
    }
}

/// Block coordinates (voxel index divided by 8, rounded down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockPos {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl BlockPos {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    /// Global voxel index of local voxel `(i, j, k)`.
    pub fn voxel(&self, local: [usize; 3]) -> [i32; 3] {
        [
            self.x * BLOCK_SIDE + local[0] as i32,
            self.y * BLOCK_SIDE + local[1] as i32,
            self.z * BLOCK_SIDE + local[2] as i32,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub pos: BlockPos,
    pub dir: Direction,
}

impl BlockKey {
    pub fn new(x: i32, y: i32, z: i32, dir: Direction) -> Self {
        Self {
            pos: BlockPos::new(x, y, z),
            dir,
        }
    }
}

/// Splits a global voxel index into its block and local coordinates.
#[inline]
pub fn split_index(idx: [i32; 3]) -> (BlockPos, [usize; 3]) {
    (
        BlockPos::new(idx[0] >> 3, idx[1] >> 3, idx[2] >> 3),
        [(idx[0] & 7) as usize, (idx[1] & 7) as usize, (idx[2] & 7) as usize],
    )
}

#[inline]
pub fn local_offset(local: [usize; 3]) -> usize {
    local[0] + 8 * local[1] + 64 * local[2]
}

#[inline]
pub fn local_from_offset(offset: usize) -> [usize; 3] {
    [offset & 7, (offset >> 3) & 7, offset >> 6]
}

/// Trilinear stencil for `point`: lowest corner index and fractional offsets,
/// for voxel centers at `(i + 0.5) * voxel_size`.
#[inline]
pub fn trilinear_stencil(point: &Vec3, voxel_size: f64) -> ([i32; 3], [f64; 3]) {
    let g = point / voxel_size - Vec3::repeat(0.5);
    let base = [floor_i32(g.x), floor_i32(g.y), floor_i32(g.z)];
    (base, [g.x - base[0] as f64, g.y - base[1] as f64, g.z - base[2] as f64])
}

/// `x.floor() as i32` without the libm call baseline x86-64 makes for floor.
#[inline]
pub fn floor_i32(x: f64) -> i32 {
    let i = x as i32;
    if (i as f64) > x {
        i - 1
    } else {
        i
    }
}

/// Interpolates a per-voxel quantity over the 8 stencil corners. Returns `None`
/// if any corner lookup does.
#[inline]
pub fn trilinear<const N: usize, F>(point: &Vec3, voxel_size: f64, mut lookup: F) -> Option<[f64; N]>
where
    F: FnMut([i32; 3]) -> Option<[f64; N]>,
{
    let (base, frac) = trilinear_stencil(point, voxel_size);
    let mut out = [0.0; N];
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, corner >> 2);
        let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
            * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
            * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
        let vals = lookup([base[0] + dx, base[1] + dy, base[2] + dz])?;
        for (o, v) in out.iter_mut().zip(vals) {
            *o += w * v;
        }
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Regular,
    Directional,
}

impl Mode {
    fn to_byte(self) -> u8 {
        match self {
            Mode::Regular => 0,
            Mode::Directional => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Mode::Regular),
            1 => Some(Mode::Directional),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Regular => "regular",
            Mode::Directional => "directional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreParams {
    pub mode: Mode,
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Truncation range in meters.
    pub truncation: f64,
    /// Angular threshold of the direction membership, in (pi/4, pi/2].
    pub theta: f64,
    pub max_weight: f32,
    /// Maximum number of allocated block entries, unlimited if `None`.
    pub block_budget: Option<usize>,
    /// A block is recyclable when every voxel is observed with sdf >= 1 - this.
    pub recycle_epsilon: f32,
    /// Minimum carve passes a block must have seen before it can be recycled.
    pub recycle_min_carves: u32,
}

impl StoreParams {
    pub fn new(mode: Mode, voxel_size: f64) -> Self {
        Self {
            mode,
            voxel_size,
            truncation: 5.0 * voxel_size,
            theta: 3.0 * std::f64::consts::PI / 8.0,
            max_weight: 128.0,
            block_budget: None,
            recycle_epsilon: 0.1,
            recycle_min_carves: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::param("voxel_size", "must be positive"));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::param("truncation", "must be positive"));
        }
        if !(self.theta > FRAC_PI_4 && self.theta <= FRAC_PI_2) {
            return Err(Error::param("theta", format!("{} not in (pi/4, pi/2]", self.theta)));
        }
        if !(self.max_weight > 0.0) {
            return Err(Error::param("max_weight", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub key: BlockKey,
    pub voxels: Box<[Voxel; BLOCK_VOXELS]>,
    /// Number of fusion passes that carved at least one voxel of this block.
    pub carve_passes: u32,
}

impl Block {
    fn new(key: BlockKey) -> Self {
        Self {
            key,
            voxels: Box::new([Voxel::default(); BLOCK_VOXELS]),
            carve_passes: 0,
        }
    }

    pub fn voxel(&self, local: [usize; 3]) -> &Voxel {
        &self.voxels[local_offset(local)]
    }
}

#[derive(Clone)]
pub struct VoxelStore {
    params: StoreParams,
    blocks: Vec<Block>,
    index: FxHashMap<BlockKey, usize>,
}

impl fmt::Debug for VoxelStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VoxelStore")
            .field("params", &self.params)
            .field("blocks", &self.blocks.len())
            .finish()
    }
}

impl VoxelStore {
    pub fn new(params: StoreParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            blocks: Vec::new(),
            index: FxHashMap::default(),
        })
    }

    pub fn params(&self) -> &StoreParams {
        &self.params
    }

    pub fn mode(&self) -> Mode {
        self.params.mode
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.params.truncation
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    /// Directions present in this store's mode.
    pub fn directions(&self) -> &'static [Direction] {
        match self.params.mode {
            Mode::Regular => &[Direction::Undirected],
            Mode::Directional => &Direction::DIRECTED,
        }
    }

    fn accepts(&self, dir: Direction) -> bool {
        match self.params.mode {
            Mode::Regular => dir == Direction::Undirected,
            Mode::Directional => dir.is_directed(),
        }
    }

    pub fn block(&self, key: &BlockKey) -> Option<&Block> {
        self.index.get(key).map(|&i| &self.blocks[i])
    }

    pub fn block_mut(&mut self, key: &BlockKey) -> Option<&mut Block> {
        self.index.get(key).map(|&i| &mut self.blocks[i])
    }

    /// Inserts an empty block if absent. Returns whether a block was created.
    pub fn allocate(&mut self, key: BlockKey) -> Result<bool> {
        if !self.accepts(key.dir) {
            return Err(Error::Mode(format!(
                "direction {} not valid in {} store",
                key.dir, self.params.mode
            )));
        }
        if self.index.contains_key(&key) {
            return Ok(false);
        }
        if let Some(budget) = self.params.block_budget {
            if self.blocks.len() >= budget {
                return Err(Error::BlockBudget { budget });
            }
        }
        self.index.insert(key, self.blocks.len());
        self.blocks.push(Block::new(key));
        Ok(true)
    }

    /// Stored voxel, or `None` when the block is absent or the voxel unobserved.
    pub fn voxel_at(&self, key: &BlockKey, local: [usize; 3]) -> Option<&Voxel> {
        self.block(key).map(|b| b.voxel(local)).filter(|v| v.is_observed())
    }

    /// Observed voxel at a global voxel index.
    #[inline]
    pub fn voxel(&self, dir: Direction, idx: [i32; 3]) -> Option<&Voxel> {
        let (pos, local) = split_index(idx);
        self.voxel_at(&BlockKey { pos, dir }, local)
    }

    pub fn voxel_center(&self, idx: [i32; 3]) -> Vec3 {
        voxel_center(idx, self.params.voxel_size)
    }

    /// Index of the voxel whose cell contains `p`.
    pub fn index_of(&self, p: &Vec3) -> [i32; 3] {
        let g = p / self.params.voxel_size;
        [g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32]
    }

    /// Trilinearly interpolated (sdf, weight) of one channel. Unobserved if any
    /// of the 8 surrounding voxels is unobserved.
    pub fn trilinear_sdf(&self, dir: Direction, point: &Vec3) -> Option<(f32, f32)> {
        let [s, w] = trilinear(point, self.params.voxel_size, |idx| {
            self.voxel(dir, idx).map(|v| [v.sdf as f64, v.weight as f64])
        })?;
        Some((s as f32, w as f32))
    }

    /// Allocates every block crossed by the truncation band along the viewing
    /// ray of each pixel with a valid normal. In directional mode one entry per
    /// direction with nonzero membership weight is created.
    pub fn allocate_for_frame(&mut self, frame: &Frame, pose: &Pose, max_depth: f64) -> Result<usize> {
        let params = self.params;
        let block_size = params.voxel_size * BLOCK_SIDE as f64;
        let center = pose.center();
        let (w, h) = (frame.width(), frame.height());
        let rows: Vec<Vec<BlockKey>> = par::map_range(h, |v| {
            let mut seen = FxHashSet::default();
            let mut keys = Vec::new();
            for u in 0..w {
                let (Some(p), Some(n)) = (frame.vertex_map.get(u, v), frame.normal_map.get(u, v)) else {
                    continue;
                };
                if p.z > max_depth {
                    continue;
                }
                let pw = pose.transform_point(p);
                let nw = pose.transform_vector(n);
                let ray = (pw - center).normalize();
                let dirs: Vec<Direction> = match params.mode {
                    Mode::Regular => vec![Direction::Undirected],
                    Mode::Directional => Direction::DIRECTED
                        .iter()
                        .copied()
                        .filter(|&d| direction_weight(&nw, d, params.theta).unwrap_or(0.0) > 0.0)
                        .collect(),
                };
                let a = pw - ray * params.truncation;
                let b = pw + ray * params.truncation;
                traverse_blocks(&a, &b, block_size, |pos| {
                    for &dir in &dirs {
                        let key = BlockKey { pos, dir };
                        if seen.insert(key) {
                            keys.push(key);
                        }
                    }
                });
            }
            keys
        });
        let mut created = 0;
        for key in rows.into_iter().flatten() {
            if self.allocate(key)? {
                created += 1;
            }
        }
        Ok(created)
    }

    /// Whether every voxel of a block has been carved to (near) free space.
    pub fn is_free_block(&self, block: &Block) -> bool {
        let limit = 1.0 - self.params.recycle_epsilon;
        block.carve_passes >= self.params.recycle_min_carves
            && block.voxels.iter().all(|v| v.is_observed() && v.sdf >= limit)
    }

    /// Removes blocks that contain only carved free space.
    pub fn recycle_free_blocks(&mut self) -> usize {
        let before = self.blocks.len();
        let blocks = std::mem::take(&mut self.blocks);
        let kept: Vec<Block> = blocks.into_iter().filter(|b| !self.is_free_block(b)).collect();
        self.blocks = kept;
        self.index = self.blocks.iter().enumerate().map(|(i, b)| (b.key, i)).collect();
        before - self.blocks.len()
    }

    /// Block counts per direction, indexed by `Direction::index()`.
    pub fn direction_counts(&self) -> [usize; 7] {
        let mut counts = [0; 7];
        for b in &self.blocks {
            counts[b.key.dir.index()] += 1;
        }
        counts
    }

    /// Distinct block positions, in key order.
    pub fn block_positions(&self) -> Vec<BlockPos> {
        let mut v: Vec<BlockPos> = self.blocks.iter().map(|b| b.key.pos).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut order: Vec<&Block> = self.blocks.iter().collect();
        order.sort_by_key(|b| b.key);
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&[self.params.mode.to_byte()])?;
        out.write_all(&(self.params.voxel_size as f32).to_le_bytes())?;
        out.write_all(&(self.params.truncation as f32).to_le_bytes())?;
        out.write_all(&(self.params.theta as f32).to_le_bytes())?;
        out.write_all(&(order.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(20 + BLOCK_VOXELS * 24);
        for b in order {
            buf.clear();
            for c in [b.key.pos.x, b.key.pos.y, b.key.pos.z, b.key.dir as i32] {
                buf.extend_from_slice(&c.to_le_bytes());
            }
            for v in b.voxels.iter() {
                for f in [v.sdf, v.weight, v.color[0], v.color[1], v.color[2], v.color_weight] {
                    buf.extend_from_slice(&f.to_le_bytes());
                }
            }
            out.write_all(&buf)?;
        }
        out.flush()
    }

    /// Reads a snapshot. Store parameters not carried by the format (weight cap,
    /// budget, recycling thresholds) take their defaults.
    pub fn read_snapshot<R: Read>(mut input: R) -> std::result::Result<Self, String> {
        let mut head = [0u8; 4 + 4 + 1 + 12 + 8];
        input
            .read_exact(&mut head)
            .map_err(|e| format!("truncated header: {e}"))?;
        if &head[0..4] != SNAPSHOT_MAGIC {
            return Err("bad magic, not a volume snapshot".into());
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(format!("unsupported snapshot version {version}"));
        }
        let mode = Mode::from_byte(head[8]).ok_or_else(|| format!("unknown mode byte {}", head[8]))?;
        let f = |o: usize| f32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let (voxel_size, truncation, theta) = (f(9) as f64, f(13) as f64, f(17) as f64);
        let count = u64::from_le_bytes(head[21..29].try_into().unwrap());
        let mut params = StoreParams::new(mode, voxel_size);
        params.truncation = truncation;
        params.theta = theta;
        let mut store = VoxelStore::new(params).map_err(|e| e.to_string())?;
        let mut buf = vec![0u8; 16 + BLOCK_VOXELS * 24];
        for n in 0..count {
            input
                .read_exact(&mut buf)
                .map_err(|e| format!("truncated block {n}: {e}"))?;
            let i = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
            let dir = Direction::from_index(i(12)).ok_or_else(|| format!("bad direction {}", i(12)))?;
            let key = BlockKey::new(i(0), i(4), i(8), dir);
            if !store.allocate(key).map_err(|e| e.to_string())? {
                return Err(format!("duplicate block {key:?}"));
            }
            let block = store.block_mut(&key).unwrap();
            for (k, v) in block.voxels.iter_mut().enumerate() {
                let base = 16 + k * 24;
                let g = |j: usize| f32::from_le_bytes(buf[base + 4 * j..base + 4 * j + 4].try_into().unwrap());
                *v = Voxel {
                    sdf: g(0),
                    weight: g(1),
                    color: [g(2), g(3), g(4)],
                    color_weight: g(5),
                };
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_snapshot(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot(std::io::BufReader::new(file)).map_err(|r| Error::format(path, r))
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"DTSV";
pub const SNAPSHOT_VERSION: u32 = 1;
/// Bytes per stored voxel record (six f32 values).
pub const VOXEL_RECORD_BYTES: usize = 24;

#[inline]
pub fn voxel_center(idx: [i32; 3], voxel_size: f64) -> Vec3 {
    Vec3::new(
        (idx[0] as f64 + 0.5) * voxel_size,
        (idx[1] as f64 + 0.5) * voxel_size,
        (idx[2] as f64 + 0.5) * voxel_size,
    )
}

/// Visits every block cell crossed by segment `a`-`b` (3D DDA).
fn traverse_blocks<F: FnMut(BlockPos)>(a: &Vec3, b: &Vec3, block_size: f64, mut visit: F) {
    let start = a / block_size;
    let end = b / block_size;
    let mut cell = [start.x.floor() as i64, start.y.floor() as i64, start.z.floor() as i64];
    let last = [end.x.floor() as i64, end.y.floor() as i64, end.z.floor() as i64];
    let d = end - start;
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for axis in 0..3 {
        if d[axis] > 0.0 {
            step[axis] = 1;
            t_max[axis] = ((cell[axis] + 1) as f64 - start[axis]) / d[axis];
            t_delta[axis] = 1.0 / d[axis];
        } else if d[axis] < 0.0 {
            step[axis] = -1;
            t_max[axis] = (cell[axis] as f64 - start[axis]) / d[axis];
            t_delta[axis] = -1.0 / d[axis];
        }
    }
    let max_steps = (last[0] - cell[0]).abs() + (last[1] - cell[1]).abs() + (last[2] - cell[2]).abs();
    visit(BlockPos::new(cell[0] as i32, cell[1] as i32, cell[2] as i32));
    for _ in 0..max_steps {
        let axis = if t_max[0] < t_max[1] {
            if t_max[0] < t_max[2] {
                0
            } else {
                2
            }
        } else if t_max[1] < t_max[2] {
            1
        } else {
            2
        };
        if t_max[axis] > 1.0 {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        visit(BlockPos::new(cell[0] as i32, cell[1] as i32, cell[2] as i32));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{FrameOptions, Image, Intrinsics};
    use proptest::prelude::*;

    fn dir_store() -> VoxelStore {
        VoxelStore::new(StoreParams::new(Mode::Directional, 0.01)).unwrap()
    }

    fn single_pixel_frame(depth: f64, normal: Vec3) -> (Frame, Intrinsics) {
        let intr = Intrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3).unwrap();
        let mut frame = Frame::new(0.0, Image::new(3, 3, 0.0), None, &intr, &FrameOptions::default()).unwrap();
        *frame.depth.get_mut(1, 1) = depth;
        *frame.vertex_map.get_mut(1, 1) = Some(Vec3::new(0.0, 0.0, depth));
        *frame.normal_map.get_mut(1, 1) = Some(normal);
        (frame, intr)
    }

    /// Brute-force oracle: sample the segment densely and collect block cells.
    fn blocks_on_segment(a: &Vec3, b: &Vec3, block_size: f64) -> FxHashSet<BlockPos> {
        let n = 20_000;
        (0..=n)
            .map(|i| {
                let p = a + (b - a) * (i as f64 / n as f64);
                let g = p / block_size;
                BlockPos::new(g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32)
            })
            .collect()
    }

    #[test]
    fn direction_table() {
        assert_eq!(Direction::DIRECTED.len(), 6);
        for d in Direction::DIRECTED {
            assert_eq!(d.unit_vector().unwrap(), -d.opposite().unit_vector().unwrap());
            assert_eq!(Direction::from_index(d as i32), Some(d));
        }
        assert!(Direction::Undirected.unit_vector().is_none());
    }

    #[test]
    fn axis_normal_allocates_single_direction() {
        let mut store = dir_store();
        // camera at origin looking down +z; the surface faces the camera
        let (frame, _) = single_pixel_frame(1.0, Vec3::new(0.0, 0.0, -1.0));
        let created = store.allocate_for_frame(&frame, &Pose::identity(), 5.0).unwrap();
        assert!(created > 0);
        assert!(store.blocks().iter().all(|b| b.key.dir == Direction::ZNeg));
        let a = Vec3::new(0.0, 0.0, 1.0 - 0.05);
        let b = Vec3::new(0.0, 0.0, 1.0 + 0.05);
        let expected = blocks_on_segment(&a, &b, 0.08);
        let got: FxHashSet<BlockPos> = store.blocks().iter().map(|b| b.key.pos).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn diagonal_normal_allocates_two_directions() {
        let mut store = dir_store();
        let n = Vec3::new(1.0, 1.0, 0.0).normalize();
        let (frame, _) = single_pixel_frame(1.0, n);
        store.allocate_for_frame(&frame, &Pose::identity(), 5.0).unwrap();
        let counts = store.direction_counts();
        assert!(counts[Direction::XPos.index()] > 0);
        assert!(counts[Direction::YPos.index()] > 0);
        assert_eq!(counts[Direction::XPos.index()], counts[Direction::YPos.index()]);
        assert_eq!(counts.iter().sum::<usize>(), 2 * counts[0]);
    }

    #[test]
    fn invalid_normal_allocates_nothing() {
        let mut store = dir_store();
        let (mut frame, _) = single_pixel_frame(1.0, Vec3::new(0.0, 0.0, -1.0));
        *frame.normal_map.get_mut(1, 1) = None;
        assert_eq!(store.allocate_for_frame(&frame, &Pose::identity(), 5.0).unwrap(), 0);
        assert_eq!(store.block_count(), 0);
    }

    #[test]
    fn budget_exhaustion_names_budget() {
        let mut params = StoreParams::new(Mode::Regular, 0.01);
        params.block_budget = Some(1);
        let mut store = VoxelStore::new(params).unwrap();
        let (frame, _) = single_pixel_frame(1.0, Vec3::new(0.0, 0.0, -1.0));
        let err = store.allocate_for_frame(&frame, &Pose::identity(), 5.0).unwrap_err();
        assert!(matches!(err, Error::BlockBudget { budget: 1 }));
        assert!(err.to_string().contains('1'));
    }

    #[test]
    fn absent_and_written_voxels() {
        let mut store = dir_store();
        let key = BlockKey::new(0, 0, 0, Direction::XPos);
        assert!(store.voxel_at(&key, [1, 2, 3]).is_none());
        store.allocate(key).unwrap();
        assert!(store.voxel_at(&key, [1, 2, 3]).is_none());
        let v = &mut store.block_mut(&key).unwrap().voxels[local_offset([1, 2, 3])];
        v.sdf = 0.5;
        v.weight = 1.0;
        let got = store.voxel_at(&key, [1, 2, 3]).unwrap();
        assert_eq!((got.sdf, got.weight), (0.5, 1.0));
    }

    #[test]
    fn running_average_example() {
        let mut v = Voxel::default();
        v.fuse_sdf(0.5, 1.0, 128.0);
        assert_eq!((v.sdf, v.weight), (0.5, 1.0));
        v.fuse_sdf(-0.5, 1.0, 128.0);
        assert_eq!((v.sdf, v.weight), (0.0, 2.0));
        v.weight = 127.5;
        v.fuse_sdf(1.0, 1.0, 128.0);
        assert_eq!(v.weight, 128.0);
    }

    #[test]
    fn mode_exclusivity() {
        let mut store = dir_store();
        assert!(store.allocate(BlockKey::new(0, 0, 0, Direction::Undirected)).is_err());
        let mut reg = VoxelStore::new(StoreParams::new(Mode::Regular, 0.01)).unwrap();
        assert!(reg.allocate(BlockKey::new(0, 0, 0, Direction::ZPos)).is_err());
        reg.allocate(BlockKey::new(0, 0, 0, Direction::Undirected)).unwrap();
        assert!(reg.voxel(Direction::ZPos, [0, 0, 0]).is_none());
    }

    fn fill_block(store: &mut VoxelStore, key: BlockKey, f: impl Fn([i32; 3]) -> f32) {
        store.allocate(key).unwrap();
        let pos = key.pos;
        let b = store.block_mut(&key).unwrap();
        for (o, v) in b.voxels.iter_mut().enumerate() {
            v.sdf = f(pos.voxel(local_from_offset(o)));
            v.weight = 1.0;
        }
    }

    #[test]
    fn trilinear_cases() {
        let mut store = dir_store();
        let key = BlockKey::new(0, 0, 0, Direction::XPos);
        fill_block(&mut store, key, |i| 0.2 + 0.2 * (i[0] as f32 - 2.0));
        // exactly at a voxel center
        let c = store.voxel_center([3, 3, 3]);
        let (s, _) = store.trilinear_sdf(Direction::XPos, &c).unwrap();
        assert!((s - 0.4).abs() < 1e-6);
        // midpoint between centers with 0.2 and 0.4
        let mid = (store.voxel_center([2, 3, 3]) + store.voxel_center([3, 3, 3])) / 2.0;
        let (s, _) = store.trilinear_sdf(Direction::XPos, &mid).unwrap();
        assert!((s - 0.3).abs() < 1e-6);
        // one unobserved corner
        store.block_mut(&key).unwrap().voxels[local_offset([3, 3, 3])].weight = 0.0;
        assert!(store.trilinear_sdf(Direction::XPos, &mid).is_none());
        // other channel is empty
        assert!(store.trilinear_sdf(Direction::XNeg, &c).is_none());
    }

    #[test]
    fn recycle_only_fully_carved_blocks() {
        let mut store = dir_store();
        let free = BlockKey::new(0, 0, 0, Direction::XPos);
        let busy = BlockKey::new(1, 0, 0, Direction::XPos);
        fill_block(&mut store, free, |_| 1.0);
        fill_block(&mut store, busy, |_| 1.0);
        store.block_mut(&busy).unwrap().voxels[7].sdf = -0.1;
        for k in [free, busy] {
            store.block_mut(&k).unwrap().carve_passes = 5;
        }
        assert_eq!(store.recycle_free_blocks(), 1);
        assert!(store.voxel_at(&free, [0, 0, 0]).is_none());
        assert!(store.voxel_at(&busy, [0, 0, 0]).is_some());
        assert_eq!(store.recycle_free_blocks(), 0);
    }

    #[test]
    fn recycle_requires_min_carves() {
        let mut store = dir_store();
        let key = BlockKey::new(0, 0, 0, Direction::ZPos);
        fill_block(&mut store, key, |_| 1.0);
        store.block_mut(&key).unwrap().carve_passes = 2;
        assert_eq!(store.recycle_free_blocks(), 0);
        store.block_mut(&key).unwrap().carve_passes = 3;
        assert_eq!(store.recycle_free_blocks(), 1);
    }

    #[test]
    fn snapshot_round_trip_and_layout() {
        let mut store = dir_store();
        fill_block(&mut store, BlockKey::new(-1, 2, 3, Direction::YNeg), |i| {
            i[0] as f32 * 0.01
        });
        fill_block(&mut store, BlockKey::new(0, 0, 0, Direction::XPos), |_| 0.25);
        let mut buf = Vec::new();
        store.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"DTSV");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf[8], 1);
        assert_eq!(f32::from_le_bytes(buf[9..13].try_into().unwrap()), 0.01);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 29 + 2 * (16 + 512 * 24));
        // blocks are written in key order, so (-1, 2, 3) comes first
        assert_eq!(i32::from_le_bytes(buf[29..33].try_into().unwrap()), -1);
        assert_eq!(i32::from_le_bytes(buf[41..45].try_into().unwrap()), 3);
        let back = VoxelStore::read_snapshot(&buf[..]).unwrap();
        assert_eq!(back.mode(), Mode::Directional);
        assert_eq!(back.block_count(), 2);
        for b in store.blocks() {
            assert_eq!(back.block(&b.key).unwrap().voxels, b.voxels);
        }
        assert!(VoxelStore::read_snapshot(&buf[..40]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(VoxelStore::read_snapshot(&bad[..]).is_err());
    }

    #[test]
    fn theta_range_is_enforced() {
        let mut p = StoreParams::new(Mode::Directional, 0.01);
        p.theta = FRAC_PI_4;
        assert!(VoxelStore::new(p).is_err());
        p.theta = FRAC_PI_2;
        assert!(VoxelStore::new(p).is_ok());
    }

    #[test]
    fn hash_index_survives_million_keys() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut keys = FxHashSet::default();
        while keys.len() < 1_000_000 {
            let d = Direction::DIRECTED[rng.random_range(0..6)];
            keys.insert(BlockKey::new(
                rng.random_range(-500..500),
                rng.random_range(-500..500),
                rng.random_range(-50..50),
                d,
            ));
        }
        let keys: Vec<BlockKey> = keys.into_iter().collect();
        let map: FxHashMap<BlockKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        assert_eq!(map.len(), keys.len());
        for (i, k) in keys.iter().enumerate() {
            assert_eq!(map[k], i);
        }
    }

    proptest! {
        #[test]
        fn store_keeps_every_inserted_block(raw in prop::collection::hash_set((-40i32..40, -40i32..40, -40i32..40, 0i32..6), 1..300)) {
            let mut store = dir_store();
            for &(x, y, z, d) in &raw {
                let key = BlockKey::new(x, y, z, Direction::from_index(d).unwrap());
                prop_assert!(store.allocate(key).unwrap());
                let b = store.block_mut(&key).unwrap();
                b.voxels[0].sdf = (x + 7 * y + 31 * z + d) as f32;
                b.voxels[0].weight = 1.0;
            }
            prop_assert_eq!(store.block_count(), raw.len());
            for &(x, y, z, d) in &raw {
                let key = BlockKey::new(x, y, z, Direction::from_index(d).unwrap());
                prop_assert_eq!(store.voxel_at(&key, [0, 0, 0]).unwrap().sdf, (x + 7 * y + 31 * z + d) as f32);
            }
        }

        #[test]
        fn key_position_round_trip(x in -100i32..100, y in -100i32..100, z in -100i32..100, i in 0usize..8, j in 0usize..8, k in 0usize..8) {
            let pos = BlockPos::new(x, y, z);
            let idx = pos.voxel([i, j, k]);
            prop_assert_eq!(split_index(idx), (pos, [i, j, k]));
            let c = voxel_center(idx, 0.02);
            let g = c / 0.02;
            prop_assert_eq!([g.x.floor() as i32, g.y.floor() as i32, g.z.floor() as i32], idx);
            prop_assert_eq!(local_from_offset(local_offset([i, j, k])), [i, j, k]);
        }

        #[test]
        fn dda_matches_dense_sampling(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0)) {
            let (a, b) = (Vec3::from(a), Vec3::from(b));
            let mut got = FxHashSet::default();
            traverse_blocks(&a, &b, 0.08, |p| { got.insert(p); });
            let dense = blocks_on_segment(&a, &b, 0.08);
            // dense sampling can only miss cells clipped at a corner
            prop_assert!(dense.is_subset(&got));
            prop_assert!(got.len() <= dense.len() + 2);
        }
    }
}
