//! Shared fixtures for unit tests.

use crate::camera::Vec3;
use crate::voxel::{local_from_offset, voxel_center, BlockKey, Direction, Mode, StoreParams, VoxelStore};

/// Regular store filled with `f(point) -> signed distance in meters` on a
/// cube of blocks.
pub fn analytic_store<F: Fn(&Vec3) -> f64>(voxel: f64, lo: [i32; 3], hi: [i32; 3], f: F) -> VoxelStore {
    let mut store = VoxelStore::new(StoreParams::new(Mode::Regular, voxel)).unwrap();
    let tau = store.truncation();
    for bx in lo[0]..hi[0] {
        for by in lo[1]..hi[1] {
            for bz in lo[2]..hi[2] {
                let key = BlockKey::new(bx, by, bz, Direction::Undirected);
                store.allocate(key).unwrap();
                let b = store.block_mut(&key).unwrap();
                for (o, v) in b.voxels.iter_mut().enumerate() {
                    let x = voxel_center(key.pos.voxel(local_from_offset(o)), voxel);
                    let d = f(&x) / tau;
                    if d < -1.0 {
                        continue;
                    }
                    v.sdf = d.min(1.0) as f32;
                    v.weight = 1.0;
                    v.color = [x.x as f32, 0.5, 0.25];
                    v.color_weight = 1.0;
                }
            }
        }
    }
    store
}
