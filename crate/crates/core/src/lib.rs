//! Directional and regular TSDF reconstruction on the CPU.
//!
//! The crate covers depth/color fusion into a sparse voxel-block store,
//! view-dependent combination of the six directional channels into a single
//! TSDF, raycast rendering, point-to-plane ICP tracking, TUM-format dataset
//! I/O, analytic test scenes and the evaluation metrics used to compare the
//! directional and the regular representation.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod combine;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod icp;
pub mod imageio;
pub mod par;
pub mod pipeline;
pub mod raycast;
pub mod synthetic;
pub mod trajectory;
pub mod voxel;

#[cfg(test)]
mod testutil;

pub use camera::{Frame, FrameOptions, Image, Intrinsics, Pose, Vec3};
pub use error::{Error, Result};
pub use voxel::{Direction, Mode, StoreParams, Voxel, VoxelStore};
