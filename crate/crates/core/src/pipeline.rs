//! Frame loop: conditional recombination, model rendering, tracking,
//! allocation and fusion, with per-frame statistics and run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{BilateralParams, Frame, FrameOptions, Intrinsics, Pose};
use crate::combine::{
    combine_full, combine_incremental, should_recombine, CombineParams, CombineState, CombinedVolume,
    RecombineThresholds,
};
use crate::dataset::{Sequence, DEFAULT_MAX_DT};
use crate::error::{Error, Result};
use crate::eval::{estimate_axis_alignment, AxisAlignmentParams};
use crate::fusion::{fuse_frame, ChangedVoxels, FusionParams};
use crate::icp::{frame_pyramid, track, IcpParams};
use crate::raycast::{raycast, render_pyramid, ChannelView, RaycastParams, RenderResult};
use crate::synthetic::{SynthSpec, SyntheticSequence};
use crate::trajectory::Trajectory;
use crate::voxel::{Mode, StoreParams, VoxelStore};

/// Random-access provider of frames.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn intrinsics(&self) -> &Intrinsics;
    fn timestamp(&self, k: usize) -> f64;
    fn ground_truth(&self, k: usize) -> Option<Pose>;
    fn load(&self, k: usize, opts: &FrameOptions) -> Result<Frame>;
}

impl FrameSource for Sequence {
    fn len(&self) -> usize {
        Sequence::len(self)
    }

    fn intrinsics(&self) -> &Intrinsics {
        &self.manifest.intrinsics
    }

    fn timestamp(&self, k: usize) -> f64 {
        Sequence::timestamp(self, k)
    }

    fn ground_truth(&self, k: usize) -> Option<Pose> {
        self.ground_truth_pose(k)
    }

    fn load(&self, k: usize, opts: &FrameOptions) -> Result<Frame> {
        self.load_frame(k, opts)
    }
}

impl FrameSource for SyntheticSequence {
    fn len(&self) -> usize {
        SyntheticSequence::len(self)
    }

    fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    fn timestamp(&self, k: usize) -> f64 {
        self.trajectory.entries()[k].0
    }

    fn ground_truth(&self, k: usize) -> Option<Pose> {
        Some(self.trajectory.entries()[k].1)
    }

    fn load(&self, k: usize, opts: &FrameOptions) -> Result<Frame> {
        let f = self.frame(k);
        f.view.to_frame(f.timestamp, &self.intrinsics, opts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// TUM-layout sequence directory.
    Sequence {
        path: PathBuf,
        #[serde(default = "default_max_dt")]
        max_dt: f64,
    },
    /// Scene description rendered in memory.
    Scene { path: PathBuf },
}

fn default_max_dt() -> f64 {
    DEFAULT_MAX_DT
}

impl SourceConfig {
    pub fn open(&self) -> Result<Box<dyn FrameSource>> {
        Ok(match self {
            SourceConfig::Sequence { path, max_dt } => Box::new(Sequence::open(path, *max_dt)?),
            SourceConfig::Scene { path } => Box::new(SyntheticSequence::from_spec(&SynthSpec::load(path)?)?),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    /// Frame-to-model ICP.
    #[default]
    Icp,
    /// Ground-truth poses, isolating mapping from tracking.
    GroundTruth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPose {
    #[default]
    Identity,
    GroundTruth,
    /// Rotation aligning the dominant plane of frame 0 with a world axis.
    AxisAlignment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LostPolicy {
    /// Keep the previous pose and do not fuse the frame.
    #[default]
    FuseSkip,
    /// Stop the run.
    Halt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Meters.
    pub voxel_size: f64,
    /// Truncation range in meters; 5 voxels if absent.
    pub truncation: Option<f64>,
    pub theta: f64,
    pub max_weight: f32,
    pub max_integration_distance: f64,
    pub block_budget: Option<usize>,
    pub recycle_epsilon: f32,
    pub recycle_min_carves: u32,
    /// Run the free-block recycling pass every this many frames; 0 disables it.
    pub recycle_interval: usize,
    pub carve_guard_radius: usize,
    pub max_depth_jump: f64,
    pub smoothing: Option<BilateralParams>,
    pub icp: IcpParams,
    pub recombine: RecombineThresholds,
    pub tracking: TrackingMode,
    pub initial_pose: InitialPose,
    pub lost_policy: LostPolicy,
    pub source: Option<SourceConfig>,
    pub output: Option<PathBuf>,
    pub max_frames: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let store = StoreParams::new(Mode::Directional, 0.01);
        Self {
            mode: Mode::Directional,
            voxel_size: store.voxel_size,
            truncation: None,
            theta: store.theta,
            max_weight: store.max_weight,
            max_integration_distance: 5.0,
            block_budget: None,
            recycle_epsilon: store.recycle_epsilon,
            recycle_min_carves: store.recycle_min_carves,
            recycle_interval: 0,
            carve_guard_radius: 2,
            max_depth_jump: FrameOptions::default().max_depth_jump,
            smoothing: None,
            icp: IcpParams::default(),
            recombine: RecombineThresholds::default(),
            tracking: TrackingMode::Icp,
            initial_pose: InitialPose::Identity,
            lost_policy: LostPolicy::FuseSkip,
            source: None,
            output: None,
            max_frames: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn store_params(&self) -> StoreParams {
        StoreParams {
            mode: self.mode,
            voxel_size: self.voxel_size,
            truncation: self.truncation.unwrap_or(5.0 * self.voxel_size),
            theta: self.theta,
            max_weight: self.max_weight,
            block_budget: self.block_budget,
            recycle_epsilon: self.recycle_epsilon,
            recycle_min_carves: self.recycle_min_carves,
        }
    }

    pub fn fusion_params(&self) -> FusionParams {
        let sp = self.store_params();
        FusionParams {
            theta: sp.theta,
            truncation: sp.truncation,
            carve_weight: 1.0,
            carve_guard_radius: self.carve_guard_radius,
            max_integration_distance: self.max_integration_distance,
        }
    }

    pub fn frame_options(&self) -> FrameOptions {
        FrameOptions {
            smoothing: self.smoothing,
            max_depth_jump: self.max_depth_jump,
        }
    }

    pub fn combine_params(&self) -> CombineParams {
        CombineParams::new(self.max_integration_distance, self.store_params().truncation)
    }

    pub fn raycast_params(&self) -> RaycastParams {
        RaycastParams::new(self.max_integration_distance, self.store_params().truncation)
    }

    pub fn validate(&self) -> Result<()> {
        self.store_params().validate()?;
        self.fusion_params().validate()?;
        self.icp.validate()?;
        if !(self.max_depth_jump > 0.0) {
            return Err(Error::param("max_depth_jump", "must be positive"));
        }
        let r = &self.recombine;
        if !(r.translation >= 0.0 && r.rotation >= 0.0) {
            return Err(Error::param("recombine", "thresholds must be non-negative"));
        }
        if self.max_frames == Some(0) {
            return Err(Error::param("max_frames", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    None,
    Full,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Fused,
    /// Tracking failed; the previous pose was kept and fusion skipped.
    LostSkipped,
    /// Tracking failed and the run stopped here.
    LostHalted,
}

/// Deterministic per-frame record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameStats {
    pub index: usize,
    pub timestamp: f64,
    pub status: FrameStatus,
    pub converged: bool,
    pub degenerate: bool,
    pub inlier_fraction: f64,
    pub residual: f64,
    pub combination: Combination,
    /// Voxels written by the combination step.
    pub combined_voxels: usize,
    pub allocated_blocks: usize,
    pub fused: usize,
    pub carved: usize,
    pub recycled_blocks: usize,
    pub blocks: usize,
    pub bytes: usize,
}

/// Wall-clock seconds of each stage of a frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FrameTimings {
    pub allocate: f64,
    pub fuse: f64,
    pub combine: f64,
    pub raycast: f64,
    pub track: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trajectory: Trajectory,
    pub stats: Vec<FrameStats>,
    pub timings: Vec<FrameTimings>,
    pub halted: bool,
}

impl PipelineOutput {
    pub fn stats_csv(&self) -> String {
        let mut out = String::from(
            "index,timestamp,status,converged,degenerate,inlier_fraction,residual,combination,combined_voxels,allocated_blocks,fused,carved,recycled_blocks,blocks,bytes\n",
        );
        for s in &self.stats {
            let status = match s.status {
                FrameStatus::Fused => "fused",
                FrameStatus::LostSkipped => "lost_skipped",
                FrameStatus::LostHalted => "lost_halted",
            };
            let comb = match s.combination {
                Combination::None => "none",
                Combination::Full => "full",
                Combination::Incremental => "incremental",
            };
            writeln!(
                out,
                "{},{:.6},{status},{},{},{:.6},{:.9},{comb},{},{},{},{},{},{},{}",
                s.index,
                s.timestamp,
                s.converged,
                s.degenerate,
                s.inlier_fraction,
                s.residual,
                s.combined_voxels,
                s.allocated_blocks,
                s.fused,
                s.carved,
                s.recycled_blocks,
                s.blocks,
                s.bytes
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("index,allocate_s,fuse_s,combine_s,raycast_s,track_s\n");
        for (k, t) in self.timings.iter().enumerate() {
            writeln!(
                out,
                "{k},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t.allocate, t.fuse, t.combine, t.raycast, t.track
            )
            .expect("writing to a string");
        }
        out
    }

    /// Writes trajectory.txt, stats.csv, timings.csv, volume.dtsv and the
    /// effective config.json into `dir`.
    pub fn write(&self, dir: &Path, store: &VoxelStore, config: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        self.trajectory.write_tum(&dir.join(TRAJECTORY_FILE))?;
        put(STATS_FILE, self.stats_csv())?;
        put(TIMINGS_FILE, self.timings_csv())?;
        put(CONFIG_FILE, config.to_json())?;
        store.save(&dir.join(SNAPSHOT_FILE))
    }
}

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const STATS_FILE: &str = "stats.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SNAPSHOT_FILE: &str = "volume.dtsv";

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Renders the tracking model at `pose`, maintaining the combined volume in
/// directional mode.
struct ModelRenderer {
    combined: Option<CombinedVolume>,
    state: Option<CombineState>,
}

impl ModelRenderer {
    fn update(
        &mut self,
        store: &VoxelStore,
        pose: &Pose,
        changed: &ChangedVoxels,
        intr: &Intrinsics,
        config: &RunConfig,
    ) -> Result<(Combination, usize)> {
        if store.mode() == Mode::Regular {
            return Ok((Combination::None, 0));
        }
        let state = self.state.get_or_insert_with(|| CombineState::new(*pose));
        let result = match &mut self.combined {
            Some(volume) if !should_recombine(state, pose, &config.recombine) => {
                (Combination::Incremental, combine_incremental(volume, store, changed))
            }
            _ => {
                let volume = combine_full(store, pose, intr, &config.combine_params())?;
                let n = volume.observed_count();
                self.combined = Some(volume);
                state.mark_recombined(*pose);
                (Combination::Full, n)
            }
        };
        state.advance();
        Ok(result)
    }

    fn render(
        &self,
        store: &VoxelStore,
        pose: &Pose,
        intr: &Intrinsics,
        params: &RaycastParams,
    ) -> Result<RenderResult> {
        match &self.combined {
            Some(volume) => raycast(volume, pose, intr, params),
            None => raycast(&ChannelView::regular(store)?, pose, intr, params),
        }
    }
}

/// Runs the reconstruction over `source`, fusing into `store`.
pub fn run_pipeline(store: &mut VoxelStore, source: &dyn FrameSource, config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Input("sequence has no frames".into()));
    }
    if store.mode() != config.mode {
        return Err(Error::Mode(format!(
            "store is {}, config asks for {}",
            store.mode(),
            config.mode
        )));
    }
    let intr = *source.intrinsics();
    let n = config.max_frames.map_or(source.len(), |m| m.min(source.len()));
    let opts = config.frame_options();
    let fusion = config.fusion_params();
    let rc = config.raycast_params();
    let needs_gt = config.tracking == TrackingMode::GroundTruth || config.initial_pose == InitialPose::GroundTruth;
    let gt = |k: usize| {
        source
            .ground_truth(k)
            .ok_or_else(|| Error::Input(format!("frame {k} has no ground-truth pose")))
    };
    if needs_gt {
        gt(0)?;
    }

    let mut out = PipelineOutput {
        trajectory: Trajectory::new(),
        stats: Vec::with_capacity(n),
        timings: Vec::with_capacity(n),
        halted: false,
    };
    let mut renderer = ModelRenderer {
        combined: None,
        state: None,
    };
    let mut changed = ChangedVoxels::default();
    let mut last_pose = Pose::identity();

    for k in 0..n {
        let frame = source.load(k, &opts)?;
        let mut times = FrameTimings::default();
        let mut stats = FrameStats {
            index: k,
            timestamp: frame.timestamp,
            status: FrameStatus::Fused,
            converged: true,
            degenerate: false,
            inlier_fraction: 1.0,
            residual: 0.0,
            combination: Combination::None,
            combined_voxels: 0,
            allocated_blocks: 0,
            fused: 0,
            carved: 0,
            recycled_blocks: 0,
            blocks: 0,
            bytes: 0,
        };

        let pose = if k == 0 {
            match config.initial_pose {
                InitialPose::Identity => Pose::identity(),
                InitialPose::GroundTruth => gt(0)?,
                InitialPose::AxisAlignment => {
                    let params = AxisAlignmentParams::new(config.voxel_size, config.seed);
                    let a = estimate_axis_alignment(&frame, &params);
                    if !a.plane_found {
                        log::warn!("no dominant plane in frame 0, starting at identity");
                    }
                    a.pose
                }
            }
        } else if config.tracking == TrackingMode::GroundTruth {
            gt(k)?
        } else {
            let t = Instant::now();
            let (comb, count) = renderer.update(store, &last_pose, &changed, &intr, config)?;
            stats.combination = comb;
            stats.combined_voxels = count;
            times.combine = seconds(t);

            let t = Instant::now();
            let model = renderer.render(store, &last_pose, &intr, &rc)?;
            let model = render_pyramid(model, config.icp.levels, rc.max_depth_jump)?;
            times.raycast = seconds(t);

            let t = Instant::now();
            let levels = frame_pyramid(&frame, &intr, config.icp.levels, opts.max_depth_jump)?;
            let result = track(&levels, &model, &last_pose, &config.icp);
            times.track = seconds(t);
            stats.converged = result.converged;
            stats.degenerate = result.degenerate;
            stats.inlier_fraction = result.inlier_fraction;
            stats.residual = result.residual;
            if result.converged {
                result.pose
            } else {
                log::warn!("frame {k}: tracking lost (inliers {:.3})", result.inlier_fraction);
                stats.status = match config.lost_policy {
                    LostPolicy::FuseSkip => FrameStatus::LostSkipped,
                    LostPolicy::Halt => FrameStatus::LostHalted,
                };
                last_pose
            }
        };

        if stats.status == FrameStatus::Fused {
            let t = Instant::now();
            stats.allocated_blocks = store.allocate_for_frame(&frame, &pose, fusion.max_integration_distance)?;
            times.allocate = seconds(t);
            let t = Instant::now();
            let f = fuse_frame(store, &frame, &pose, &intr, &fusion)?;
            times.fuse = seconds(t);
            stats.fused = f.fused;
            stats.carved = f.carved;
            changed = f.changed;
            if config.recycle_interval > 0 && (k + 1) % config.recycle_interval == 0 {
                stats.recycled_blocks = store.recycle_free_blocks();
                if stats.recycled_blocks > 0 {
                    // recycled blocks invalidate the combined volume
                    renderer.combined = None;
                }
            }
        } else {
            changed = ChangedVoxels::default();
        }
        let mem = crate::eval::memory_stats(store);
        stats.blocks = mem.block_count;
        stats.bytes = mem.bytes;

        out.trajectory.push(frame.timestamp, pose)?;
        let halted = stats.status == FrameStatus::LostHalted;
        out.stats.push(stats);
        out.timings.push(times);
        last_pose = pose;
        if halted {
            out.halted = true;
            break;
        }
    }
    Ok(out)
}
