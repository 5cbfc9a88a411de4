//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use dtsdf::camera::{pose_delta, FrameOptions};
use dtsdf::combine::{
    combination_weight, combine_full, combine_incremental, should_recombine, CombineParams, CombineState,
    RecombineThresholds,
};
use dtsdf::eval::{color_error, memory_stats, post_fusion_mae, rpe, EvalFrame, MetricReport, RenderParams};
use dtsdf::fusion::{color_weight, direction_weight, fuse_frame, integrate, point_plane_sdf, FusionParams};
use dtsdf::icp::{frame_pyramid, track, IcpParams};
use dtsdf::pipeline::{run_pipeline, FrameStatus, InitialPose, RunConfig, TrackingMode};
use dtsdf::raycast::{interpolate, raycast, render_pyramid, render_store, ChannelView, RaycastParams, RenderSource};
use dtsdf::synthetic::{
    box_on_plane_scene, orbit_trajectory, room_scene, thin_wall_scene, AnalyticScene, OrbitSpec, Primitive,
    SyntheticSequence, SLAB_FRONT,
};
use dtsdf::trajectory::Trajectory;
use dtsdf::voxel::{BlockKey, BlockPos};
use dtsdf::{Direction, Frame, Image, Intrinsics, Mode, Pose, Vec3, VoxelStore};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Quarter-resolution TUM camera.
fn qvga() -> Intrinsics {
    Intrinsics::new(131.25, 131.25, 79.5, 59.5, 160, 120).unwrap()
}

const MAX_DIST: f64 = 3.0;

fn config(mode: Mode, voxel_size: f64, tracking: TrackingMode) -> RunConfig {
    RunConfig {
        mode,
        voxel_size,
        tracking,
        initial_pose: InitialPose::GroundTruth,
        max_integration_distance: MAX_DIST,
        ..RunConfig::default()
    }
}

fn fuse_sequence(seq: &SyntheticSequence, cfg: &RunConfig) -> (VoxelStore, Trajectory) {
    let mut store = VoxelStore::new(cfg.store_params()).unwrap();
    let out = run_pipeline(&mut store, seq, cfg).unwrap();
    (store, out.trajectory)
}

fn mae(store: &VoxelStore, seq: &SyntheticSequence, poses: &[Pose], masks: Option<&[Image<bool>]>) -> MetricReport {
    let views: Vec<_> = (0..seq.len()).map(|k| seq.frame(k)).collect();
    let frames: Vec<EvalFrame> = views
        .iter()
        .enumerate()
        .map(|(k, f)| EvalFrame {
            pose: poses[k],
            depth: &f.view.depth,
            mask: masks.map(|m| &m[k]),
        })
        .collect();
    post_fusion_mae(
        store,
        &frames,
        &seq.intrinsics,
        &RenderParams::new(MAX_DIST, store.truncation()),
    )
    .unwrap()
}

const WALL_THICKNESS: f64 = 0.005;
const WALL_VOXEL: f64 = 0.02;

fn thin_wall_sequence(frames: usize) -> SyntheticSequence {
    let spec = OrbitSpec {
        height: 0.5,
        ..OrbitSpec::new(Vec3::new(0.0, 0.0, 0.3), 1.2, frames)
    };
    SyntheticSequence {
        scene: thin_wall_scene(WALL_THICKNESS, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        trajectory: orbit_trajectory(&spec).unwrap(),
        intrinsics: qvga(),
        seed: 0,
    }
}

struct ThinWall {
    seq: SyntheticSequence,
    directional: VoxelStore,
    regular: VoxelStore,
    fuse_seconds: f64,
}

/// Thin-wall orbit fused with ground-truth poses in both modes, shared by
/// criteria 1 and 2.
fn thin_wall() -> &'static ThinWall {
    static CELL: OnceLock<ThinWall> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let seq = thin_wall_sequence(120);
        let (directional, _) = fuse_sequence(&seq, &config(Mode::Directional, WALL_VOXEL, TrackingMode::GroundTruth));
        let (regular, _) = fuse_sequence(&seq, &config(Mode::Regular, WALL_VOXEL, TrackingMode::GroundTruth));
        ThinWall {
            seq,
            directional,
            regular,
            fuse_seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let w = thin_wall();
    let poses = w.seq.trajectory.poses();
    let wall_masks: Vec<Image<bool>> = (0..w.seq.len())
        .map(|k| w.seq.frame(k).view.labels.map(|l| matches!(l, Some((0, _)))))
        .collect();
    let dir = mae(&w.directional, &w.seq, &poses, None);
    let reg = mae(&w.regular, &w.seq, &poses, None);
    let reg_wall = mae(&w.regular, &w.seq, &poses, Some(&wall_masks));
    let tau = w.regular.truncation() * 1000.0;
    let seconds = w.fuse_seconds + t.elapsed().as_secs_f64();
    check(
        dir.mean < 0.7 * reg.mean && reg_wall.mean > tau / 2.0 && seconds < 120.0,
        format!(
            "MAE directional {:.2} mm vs regular {:.2} mm (ratio {:.3} < 0.7); regular wall MAE {:.2} mm > tau/2 = {:.1} mm; {:.1} s < 120 s",
            dir.mean,
            reg.mean,
            dir.mean / reg.mean,
            reg_wall.mean,
            tau / 2.0,
            seconds
        ),
    )
}

fn criterion_2() -> Outcome {
    let w = thin_wall();
    // frame 0 looks at the red front face from +x
    let front = w.seq.frame(0);
    let mask = front.view.labels.map(|l| *l == Some((0, SLAB_FRONT)));
    let err = |store: &VoxelStore| {
        let p = RenderParams::new(MAX_DIST, store.truncation());
        let r = render_store(store, &front.pose, &w.seq.intrinsics, &p.combine, &p.raycast).unwrap();
        color_error(&r, &front.view.color, Some(&mask)).unwrap_or(f64::NAN)
    };
    let (d, r) = (err(&w.directional), err(&w.regular));
    check(
        d < 0.1 && r > 0.3,
        format!("front-view color error directional {d:.4} < 0.1, regular {r:.4} > 0.3"),
    )
}

fn criterion_3() -> Outcome {
    let vs = 0.02;
    // wide field of view keeps a room corner in every frame
    let spec = OrbitSpec {
        height: 0.5,
        ..OrbitSpec::new(Vec3::new(0.0, 0.0, 0.5), 0.8, 120)
    };
    let seq = SyntheticSequence {
        scene: room_scene(1.0, 2.0),
        trajectory: orbit_trajectory(&spec).unwrap(),
        intrinsics: Intrinsics::new(80.0, 80.0, 79.5, 59.5, 160, 120).unwrap(),
        seed: 0,
    };
    let mut res = Vec::new();
    for mode in [Mode::Directional, Mode::Regular] {
        let (store, est) = fuse_sequence(&seq, &config(mode, vs, TrackingMode::Icp));
        let r = rpe(&est, &seq.trajectory, 30).unwrap().translation.mean;
        let m = mae(&store, &seq, &est.poses(), None).mean;
        res.push((r, m));
    }
    let tol = vs / 4.0 * 1000.0;
    let (d_mae, d_rpe) = ((res[0].1 - res[1].1).abs(), (res[0].0 - res[1].0).abs());
    check(
        d_mae < tol && d_rpe < tol,
        format!(
            "MAE {:.3}/{:.3} mm, RPE {:.3}/{:.3} mm (directional/regular); |dMAE| {d_mae:.3}, |dRPE| {d_rpe:.3} < {tol:.1} mm",
            res[0].1, res[1].1, res[0].0, res[1].0
        ),
    )
}

fn box_orbit(frames: usize, height: f64, arc: f64) -> SyntheticSequence {
    let spec = OrbitSpec {
        height,
        arc,
        ..OrbitSpec::new(Vec3::new(0.0, 0.0, 0.1), 1.0, frames)
    };
    SyntheticSequence {
        scene: box_on_plane_scene(),
        trajectory: orbit_trajectory(&spec).unwrap(),
        intrinsics: qvga(),
        seed: 0,
    }
}

fn criterion_4() -> Outcome {
    let vs = 0.01;
    let mut notes = Vec::new();
    let mut ok = true;

    // fixed point: a frame rendered from the model at P, tracked from P
    let seq = box_orbit(8, 0.6, 0.2);
    let cfg = config(Mode::Directional, vs, TrackingMode::GroundTruth);
    let (store, _) = fuse_sequence(&seq, &cfg);
    let pose = seq.trajectory.poses()[4];
    let intr = seq.intrinsics;
    let rc = RaycastParams::new(MAX_DIST, store.truncation());
    let model = render_store(
        &store,
        &pose,
        &intr,
        &CombineParams::new(MAX_DIST, store.truncation()),
        &rc,
    )
    .unwrap();
    let frame = Frame::new(
        0.0,
        model.depth.clone(),
        Some(model.color.clone()),
        &intr,
        &FrameOptions::default(),
    )
    .unwrap();
    let icp = IcpParams::default();
    let levels = frame_pyramid(&frame, &intr, icp.levels, cfg.max_depth_jump).unwrap();
    let pyramid = render_pyramid(model, icp.levels, rc.max_depth_jump).unwrap();
    let fixed = track(&levels, &pyramid, &pose, &icp);
    let (dt, _) = pose_delta(&fixed.pose, &pose);
    ok &= fixed.converged && dt < 1e-6;
    notes.push(format!("fixed point {dt:.2e} m < 1e-6"));

    // 5 mm steps
    let seq = box_orbit(40, 0.0, 0.2);
    let step = (seq.trajectory.poses()[1].center() - seq.trajectory.poses()[0].center()).norm();
    for mode in [Mode::Directional, Mode::Regular] {
        let (_, est) = fuse_sequence(&seq, &config(mode, vs, TrackingMode::Icp));
        let (g, e) = (seq.trajectory.poses(), est.poses());
        let worst = (1..e.len())
            .map(|k| {
                ((g[k - 1].inverse() * g[k]).inverse() * (e[k - 1].inverse() * e[k]))
                    .translation
                    .norm()
            })
            .fold(0.0, f64::max);
        ok &= worst < 0.0005;
        notes.push(format!(
            "{mode} {:.1} mm steps worst error {:.3} mm < 0.5",
            step * 1000.0,
            worst * 1000.0
        ));
    }

    // full orbit
    let seq = box_orbit(120, 0.6, 2.0 * PI);
    for mode in [Mode::Directional, Mode::Regular] {
        let (_, est) = fuse_sequence(&seq, &config(mode, vs, TrackingMode::Icp));
        let r = rpe(&est, &seq.trajectory, 30).unwrap().translation.mean;
        ok &= r < 2.0 * vs * 1000.0;
        notes.push(format!("{mode} full-orbit RPE {r:.2} mm < {:.0}", 2.0 * vs * 1000.0));
    }
    check(ok, notes.join("; "))
}

fn criterion_5() -> Outcome {
    let th = RecombineThresholds::default();
    let mut ok = true;
    let mut notes = Vec::new();
    let settled = |since_start: usize, since_last: usize| CombineState {
        frames_since_start: since_start,
        frames_since_last_update: since_last,
        last_pose: Pose::identity(),
    };
    let id = Pose::identity();
    let cases: [(&str, CombineState, Pose, bool); 8] = [
        ("4 frames", settled(4, 0), id, true),
        ("5 frames", settled(5, 0), id, false),
        ("50 stale", settled(100, 50), id, false),
        ("51 stale", settled(100, 51), id, true),
        (
            "0.049 m",
            settled(100, 0),
            Pose::from_translation(Vec3::new(0.0, 0.049, 0.0)),
            false,
        ),
        (
            "0.051 m",
            settled(100, 0),
            Pose::from_translation(Vec3::new(0.0, 0.051, 0.0)),
            true,
        ),
        (
            "0.049 pi/2",
            settled(100, 0),
            Pose::from_axis_angle(&Vec3::z(), 0.049 * FRAC_PI_2, Vec3::zeros()),
            false,
        ),
        (
            "0.051 pi/2",
            settled(100, 0),
            Pose::from_axis_angle(&Vec3::z(), 0.051 * FRAC_PI_2, Vec3::zeros()),
            true,
        ),
    ];
    for (name, state, pose, expected) in cases {
        let got = should_recombine(&state, &pose, &th);
        if got != expected {
            ok = false;
            notes.push(format!("{name}: got {got}"));
        }
    }
    notes.push("8 threshold boundaries".into());

    // incremental update equals full recombination on the changed voxels
    let seq = box_orbit(6, 0.6, 0.3);
    let intr = seq.intrinsics;
    let mut store = VoxelStore::new(config(Mode::Directional, 0.02, TrackingMode::GroundTruth).store_params()).unwrap();
    let fp = FusionParams {
        max_integration_distance: MAX_DIST,
        ..FusionParams::for_store(&store)
    };
    let cp = CombineParams::new(MAX_DIST, store.truncation());
    let stamp = seq.trajectory.poses()[0];
    let opts = FrameOptions::default();
    integrate(&mut store, &seq.load_frame(0, &opts), &stamp, &intr, &fp).unwrap();
    let mut volume = combine_full(&store, &stamp, &intr, &cp).unwrap();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for k in 1..seq.len() {
        let pose = seq.trajectory.poses()[k];
        let stats = integrate(&mut store, &seq.load_frame(k, &opts), &pose, &intr, &fp).unwrap();
        combine_incremental(&mut volume, &store, &stats.changed);
        let full = combine_full(&store, &stamp, &intr, &cp).unwrap();
        for (pos, o) in stats.changed.voxels() {
            let idx = pos.voxel(dtsdf::voxel::local_from_offset(o));
            match (volume.voxel(idx), full.voxel(idx)) {
                (Some(a), Some(b)) => {
                    worst = worst
                        .max((a.sdf - b.sdf).abs() as f64)
                        .max((a.weight - b.weight).abs() as f64);
                    for c in 0..3 {
                        worst = worst.max((a.color[c] - b.color[c]).abs() as f64);
                    }
                }
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
            compared += 1;
        }
    }
    ok &= worst <= 1e-6 && compared > 0;
    notes.push(format!(
        "incremental vs full over {compared} changed voxels: max diff {worst:.1e} <= 1e-6"
    ));
    check(ok, notes.join("; "))
}

trait LoadFrame {
    fn load_frame(&self, k: usize, opts: &FrameOptions) -> Frame;
}

impl LoadFrame for SyntheticSequence {
    fn load_frame(&self, k: usize, opts: &FrameOptions) -> Frame {
        let f = self.frame(k);
        f.view.to_frame(f.timestamp, &self.intrinsics, opts).unwrap()
    }
}

fn criterion_6() -> Outcome {
    let theta = 3.0 * PI / 8.0;
    let mut ok = true;
    let mut notes = Vec::new();

    // direction weight: partition of unity in the coordinate planes
    let mut worst: f64 = 0.0;
    for plane in 0..3 {
        for k in 0..3600 {
            let phi = 2.0 * PI * k as f64 / 3600.0;
            let n = match plane {
                0 => Vec3::new(phi.cos(), phi.sin(), 0.0),
                1 => Vec3::new(phi.cos(), 0.0, phi.sin()),
                _ => Vec3::new(0.0, phi.cos(), phi.sin()),
            };
            let sum: f64 = Direction::DIRECTED
                .iter()
                .map(|&d| direction_weight(&n, d, theta).unwrap())
                .sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    ok &= worst < 1e-6;
    notes.push(format!("direction weights sum to 1 (max dev {worst:.1e})"));

    // color weight endpoints and midpoint
    let tau = 0.1;
    let x = Vec3::new(0.3, 0.2, 1.0);
    let cw = |d: f64| color_weight(0.8, &(x + Vec3::new(d, 0.0, 0.0)), &x, tau);
    let color_ok = (cw(0.0) - 0.8).abs() < 1e-12
        && (cw(tau / 2.0) - 0.4).abs() < 1e-12
        && cw(tau).abs() < 1e-12
        && cw(2.0 * tau) == 0.0;
    ok &= color_ok;
    notes.push(format!("color weight 0.8/0.4/0/0 at 0, tau/2, tau, 2 tau: {color_ok}"));

    // point-to-plane distance, hand-evaluated
    let n = Vec3::new(0.0, 0.6, 0.8);
    let p = Vec3::new(0.0, 0.0, 1.0);
    let hand = [
        (Vec3::new(0.0, 0.0, 1.0), 0.0),
        (Vec3::new(0.5, 0.0, 1.05), -0.4),
        (Vec3::new(0.0, -0.03, 0.96), 0.5),
    ];
    let sdf_ok = hand
        .iter()
        .all(|(xv, want)| (point_plane_sdf(&p, xv, &n, tau) - want).abs() < 1e-12);
    ok &= sdf_ok;
    notes.push(format!("point-to-plane hand values: {sdf_ok}"));

    // combination weight: backface suppression and gradient fallback
    let mut store = VoxelStore::new(dtsdf::StoreParams::new(Mode::Directional, 0.01)).unwrap();
    let key = BlockKey {
        pos: BlockPos::new(0, 0, 0),
        dir: Direction::XPos,
    };
    store.allocate(key).unwrap();
    {
        let block = store.block_mut(&key).unwrap();
        for (o, v) in block.voxels.iter_mut().enumerate() {
            let l = dtsdf::voxel::local_from_offset(o);
            // surface at x = 4 voxels facing +x
            v.sdf = ((l[0] as f32 - 4.0) * 0.2).clamp(-1.0, 1.0);
            v.weight = 2.0;
        }
    }
    let idx = [4, 4, 4];
    let c = store.voxel_center(idx);
    let front = combination_weight(&store, Direction::XPos, idx, &(c + Vec3::new(1.0, 0.0, 0.0))).unwrap();
    let back = combination_weight(&store, Direction::XPos, idx, &(c - Vec3::new(1.0, 0.0, 0.0))).unwrap();
    let side = combination_weight(&store, Direction::XPos, idx, &(c + Vec3::new(0.0, 1.0, 0.0))).unwrap();
    let bf_ok = front.from_gradient && (front.weight - 2.0).abs() < 1e-9 && back.weight == 0.0 && side.weight == 0.0;
    ok &= bf_ok;
    notes.push(format!(
        "backface weight 0 ({:.1}/{:.1}/{:.1}): {bf_ok}",
        front.weight, back.weight, side.weight
    ));

    // fallback fires exactly when the 6-neighbor gradient is undefined
    let edge = combination_weight(&store, Direction::XPos, [0, 4, 4], &(c + Vec3::new(1.0, 0.0, 0.0))).unwrap();
    let mut flat = VoxelStore::new(dtsdf::StoreParams::new(Mode::Directional, 0.01)).unwrap();
    flat.allocate(key).unwrap();
    for v in flat.block_mut(&key).unwrap().voxels.iter_mut() {
        v.sdf = 0.3;
        v.weight = 1.0;
    }
    let flat_w = combination_weight(&flat, Direction::XPos, idx, &(c + Vec3::new(1.0, 0.0, 0.0))).unwrap();
    let interior = (1..7).all(|i| {
        combination_weight(&store, Direction::XPos, [i, i, i], &(c + Vec3::new(1.0, 0.0, 0.0)))
            .unwrap()
            .from_gradient
    });
    let fb_ok = !edge.from_gradient && !flat_w.from_gradient && (flat_w.weight - 1.0).abs() < 1e-9 && interior;
    ok &= fb_ok;
    notes.push(format!("fallback on missing neighbor and zero gradient only: {fb_ok}"));
    check(ok, notes.join("; "))
}

/// Dense march on the interpolated field with a step of 0.1 voxel.
fn marching_oracle<S: RenderSource>(
    source: &S,
    pose: &Pose,
    intr: &Intrinsics,
    u: usize,
    v: usize,
    far: f64,
) -> Option<f64> {
    let step = 0.1 * source.voxel_size();
    let dir = pose.transform_vector(&intr.ray(u as f64, v as f64));
    let o = pose.center();
    let mut prev: Option<(f64, f64)> = None;
    let mut t = 0.05;
    while t < far {
        let s = interpolate(source, &(o + dir * t)).map(|s| s[0]);
        if let (Some((tp, sp)), Some(s)) = (prev, s) {
            if sp > 0.0 && s <= 0.0 {
                let th = tp + (t - tp) * sp / (sp - s);
                return Some(pose.inverse().transform_point(&(o + dir * th)).z);
            }
        }
        prev = s.map(|s| (t, s));
        t += step;
    }
    None
}

fn compare_with_oracle<S: RenderSource>(source: &S, pose: &Pose, intr: &Intrinsics, far: f64) -> (usize, usize, f64) {
    let params = RaycastParams::new(far, source.truncation());
    let r = raycast(source, pose, intr, &params).unwrap();
    let (mut mutual, mut within, mut worst) = (0, 0, 0.0f64);
    for v in 0..intr.height {
        for u in 0..intr.width {
            if !*r.valid.get(u, v) {
                continue;
            }
            let Some(oracle) = marching_oracle(source, pose, intr, u, v, far) else {
                continue;
            };
            mutual += 1;
            let along = (r.depth.get(u, v) - oracle).abs() / intr.ray(u as f64, v as f64).z;
            worst = worst.max(along / source.voxel_size());
            if along <= 0.25 * source.voxel_size() {
                within += 1;
            }
        }
    }
    (mutual, within, worst)
}

fn criterion_7() -> Outcome {
    let intr = Intrinsics::new(60.0, 60.0, 39.5, 29.5, 80, 60).unwrap();
    let mut notes = Vec::new();
    let mut ok = true;

    // analytic sphere-on-plane field in a 64^3 regular store
    let vs = 0.01;
    let mut store = VoxelStore::new(dtsdf::StoreParams::new(Mode::Regular, vs)).unwrap();
    let tau = store.truncation();
    let center = Vec3::new(0.32, 0.3, 0.3);
    let f = |x: &Vec3| ((x - center).norm() - 0.15).min(x.y - 0.1);
    for bz in 0..8 {
        for by in 0..8 {
            for bx in 0..8 {
                let key = BlockKey {
                    pos: BlockPos::new(bx, by, bz),
                    dir: Direction::Undirected,
                };
                store.allocate(key).unwrap();
                let block = store.block_mut(&key).unwrap();
                for (o, v) in block.voxels.iter_mut().enumerate() {
                    let x = dtsdf::voxel::voxel_center(key.pos.voxel(dtsdf::voxel::local_from_offset(o)), vs);
                    let d = f(&x) / tau;
                    if d >= -1.0 {
                        v.sdf = d.min(1.0) as f32;
                        v.weight = 1.0;
                        v.color = [0.5; 3];
                    }
                }
            }
        }
    }
    let view = ChannelView::regular(&store).unwrap();
    let pose = Pose::look_at(Vec3::new(0.5, 0.65, -0.2), center, Vec3::new(0.0, -1.0, 0.0));
    let (m, w, worst) = compare_with_oracle(&view, &pose, &intr, 2.0);
    ok &= m > 1000 && w == m;
    notes.push(format!(
        "analytic 64^3: {w}/{m} pixels within 0.25 voxel (worst {worst:.3})"
    ));

    // combined volume of a fused directional 64^3 box scene
    let vs = 0.02;
    let mut seq = box_orbit(12, 0.6, 1.0);
    if let Some(Primitive::Plane { extent, .. }) = seq.scene.primitives.last_mut() {
        *extent = Some(0.45);
    }
    let (dstore, _) = fuse_sequence(&seq, &config(Mode::Directional, vs, TrackingMode::GroundTruth));
    let pose = seq.trajectory.poses()[6];
    let volume = combine_full(
        &dstore,
        &pose,
        &seq.intrinsics,
        &CombineParams::new(MAX_DIST, dstore.truncation()),
    )
    .unwrap();
    let extent = dstore.block_positions().iter().fold([i32::MAX, i32::MIN], |acc, p| {
        [acc[0].min(p.x.min(p.y).min(p.z)), acc[1].max(p.x.max(p.y).max(p.z))]
    });
    let side = (extent[1] - extent[0] + 1) * 8;
    let (m, w, worst) = compare_with_oracle(&volume, &pose, &seq.intrinsics, MAX_DIST);
    ok &= m > 1000 && w == m && side <= 64;
    notes.push(format!(
        "combined {side}^3-bounded volume: {w}/{m} within 0.25 voxel (worst {worst:.3})"
    ));
    check(ok, notes.join("; "))
}

fn block_ratio(scene: &AnalyticScene, traj: &Trajectory, intr: Intrinsics, vs: f64) -> (f64, usize, usize) {
    let seq = SyntheticSequence {
        scene: scene.clone(),
        trajectory: traj.clone(),
        intrinsics: intr,
        seed: 0,
    };
    let (d, _) = fuse_sequence(&seq, &config(Mode::Directional, vs, TrackingMode::GroundTruth));
    let (r, _) = fuse_sequence(&seq, &config(Mode::Regular, vs, TrackingMode::GroundTruth));
    let (d, r) = (memory_stats(&d).block_count, memory_stats(&r).block_count);
    (d as f64 / r as f64, d, r)
}

fn criterion_8() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let orbit = orbit_trajectory(&OrbitSpec {
        height: 0.5,
        ..OrbitSpec::new(Vec3::new(0.0, 0.0, 0.3), 1.2, 120)
    })
    .unwrap();
    let sphere = AnalyticScene {
        primitives: vec![Primitive::Sphere {
            center: [0.0, 0.0, 0.3],
            radius: 0.25,
            color: [0.8; 3],
        }],
        noise: None,
    };
    let room_orbit = orbit_trajectory(&OrbitSpec {
        height: 0.5,
        ..OrbitSpec::new(Vec3::new(0.0, 0.0, 0.5), 0.8, 60)
    })
    .unwrap();
    let wide = Intrinsics::new(80.0, 80.0, 79.5, 59.5, 160, 120).unwrap();
    for (name, scene, traj, intr) in [
        ("sphere", &sphere, &orbit, qvga()),
        ("room", &room_scene(1.0, 2.0), &room_orbit, wide),
        ("box on plane", &box_on_plane_scene(), &orbit, qvga()),
    ] {
        let (ratio, d, r) = block_ratio(scene, traj, intr, 0.02);
        ok &= ratio > 1.0 && ratio <= 3.0;
        notes.push(format!("{name} {d}/{r} = {ratio:.3}"));
    }
    let wall = thin_wall_scene(WALL_THICKNESS, [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
    let mut ratios = Vec::new();
    for vs in [0.005, 0.01, 0.02] {
        let (ratio, _, _) = block_ratio(&wall, &orbit, qvga(), vs);
        ratios.push(ratio);
    }
    ok &= ratios[0] < ratios[1] && ratios[1] < ratios[2];
    notes.push(format!(
        "thin wall ratio at 5/10/20 mm: {:.3} < {:.3} < {:.3}",
        ratios[0], ratios[1], ratios[2]
    ));
    check(ok, notes.join("; "))
}

fn frame_of(scene: &AnalyticScene, pose: &Pose, intr: &Intrinsics) -> Frame {
    dtsdf::synthetic::oracle_render(scene, pose, intr)
        .to_frame(0.0, intr, &FrameOptions::default())
        .unwrap()
}

fn criterion_9() -> Outcome {
    let intr = qvga();
    let mut ok = true;
    let mut notes = Vec::new();
    let wall = Primitive::Plane {
        point: [0.0, 0.0, 1.5],
        normal: [0.0, 0.0, -1.0],
        extent: None,
        color: [0.5; 3],
    };
    let blob = Primitive::Sphere {
        center: [0.0, 0.0, 1.0],
        radius: 0.1,
        color: [1.0, 0.0, 0.0],
    };
    let with_blob = AnalyticScene {
        primitives: vec![wall.clone(), blob],
        noise: None,
    };
    let empty = AnalyticScene {
        primitives: vec![wall],
        noise: None,
    };
    for mode in [Mode::Directional, Mode::Regular] {
        let mut store = VoxelStore::new(dtsdf::StoreParams::new(mode, 0.01)).unwrap();
        let fp = FusionParams::for_store(&store);
        let tau = store.truncation();
        integrate(
            &mut store,
            &frame_of(&with_blob, &Pose::identity(), &intr),
            &Pose::identity(),
            &intr,
            &fp,
        )
        .unwrap();
        // blob blocks lie entirely more than 2 tau in front of the wall
        let vs = store.voxel_size();
        let is_blob_block = |p: &BlockPos| ((p.z + 1) * 8) as f64 * vs < 1.5 - 2.0 * tau;
        let blob_blocks = store.block_positions().iter().filter(|p| is_blob_block(p)).count();
        for k in 0..30 {
            // small sideways motion, the blob stays inside the view
            let pose = Pose::from_translation(Vec3::new(0.002 * k as f64, 0.0, 0.0));
            integrate(&mut store, &frame_of(&empty, &pose, &intr), &pose, &intr, &fp).unwrap();
        }
        let mut min_sdf = f32::INFINITY;
        for b in store.blocks() {
            if is_blob_block(&b.key.pos) {
                for v in b.voxels.iter().filter(|v| v.is_observed()) {
                    min_sdf = min_sdf.min(v.sdf);
                }
            }
        }
        let recycled = store.recycle_free_blocks();
        let left = store.block_positions().iter().filter(|p| is_blob_block(p)).count();
        ok &= blob_blocks > 0 && min_sdf > 0.9 && left == 0;
        notes.push(format!(
            "{mode}: {blob_blocks} blob blocks, min sdf {min_sdf:.3} > 0.9, {recycled} recycled, {left} left"
        ));
    }

    // edge guard: voxels just beyond a near wall's edge, observed from the
    // side, project onto the deeper surface from the front camera
    let scene = AnalyticScene {
        primitives: vec![
            Primitive::Box {
                min: [-1.0, -1.0, 1.0],
                max: [0.0, 1.0, 1.02],
                color: [0.5; 3],
                face_colors: None,
            },
            Primitive::Plane {
                point: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                extent: None,
                color: [0.5; 3],
            },
        ],
        noise: None,
    };
    let side = Pose::from_translation(Vec3::new(0.3, 0.0, 0.0));
    let front = Pose::identity();
    let run = |radius: usize| {
        let mut store = VoxelStore::new(dtsdf::StoreParams::new(Mode::Regular, 0.01)).unwrap();
        let mut fp = FusionParams::for_store(&store);
        integrate(&mut store, &frame_of(&scene, &side, &intr), &side, &intr, &fp).unwrap();
        fp.carve_guard_radius = radius;
        let front_frame = frame_of(&scene, &front, &intr);
        store
            .allocate_for_frame(&front_frame, &front, fp.max_integration_distance)
            .unwrap();
        // observed near-surface voxels beyond the edge whose front pixel sees
        // the far plane within 2 px of the near wall
        let edge_u = intr.project(&Vec3::new(0.0, 0.0, 1.0)).0;
        let mut edge = Vec::new();
        for b in store.blocks() {
            for (o, v) in b.voxels.iter().enumerate() {
                let idx = b.key.pos.voxel(dtsdf::voxel::local_from_offset(o));
                let x = store.voxel_center(idx);
                if !v.is_observed() || x.x <= 0.0 || (x.z - 1.0).abs() > store.truncation() || x.y.abs() > 0.3 {
                    continue;
                }
                let Some((u, vv)) = intr.project_to_pixel(&x) else {
                    continue;
                };
                if *front_frame.depth.get(u, vv) > 1.9 && (u as f64) - edge_u <= 2.0 {
                    edge.push((idx, v.weight));
                }
            }
        }
        for _ in 0..5 {
            fuse_frame(&mut store, &front_frame, &front, &intr, &fp).unwrap();
        }
        let changed = edge
            .iter()
            .filter(|(idx, w)| store.voxel(Direction::Undirected, *idx).unwrap().weight != *w)
            .count();
        (edge.len(), changed)
    };
    let (n_guarded, changed_guarded) = run(2);
    let (n_open, changed_open) = run(0);
    ok &= n_guarded > 0 && changed_guarded == 0 && changed_open > 0 && n_open == n_guarded;
    notes.push(format!(
        "edge guard: {changed_guarded}/{n_guarded} edge voxels changed with guard, {changed_open}/{n_open} without"
    ));
    check(ok, notes.join("; "))
}

fn criterion_10() -> Outcome {
    let mut seq = box_orbit(20, 0.6, 0.8);
    seq.scene.noise = Some(dtsdf::synthetic::NoiseModel {
        sigma0: 0.001,
        sigma1: 0.0015,
    });
    seq.seed = 7;
    let run = || {
        let cfg = RunConfig {
            seed: 7,
            ..config(Mode::Directional, 0.02, TrackingMode::Icp)
        };
        let mut store = VoxelStore::new(cfg.store_params()).unwrap();
        let out = run_pipeline(&mut store, &seq, &cfg).unwrap();
        assert!(out.stats.iter().all(|s| s.status == FrameStatus::Fused));
        let mut snapshot = Vec::new();
        store.write_snapshot(&mut snapshot).unwrap();
        let report = mae(&store, &seq, &out.trajectory.poses(), None);
        let rpe_report = rpe(&out.trajectory, &seq.trajectory, 10).unwrap();
        (
            out.trajectory.to_tum_string(),
            snapshot,
            out.stats_csv(),
            report.to_csv() + &report.summary_json().to_string(),
            rpe_report.translation.to_csv(),
        )
    };
    let a = run();
    let b = run();
    check(
        a == b,
        format!(
            "trajectory {}, snapshot {} ({} bytes), stats {}, MAE report {}, RPE report {}",
            a.0 == b.0,
            a.1 == b.1,
            a.1.len(),
            a.2 == b.2,
            a.3 == b.3,
            a.4 == b.4
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("thin-structure reusability", criterion_1),
        ("color bleeding", criterion_2),
        ("mode equivalence on one-sided scenes", criterion_3),
        ("tracking fixed point and recovery", criterion_4),
        ("conditional combination", criterion_5),
        ("weight functions", criterion_6),
        ("raycast vs marching oracle", criterion_7),
        ("memory ratio bound", criterion_8),
        ("carving", criterion_9),
        ("determinism", criterion_10),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let n = k + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
