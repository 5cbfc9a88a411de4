//! Analytic primitive scenes with exact depth/color rendering, camera
//! trajectories, and materialization as TUM sequence directories.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{ColorImage, DepthImage, Frame, FrameOptions, Image, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::imageio::{write_color, write_depth_png};
use crate::trajectory::Trajectory;

pub const FRAME_RATE: f64 = 30.0;

/// Rays closer than this are ignored, so a surface never occludes itself.
const MIN_T: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane, or a square of half-size `extent` around `point`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        extent: Option<f64>,
        color: [f32; 3],
    },
    /// Axis-aligned box, visible from outside and from inside. Face colors
    /// are ordered -x, +x, -y, +y, -z, +z.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        color: [f32; 3],
        #[serde(default)]
        face_colors: Option<[[f32; 3]; 6]>,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        color: [f32; 3],
    },
    /// Thin oriented plate. The front face looks along `normal`; `up` fixes
    /// the in-plane orientation of the rectangle.
    Slab {
        center: [f64; 3],
        normal: [f64; 3],
        up: [f64; 3],
        thickness: f64,
        half_width: f64,
        half_height: f64,
        front_color: [f32; 3],
        back_color: [f32; 3],
    },
}

/// Face labels of slab hits.
pub const SLAB_FRONT: u8 = 0;
pub const SLAB_BACK: u8 = 1;
pub const SLAB_SIDE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays with unit z in the camera frame.
    pub t: f64,
    pub primitive: usize,
    pub face: u8,
    pub color: [f32; 3],
    /// Outward surface normal, world frame.
    pub normal: Vec3,
}

fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&a).normalize();
    (u, n.cross(&u))
}

fn check_color(c: &[f32; 3], name: &'static str) -> Result<()> {
    if c.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::param(name, "color channels must lie in [0, 1]"))
    }
}

/// Slab-method intersection of a ray with a box given in local coordinates.
/// Returns (t, axis, side) of the nearest positive crossing, entering or
/// leaving.
fn box_local(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, usize, bool)> {
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut near_face, mut far_face) = ((0, false), (0, false));
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let t1 = (lo[a] - o[a]) / d[a];
        let t2 = (hi[a] - o[a]) / d[a];
        // entering through the low face when moving in +a
        let (tn, tf, enter_hi) = if t1 < t2 { (t1, t2, false) } else { (t2, t1, true) };
        if tn > t_near {
            t_near = tn;
            near_face = (a, enter_hi);
        }
        if tf < t_far {
            t_far = tf;
            far_face = (a, !enter_hi);
        }
    }
    if t_near > t_far {
        return None;
    }
    if t_near > MIN_T {
        Some((t_near, near_face.0, near_face.1))
    } else if t_far > MIN_T {
        Some((t_far, far_face.0, far_face.1))
    } else {
        None
    }
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        match self {
            Primitive::Plane {
                normal, extent, color, ..
            } => {
                if v3(normal).norm() < 1e-12 {
                    return Err(Error::param("plane.normal", "must be nonzero"));
                }
                if extent.is_some_and(|e| !(e > 0.0)) {
                    return Err(Error::param("plane.extent", "must be positive"));
                }
                check_color(color, "plane.color")
            }
            Primitive::Box {
                min,
                max,
                color,
                face_colors,
            } => {
                if (0..3).any(|a| !(max[a] > min[a])) {
                    return Err(Error::param("box.max", "must exceed min on every axis"));
                }
                for c in face_colors.iter().flatten() {
                    check_color(c, "box.face_colors")?;
                }
                check_color(color, "box.color")
            }
            Primitive::Sphere { radius, color, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::param("sphere.radius", "must be positive"));
                }
                check_color(color, "sphere.color")
            }
            Primitive::Slab {
                normal,
                up,
                thickness,
                half_width,
                half_height,
                front_color,
                back_color,
                ..
            } => {
                let (n, u) = (v3(normal), v3(up));
                if n.norm() < 1e-12 || n.normalize().cross(&u).norm() < 1e-9 {
                    return Err(Error::param(
                        "slab.up",
                        "must be nonzero and not parallel to the normal",
                    ));
                }
                if !(*thickness > 0.0) {
                    return Err(Error::param("slab.thickness", "must be positive"));
                }
                if !(*half_width > 0.0 && *half_height > 0.0) {
                    return Err(Error::param("slab.half_width", "extents must be positive"));
                }
                check_color(front_color, "slab.front_color")?;
                check_color(back_color, "slab.back_color")
            }
        }
    }

    /// Nearest intersection with `t > 0` along `o + t d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, u8, [f32; 3], Vec3)> {
        match self {
            Primitive::Plane {
                point,
                normal,
                extent,
                color,
            } => {
                let n = v3(normal).normalize();
                let denom = n.dot(d);
                if denom.abs() < 1e-300 {
                    return None;
                }
                let p0 = v3(point);
                let t = n.dot(&(p0 - o)) / denom;
                if t <= MIN_T {
                    return None;
                }
                if let Some(e) = extent {
                    let (u, v) = orthonormal_basis(&n);
                    let rel = o + d * t - p0;
                    if rel.dot(&u).abs() > *e || rel.dot(&v).abs() > *e {
                        return None;
                    }
                }
                let facing = if denom < 0.0 { n } else { -n };
                Some((t, 0, *color, facing))
            }
            Primitive::Box {
                min,
                max,
                color,
                face_colors,
            } => {
                let (t, axis, hi) = box_local(o, d, &v3(min), &v3(max))?;
                let face = (2 * axis + hi as usize) as u8;
                let mut normal = Vec3::zeros();
                normal[axis] = if hi { 1.0 } else { -1.0 };
                let c = face_colors.map(|f| f[face as usize]).unwrap_or(*color);
                Some((t, face, c, normal))
            }
            Primitive::Sphere { center, radius, color } => {
                let c = v3(center);
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let disc = b * b - a * (oc.dot(&oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > MIN_T)?;
                Some((t, 0, *color, (o + d * t - c).normalize()))
            }
            Primitive::Slab {
                center,
                normal,
                up,
                thickness,
                half_width,
                half_height,
                front_color,
                back_color,
            } => {
                let n = v3(normal).normalize();
                let u = v3(up).cross(&n).normalize();
                let v = n.cross(&u);
                let rel = o - v3(center);
                let lo_ = Vec3::new(-0.5 * thickness, -half_width, -half_height);
                let local_o = Vec3::new(rel.dot(&n), rel.dot(&u), rel.dot(&v));
                let local_d = Vec3::new(d.dot(&n), d.dot(&u), d.dot(&v));
                let (t, axis, hi) = box_local(&local_o, &local_d, &lo_, &-lo_)?;
                let sign = if hi { 1.0 } else { -1.0 };
                let (face, color, normal) = match axis {
                    0 if hi => (SLAB_FRONT, *front_color, n),
                    0 => (SLAB_BACK, *back_color, -n),
                    1 => (SLAB_SIDE, *front_color, u * sign),
                    _ => (SLAB_SIDE, *front_color, v * sign),
                };
                Some((t, face, color, normal))
            }
        }
    }
}

/// Depth noise with standard deviation `sigma0 + sigma1 * z^2` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma0: f64,
    pub sigma1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub noise: Option<NoiseModel>,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if let Some(n) = &self.noise {
            if !(n.sigma0 >= 0.0 && n.sigma1 >= 0.0) {
                return Err(Error::param("noise", "sigmas must be non-negative"));
            }
        }
        Ok(())
    }

    /// Nearest hit over all primitives; ties go to the lower index.
    pub fn cast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (k, p) in self.primitives.iter().enumerate() {
            if let Some((t, face, color, normal)) = p.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        primitive: k,
                        face,
                        color,
                        normal,
                    });
                }
            }
        }
        best
    }
}

/// Exact noise-free view of a scene.
#[derive(Debug, Clone)]
pub struct OracleView {
    pub depth: DepthImage,
    pub color: ColorImage,
    /// (primitive, face) of each hit pixel.
    pub labels: Image<Option<(usize, u8)>>,
}

impl OracleView {
    pub fn to_frame(&self, timestamp: f64, intr: &Intrinsics, opts: &FrameOptions) -> Result<Frame> {
        Frame::new(timestamp, self.depth.clone(), Some(self.color.clone()), intr, opts)
    }
}

pub fn oracle_render(scene: &AnalyticScene, pose: &Pose, intr: &Intrinsics) -> OracleView {
    let o = pose.center();
    let hits = Image::from_fn(intr.width, intr.height, |u, v| {
        // unit z in the camera frame, so t is the depth
        let d = pose.transform_vector(&intr.unproject(u as f64, v as f64, 1.0));
        scene.cast(&o, &d)
    });
    OracleView {
        depth: hits.map(|h| h.map(|h| h.t).unwrap_or(0.0)),
        color: hits.map(|h| h.map(|h| h.color).unwrap_or([0.0; 3])),
        labels: hits.map(|h| h.map(|h| (h.primitive, h.face))),
    }
}

/// Adds zero-mean Gaussian noise to valid depths; pixels pushed to z <= 0
/// become invalid.
pub fn apply_noise(depth: &DepthImage, model: &NoiseModel, rng: &mut ChaCha8Rng) -> DepthImage {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let data = depth
        .data()
        .iter()
        .map(|&z| {
            if z <= 0.0 {
                return 0.0;
            }
            let s = model.sigma0 + model.sigma1 * z * z;
            (z + s * std.sample(rng)).max(0.0)
        })
        .collect();
    Image::from_vec(depth.width(), depth.height(), data).expect("same dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub n_frames: usize,
    /// Rotation axis, also the camera's up direction.
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    /// Camera offset along the axis.
    #[serde(default)]
    pub height: f64,
    /// Swept angle; a full turn by default.
    #[serde(default = "default_arc")]
    pub arc: f64,
    #[serde(default)]
    pub start_angle: f64,
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_arc() -> f64 {
    TAU
}

impl OrbitSpec {
    pub fn new(center: Vec3, radius: f64, n_frames: usize) -> Self {
        Self {
            center: center.into(),
            radius,
            n_frames,
            axis: default_axis(),
            height: 0.0,
            arc: TAU,
            start_angle: 0.0,
        }
    }
}

/// Camera positions on a circle around the axis, looking at the center, with
/// angular spacing `arc / n_frames` and 30 Hz timestamps.
pub fn orbit_trajectory(spec: &OrbitSpec) -> Result<Trajectory> {
    if !(spec.radius > 0.0) {
        return Err(Error::param("orbit.radius", "must be positive"));
    }
    if spec.n_frames < 2 {
        return Err(Error::param("orbit.n_frames", "need at least 2 frames"));
    }
    let axis = v3(&spec.axis);
    if axis.norm() < 1e-12 {
        return Err(Error::param("orbit.axis", "must be nonzero"));
    }
    let axis = axis.normalize();
    let (e1, e2) = if (axis - Vec3::z()).norm() < 1e-12 {
        (Vec3::x(), Vec3::y())
    } else {
        let (a, b) = orthonormal_basis(&axis);
        (a, b)
    };
    let c = v3(&spec.center);
    let mut traj = Trajectory::new();
    for k in 0..spec.n_frames {
        let phi = spec.start_angle + spec.arc * k as f64 / spec.n_frames as f64;
        let eye = c + spec.radius * (phi.cos() * e1 + phi.sin() * e2) + spec.height * axis;
        traj.push(k as f64 / FRAME_RATE, Pose::look_at(eye, c, axis))?;
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub target: [f64; 3],
    pub n_frames: usize,
    #[serde(default = "default_axis")]
    pub up: [f64; 3],
}

/// Camera moving from `start` to `end` in equal steps while looking at `target`.
pub fn linear_trajectory(spec: &LinearSpec) -> Result<Trajectory> {
    if spec.n_frames < 2 {
        return Err(Error::param("linear.n_frames", "need at least 2 frames"));
    }
    let (a, b) = (v3(&spec.start), v3(&spec.end));
    let mut traj = Trajectory::new();
    for k in 0..spec.n_frames {
        let eye = a + (b - a) * (k as f64 / (spec.n_frames - 1) as f64);
        traj.push(
            k as f64 / FRAME_RATE,
            Pose::look_at(eye, v3(&spec.target), v3(&spec.up)),
        )?;
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    Orbit(OrbitSpec),
    Linear(LinearSpec),
    /// Explicit TUM trajectory file.
    File {
        path: std::path::PathBuf,
    },
}

impl TrajectorySpec {
    pub fn build(&self) -> Result<Trajectory> {
        match self {
            TrajectorySpec::Orbit(o) => orbit_trajectory(o),
            TrajectorySpec::Linear(l) => linear_trajectory(l),
            TrajectorySpec::File { path } => Trajectory::read_tum(path),
        }
    }
}

/// Scene file of the `synth` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub scene: AnalyticScene,
    pub trajectory: TrajectorySpec,
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.scene.validate()?;
        spec.intrinsics.validate()?;
        Ok(spec)
    }
}

/// One rendered frame of a synthetic sequence.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub timestamp: f64,
    pub pose: Pose,
    pub view: OracleView,
}

/// Renders every pose of `traj`, adding seeded noise if the scene has a model.
pub fn render_sequence(scene: &AnalyticScene, traj: &Trajectory, intr: &Intrinsics, seed: u64) -> Vec<SyntheticFrame> {
    let seq = SyntheticSequence {
        scene: scene.clone(),
        trajectory: traj.clone(),
        intrinsics: *intr,
        seed,
    };
    (0..seq.len()).map(|k| seq.frame(k)).collect()
}

/// In-memory synthetic sequence rendered on demand. Frame `k` draws its
/// noise from stream `k` of the seeded generator, so frames are independent
/// of access order.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scene: AnalyticScene,
    pub trajectory: Trajectory,
    pub intrinsics: Intrinsics,
    pub seed: u64,
}

impl SyntheticSequence {
    pub fn from_spec(spec: &SynthSpec) -> Result<Self> {
        spec.scene.validate()?;
        spec.intrinsics.validate()?;
        Ok(Self {
            scene: spec.scene.clone(),
            trajectory: spec.trajectory.build()?,
            intrinsics: spec.intrinsics,
            seed: spec.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn frame(&self, k: usize) -> SyntheticFrame {
        let (timestamp, pose) = self.trajectory.entries()[k];
        let mut view = oracle_render(&self.scene, &pose, &self.intrinsics);
        if let Some(noise) = &self.scene.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(k as u64);
            view.depth = apply_noise(&view.depth, noise, &mut rng);
        }
        SyntheticFrame { timestamp, pose, view }
    }
}

/// Writes a TUM-layout directory: depth/ and rgb/ PNGs, their lists, ground
/// truth and intrinsics.json.
pub fn synthesize(spec: &SynthSpec, out: &Path) -> Result<usize> {
    let seq = SyntheticSequence::from_spec(spec)?;
    for sub in ["depth", "rgb"] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut depth_list = String::from("# depth maps\n");
    let mut rgb_list = String::from("# color images\n");
    let units = 1.0 / spec.intrinsics.depth_scale;
    for k in 0..seq.len() {
        let f = seq.frame(k);
        let name = format!("{:.6}.png", f.timestamp);
        write_depth_png(&out.join("depth").join(&name), &f.view.depth, units)?;
        write_color(&out.join("rgb").join(&name), &f.view.color)?;
        depth_list.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
        rgb_list.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
    }
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("depth.txt", depth_list)?;
    write("rgb.txt", rgb_list)?;
    write(
        "groundtruth.txt",
        format!("# timestamp tx ty tz qx qy qz qw\n{}", seq.trajectory.to_tum_string()),
    )?;
    write(
        crate::dataset::INTRINSICS_FILE,
        serde_json::to_string_pretty(&spec.intrinsics).expect("serializable"),
    )?;
    Ok(seq.len())
}

/// A thin plate standing on a ground plane (world z up). The plate's front
/// faces +x and its center sits `offset` off the voxel grid planes.
pub fn thin_wall_scene(thickness: f64, front_color: [f32; 3], back_color: [f32; 3]) -> AnalyticScene {
    AnalyticScene {
        primitives: vec![
            Primitive::Slab {
                center: [0.0, 0.0, 0.3],
                normal: [1.0, 0.0, 0.0],
                up: [0.0, 0.0, 1.0],
                thickness,
                half_width: 0.3,
                half_height: 0.25,
                front_color,
                back_color,
            },
            Primitive::Plane {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, 1.0],
                extent: Some(1.0),
                color: [0.5, 0.5, 0.5],
            },
        ],
        noise: None,
    }
}

/// Inside of a box-shaped room with distinct wall colors.
pub fn room_scene(half_size: f64, height: f64) -> AnalyticScene {
    AnalyticScene {
        primitives: vec![Primitive::Box {
            min: [-half_size, -half_size, 0.0],
            max: [half_size, half_size, height],
            color: [0.6, 0.6, 0.6],
            face_colors: Some([
                [0.8, 0.2, 0.2],
                [0.2, 0.8, 0.2],
                [0.2, 0.2, 0.8],
                [0.8, 0.8, 0.2],
                [0.5, 0.5, 0.5],
                [0.9, 0.9, 0.9],
            ]),
        }],
        noise: None,
    }
}

/// A box standing on a ground plane, for tracking experiments.
pub fn box_on_plane_scene() -> AnalyticScene {
    AnalyticScene {
        primitives: vec![
            Primitive::Box {
                min: [-0.15, -0.1, 0.0],
                max: [0.15, 0.1, 0.25],
                color: [0.7, 0.3, 0.2],
                face_colors: None,
            },
            Primitive::Sphere {
                center: [0.25, 0.2, 0.1],
                radius: 0.1,
                color: [0.2, 0.6, 0.3],
            },
            Primitive::Plane {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, 1.0],
                extent: Some(1.5),
                color: [0.5, 0.5, 0.5],
            },
        ],
        noise: None,
    }
}

/// Angle of the camera's viewing direction around the world z axis.
pub fn heading(pose: &Pose) -> f64 {
    let z = pose.rotation.column(2);
    z.y.atan2(z.x).rem_euclid(2.0 * PI)
}
