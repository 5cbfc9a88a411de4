//! TUM RGB-D sequence directories: stream lists, timestamp association and
//! frame loading.

use std::path::{Path, PathBuf};

use crate::camera::{Frame, FrameOptions, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::imageio::{read_color, read_depth_png};
use crate::trajectory::Trajectory;

pub const DEFAULT_MAX_DT: f64 = 0.02;
pub const INTRINSICS_FILE: &str = "intrinsics.json";

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEntry {
    pub timestamp: f64,
    /// Path relative to the sequence root.
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub depth: Vec<StreamEntry>,
    pub color: Vec<StreamEntry>,
    /// `None` when the sequence has no ground-truth file.
    pub ground_truth: Option<Trajectory>,
    pub intrinsics: Intrinsics,
}

impl SequenceManifest {
    pub fn depth_scale(&self) -> f64 {
        self.intrinsics.depth_scale
    }
}

/// One associated measurement: indices into the manifest streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedFrame {
    pub depth: usize,
    pub color: Option<usize>,
    pub ground_truth: Option<usize>,
}

/// Parses a "timestamp path" list; '#' lines are comments.
pub fn parse_stream(text: &str, path: &Path) -> Result<Vec<StreamEntry>> {
    let mut out: Vec<StreamEntry> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            reason,
        };
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(file), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected \"timestamp path\"".into()));
        };
        let timestamp: f64 = ts.parse().map_err(|_| err(format!("bad timestamp {ts:?}")))?;
        if !timestamp.is_finite() {
            return Err(err("non-finite timestamp".into()));
        }
        if let Some(last) = out.last() {
            if !(timestamp > last.timestamp) {
                return Err(err(format!("timestamp {timestamp} does not follow {}", last.timestamp)));
            }
        }
        out.push(StreamEntry {
            timestamp,
            path: PathBuf::from(file),
        });
    }
    Ok(out)
}

fn read_stream(path: &Path) -> Result<Vec<StreamEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_stream(&text, path)
}

/// Reads and validates an intrinsics JSON file.
pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let intr: Intrinsics = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    intr.validate()?;
    Ok(intr)
}

/// Reads `depth.txt` and, if present, `rgb.txt`, `groundtruth.txt` and
/// `intrinsics.json`. Without an intrinsics file the TUM default camera is
/// assumed.
pub fn load_sequence(root: &Path) -> Result<SequenceManifest> {
    let depth_list = root.join("depth.txt");
    if !depth_list.is_file() {
        return Err(Error::Input(format!("{} not found", depth_list.display())));
    }
    let depth = read_stream(&depth_list)?;
    let rgb = root.join("rgb.txt");
    let color = if rgb.is_file() { read_stream(&rgb)? } else { Vec::new() };
    let gt = root.join("groundtruth.txt");
    let ground_truth = if gt.is_file() {
        Some(Trajectory::read_tum(&gt)?)
    } else {
        None
    };
    let intr_path = root.join(INTRINSICS_FILE);
    let intrinsics = if intr_path.is_file() {
        load_intrinsics(&intr_path)?
    } else {
        Intrinsics::tum_default()
    };
    Ok(SequenceManifest {
        root: root.to_path_buf(),
        depth,
        color,
        ground_truth,
        intrinsics,
    })
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_dt` are
/// taken in order of increasing time difference, each entry at most once.
pub fn associate_timestamps(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut start = 0;
    for (i, &ta) in a.iter().enumerate() {
        while start < b.len() && b[start] < ta - max_dt {
            start += 1;
        }
        for (j, &tb) in b.iter().enumerate().skip(start) {
            if tb > ta + max_dt {
                break;
            }
            candidates.push(((ta - tb).abs(), i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

/// Associates depth with color and ground truth. Depth entries lacking a
/// match in a non-empty stream are dropped.
pub fn associate(depth: &[StreamEntry], color: &[StreamEntry], gt: &[f64], max_dt: f64) -> Vec<MatchedFrame> {
    let dts: Vec<f64> = depth.iter().map(|e| e.timestamp).collect();
    let cts: Vec<f64> = color.iter().map(|e| e.timestamp).collect();
    let mut color_of = vec![None; depth.len()];
    for (i, j) in associate_timestamps(&dts, &cts, max_dt) {
        color_of[i] = Some(j);
    }
    let mut gt_of = vec![None; depth.len()];
    for (i, j) in associate_timestamps(&dts, gt, max_dt) {
        gt_of[i] = Some(j);
    }
    (0..depth.len())
        .filter(|&i| (color.is_empty() || color_of[i].is_some()) && (gt.is_empty() || gt_of[i].is_some()))
        .map(|i| MatchedFrame {
            depth: i,
            color: color_of[i],
            ground_truth: gt_of[i],
        })
        .collect()
}

/// Associated frames of a sequence with file loading.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub manifest: SequenceManifest,
    pub frames: Vec<MatchedFrame>,
}

impl Sequence {
    pub fn open(root: &Path, max_dt: f64) -> Result<Self> {
        if !(max_dt > 0.0) {
            return Err(Error::param("max_dt", "must be positive"));
        }
        let manifest = load_sequence(root)?;
        let gt_ts = manifest
            .ground_truth
            .as_ref()
            .map(|t| t.timestamps())
            .unwrap_or_default();
        let frames = associate(&manifest.depth, &manifest.color, &gt_ts, max_dt);
        Ok(Self { manifest, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        self.manifest.depth[self.frames[k].depth].timestamp
    }

    pub fn ground_truth_pose(&self, k: usize) -> Option<Pose> {
        let j = self.frames[k].ground_truth?;
        self.manifest.ground_truth.as_ref().map(|t| t.entries()[j].1)
    }

    /// Ground truth restricted to the associated frames, stamped with depth
    /// timestamps.
    pub fn ground_truth(&self) -> Option<Trajectory> {
        let entries: Option<Vec<(f64, Pose)>> = (0..self.len())
            .map(|k| self.ground_truth_pose(k).map(|p| (self.timestamp(k), p)))
            .collect();
        entries.and_then(|e| Trajectory::from_entries(e).ok())
    }

    pub fn load_frame(&self, k: usize, opts: &FrameOptions) -> Result<Frame> {
        let m = &self.frames[k];
        let root = &self.manifest.root;
        let depth = read_depth_png(
            &root.join(&self.manifest.depth[m.depth].path),
            self.manifest.depth_scale(),
        )?;
        let color = match m.color {
            Some(j) => Some(read_color(&root.join(&self.manifest.color[j].path))?),
            None => None,
        };
        Frame::new(self.timestamp(k), depth, color, &self.manifest.intrinsics, opts)
    }
}
