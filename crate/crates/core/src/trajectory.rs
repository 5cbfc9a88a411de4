//! Timestamped pose sequences and the TUM trajectory text format.

use std::fmt::Write as _;
use std::path::Path;

use crate::camera::{Pose, Vec3};
use crate::error::{Error, Result};

/// Quaternions further than this from unit norm are rejected on read;
/// closer ones are renormalized (TUM files carry 4 decimals).
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(f64, Pose)>) -> Result<Self> {
        for (k, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Input(format!(
                    "trajectory timestamps not strictly increasing at entry {}",
                    k + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if !(timestamp > last) {
                return Err(Error::Input(format!("timestamp {timestamp} does not follow {last}")));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.entries.iter().map(|e| e.1).collect()
    }

    /// Left-multiplies every pose by `g`.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, *g * *p)).collect(),
        }
    }

    /// Index pairs (self, other) of nearest timestamps within `max_dt`, each
    /// entry used at most once.
    pub fn associate(&self, other: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
        let mut pairs = crate::dataset::associate_timestamps(&self.timestamps(), &other.timestamps(), max_dt);
        pairs.sort_unstable();
        pairs
    }

    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.entries {
            let q = p.quaternion();
            let c = p.translation;
            writeln!(
                out,
                "{t:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                c.x, c.y, c.z, q[0], q[1], q[2], q[3]
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_tum(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
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
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            let q = [vals[4], vals[5], vals[6], vals[7]];
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
                return Err(err(format!("quaternion norm {norm} is not unit")));
            }
            if let Some(&(last, _)) = entries.last() {
                if !(vals[0] > last) {
                    return Err(err(format!("timestamp {} does not follow {last}", vals[0])));
                }
            }
            let pose = Pose::from_quaternion(Vec3::new(vals[1], vals[2], vals[3]), q);
            entries.push((vals[0], pose));
        }
        Ok(Self { entries })
    }

    pub fn read_tum(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tum(&text, path)
    }
}
