//! Timestamped pose sequences and the TUM text format.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::se3::{self, Pose};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("stamps must be strictly increasing (entry {0})")]
    NonMonotonic(usize),
    #[error("entry {0} has an invalid pose")]
    InvalidPose(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, TrajectoryError> {
        for (i, (s, p)) in entries.iter().enumerate() {
            if !se3::is_valid(p) || !s.is_finite() {
                return Err(TrajectoryError::InvalidPose(i));
            }
            if i > 0 && !(entries[i - 1].0 < *s) {
                return Err(TrajectoryError::NonMonotonic(i));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.entries.iter().map(|e| &e.1)
    }

    /// Total translational path length.
    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].1.translation.vector - w[0].1.translation.vector).norm())
            .sum()
    }

    /// Index of the entry with the nearest stamp, if within `tolerance`.
    pub fn nearest(&self, stamp: f64, tolerance: f64) -> Option<usize> {
        let i = self.entries.partition_point(|e| e.0 < stamp);
        let mut best: Option<(usize, f64)> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(e) = self.entries.get(j) {
                let d = (e.0 - stamp).abs();
                if d <= tolerance && best.map_or(true, |b| d < b.1) {
                    best = Some((j, d));
                }
            }
        }
        best.map(|b| b.0)
    }

    /// Applies `g * pose` to every entry.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self { entries: self.entries.iter().map(|(s, p)| (*s, g * p)).collect() }
    }
}

/// Writes `stamp tx ty tz qx qy qz qw` lines.
pub fn write_tum<W: Write>(traj: &Trajectory, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# stamp tx ty tz qx qy qz qw")?;
    for (s, p) in traj.entries() {
        let a = se3::to_array7(p);
        writeln!(w, "{} {} {} {} {} {} {} {}", s, a[0], a[1], a[2], a[3], a[4], a[5], a[6])?;
    }
    Ok(())
}

pub fn read_tum<R: BufRead>(r: R) -> Result<Trajectory, TrajectoryError> {
    let mut entries = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let perr = |msg: String| TrajectoryError::Parse { line: k + 1, msg };
        let v: Vec<f64> = t
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| perr(format!("bad number `{x}`"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(perr(format!("expected 8 fields, got {}", v.len())));
        }
        let pose = se3::from_array7(&[v[1], v[2], v[3], v[4], v[5], v[6], v[7]])
            .ok_or_else(|| perr("invalid pose".into()))?;
        entries.push((v[0], pose));
    }
    Trajectory::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_and_lookup() {
        let p = Pose::identity();
        assert!(matches!(Trajectory::new(vec![(0.0, p), (0.0, p)]), Err(TrajectoryError::NonMonotonic(1))));
        let t = Trajectory::new(vec![(0.0, p), (0.1, se3::from_xyz_yaw(1.0, 0.0, 0.0, 0.0)), (0.2, p)]).unwrap();
        assert_eq!(t.path_length(), 2.0);
        assert_eq!(t.nearest(0.11, 0.02), Some(1));
        assert_eq!(t.nearest(0.15, 0.02), None);
        assert_eq!(t.nearest(-0.01, 0.02), Some(0));
    }

    #[test]
    fn tum_round_trip() {
        let t = Trajectory::new(vec![
            (0.5, se3::from_xyz_yaw(1.25, -2.0, 0.3, 0.7)),
            (1.0, se3::from_xyz_yaw(0.1, 0.2, 0.3, -2.0)),
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_tum(&t, &mut buf).unwrap();
        let back = read_tum(&buf[..]).unwrap();
        assert_eq!(back, t);
        assert!(read_tum(&b"0 1 2 3\n"[..]).is_err());
    }
}
