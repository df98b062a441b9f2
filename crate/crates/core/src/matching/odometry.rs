//! Sequence odometry, trajectory metrics and voxel downsampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{gicp_align, icp_point2plane, icp_point2point, MatchOptions, MatchResult};
use crate::error::{Error, Result};
use crate::estimators::{normal_from_covariance, pca_covariance};
use crate::manifold::{rotation_distance, Covariance3, PointCloud, PoseSE3, Vec3};

/// Ordered `(timestamp, pose)` samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, PoseSE3)>) -> Result<Self> {
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput("trajectory timestamps must increase strictly".into()));
        }
        Ok(Trajectory { samples })
    }

    /// Poses indexed `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<PoseSE3>) -> Self {
        Trajectory { samples: poses.into_iter().enumerate().map(|(i, p)| (i as f64, p)).collect() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &PoseSE3> {
        self.samples.iter().map(|(_, p)| p)
    }

    /// Applies `left * T_i` to every pose.
    pub fn transformed(&self, left: &PoseSE3) -> Trajectory {
        Trajectory { samples: self.samples.iter().map(|(t, p)| (*t, left.compose(p))).collect() }
    }

    /// One line per pose: `timestamp tx ty tz r00 r01 r02 r10 ... r22`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, p) in &self.samples {
            write!(out, "{t} {} {} {}", p.translation.x, p.translation.y, p.translation.z).unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    write!(out, " {}", p.rotation[(r, c)]).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let vals: Vec<f64> = trimmed
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse { offset, message: e.to_string() })?;
                if vals.len() != 13 {
                    return Err(Error::Parse {
                        offset,
                        message: format!("expected 13 values per pose line, found {}", vals.len()),
                    });
                }
                let t = Vec3::new(vals[1], vals[2], vals[3]);
                let r = crate::manifold::Mat3::from_row_slice(&vals[4..13]);
                samples.push((vals[0], PoseSE3 { rotation: r, translation: t }));
            }
            offset += line.len();
        }
        Trajectory::new(samples)
    }
}

/// Scan matcher used by [`odometry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    PointToPoint,
    PointToPlane,
    Gicp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryOptions {
    pub matcher: Matcher,
    pub matching: MatchOptions,
    /// Neighborhood size for PCA covariances when none are supplied.
    pub pca_neighbors: usize,
}

impl Default for OdometryOptions {
    fn default() -> Self {
        OdometryOptions { matcher: Matcher::Gicp, matching: MatchOptions::default(), pca_neighbors: 24 }
    }
}

/// Chains pairwise alignments of consecutive scans. Scan `k + 1` is
/// registered onto scan `k`, starting from the previous relative motion.
/// Failures return [`Error::Odometry`] carrying the poses found so far.
pub fn odometry(
    scans: &[PointCloud],
    covs: Option<&[Vec<Covariance3>]>,
    options: &OdometryOptions,
) -> Result<Trajectory> {
    if scans.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: scans.len() });
    }
    if let Some(c) = covs {
        if c.len() != scans.len() {
            return Err(Error::InvalidInput("one covariance list per scan is required".into()));
        }
    }
    let needs_covs = options.matcher != Matcher::PointToPoint;
    let mut owned: Vec<Vec<Covariance3>> = Vec::new();
    let covs: Option<&[Vec<Covariance3>]> = match (needs_covs, covs) {
        (false, _) => None,
        (true, Some(c)) => Some(c),
        (true, None) => {
            for s in scans {
                owned.push(pca_covariance(s, options.pca_neighbors)?);
            }
            Some(&owned)
        }
    };
    let mut poses = vec![PoseSE3::identity()];
    let mut velocity = PoseSE3::identity();
    for k in 0..scans.len() - 1 {
        let (target, source) = (&scans[k], &scans[k + 1]);
        let result: Result<MatchResult> = match options.matcher {
            Matcher::PointToPoint => icp_point2point(source, target, &velocity, &options.matching),
            Matcher::PointToPlane => {
                let normals: Vec<Vec3> =
                    covs.expect("computed above")[k].iter().map(|c| normal_from_covariance(c).normal).collect();
                icp_point2plane(source, target, &normals, &velocity, &options.matching)
            }
            Matcher::Gicp => {
                let c = covs.expect("computed above");
                gicp_align(source, target, &c[k + 1], &c[k], &velocity, &options.matching)
            }
        };
        match result {
            Ok(r) => {
                velocity = r.pose;
                let last = *poses.last().expect("non-empty");
                poses.push(last.compose(&r.pose));
            }
            Err(e) => {
                return Err(Error::Odometry {
                    failed_pair: k,
                    partial: Box::new(Trajectory::from_poses(poses)),
                    cause: Box::new(e),
                })
            }
        }
    }
    Ok(Trajectory::from_poses(poses))
}

/// Relative pose error over a frame gap: RMS translation norm and RMS
/// rotation angle (radians) of `(T_i^-1 T_{i+delta})^-1 (T*_i^-1 T*_{i+delta})`.
pub fn rpe(estimated: &Trajectory, reference: &Trajectory, delta: usize) -> Result<(f64, f64)> {
    if estimated.len() != reference.len() {
        return Err(Error::InvalidInput("trajectories must have equal length".into()));
    }
    if delta == 0 || estimated.len() <= delta {
        return Err(Error::InvalidInput(format!(
            "trajectory of length {} is too short for a gap of {delta}",
            estimated.len()
        )));
    }
    let est: Vec<&PoseSE3> = estimated.poses().collect();
    let refp: Vec<&PoseSE3> = reference.poses().collect();
    let n = est.len() - delta;
    let (mut st, mut sr) = (0.0, 0.0);
    for i in 0..n {
        let a = est[i].inverse().compose(est[i + delta]);
        let b = refp[i].inverse().compose(refp[i + delta]);
        let e = a.inverse().compose(&b);
        st += e.translation.norm_squared();
        sr += rotation_distance(&a.rotation, &b.rotation).powi(2);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Success threshold on the rotation error.
pub const SUCCESS_ROTATION_DEG: f64 = 10.0;

/// Fraction of results whose rotation is within 10 degrees of its reference.
pub fn success_rate(results: &[MatchResult], references: &[PoseSE3]) -> Result<f64> {
    let poses: Vec<PoseSE3> = results.iter().map(|r| r.pose).collect();
    pose_success_rate(&poses, references)
}

/// [`success_rate`] on bare poses.
pub fn pose_success_rate(estimates: &[PoseSE3], references: &[PoseSE3]) -> Result<f64> {
    if estimates.len() != references.len() {
        return Err(Error::InvalidInput("estimates and references differ in length".into()));
    }
    if estimates.is_empty() {
        return Ok(0.0);
    }
    let limit = SUCCESS_ROTATION_DEG.to_radians();
    let ok = estimates
        .iter()
        .zip(references)
        .filter(|(e, t)| rotation_distance(&e.rotation, &t.rotation) <= limit)
        .count();
    Ok(ok as f64 / estimates.len() as f64)
}

/// Replaces the points of every occupied voxel by their centroid. Output
/// order follows the voxel grid index, so it does not depend on input order
/// beyond floating-point summation.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidInput("voxel size must be positive".into()));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vec3, usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64);
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    Ok(PointCloud::new(cells.into_values().map(|(s, n)| s / n as f64).collect()))
}
