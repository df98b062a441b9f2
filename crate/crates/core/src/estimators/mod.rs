//! Covariance estimators and the self-supervised training loop.
//!
//! Three backends produce per-point covariances for a target scan: free
//! per-point factors ([`DirectParams`]), a small neighborhood network
//! ([`mlp`]), and the classical PCA baseline ([`pca_covariance`]).

pub mod checkpoint;
pub mod mlp;
pub mod train;

pub use checkpoint::Checkpoint;
pub use mlp::{mlp_forward, MlpConfig, MlpParams};
pub use train::{
    train, Backend, LogdetHessianMode, ObjectiveValue, TrainConfig, TrainReport, TrainedParams,
    TrainingObjective,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    cholesky_build, sym_eigen_sorted, Covariance3, CorrespondenceSet, LowerTri3, Mat3, PointCloud,
    PoseSE3, Vec3,
};
use crate::spatial::KdTree;

/// Pairs every source point with its nearest target point after mapping it
/// through `initial`; pairs farther apart than `threshold` are dropped.
pub fn build_correspondences(
    source: &PointCloud,
    target: &PointCloud,
    initial: &PoseSE3,
    threshold: f64,
) -> Result<CorrespondenceSet> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidInput("correspondence threshold must be non-negative".into()));
    }
    let tree = KdTree::new(&target.points);
    let t2 = threshold * threshold;
    let pairs: Vec<(usize, usize)> = source
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d2) = tree.nearest(&initial.transform_point(p))?;
            (d2 <= t2).then_some((i, j))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoCorrespondences);
    }
    Ok(CorrespondenceSet::new(pairs))
}

/// Sample covariance of each point together with its `k` nearest other
/// points (`k + 1` points, divisor `k`).
pub fn pca_covariance(cloud: &PointCloud, k: usize) -> Result<Vec<Covariance3>> {
    if k == 0 || cloud.len() <= k {
        return Err(Error::InsufficientPoints { needed: k + 1, got: cloud.len() });
    }
    let tree = KdTree::new(&cloud.points);
    Ok(cloud
        .points
        .iter()
        .map(|p| {
            let nbrs = tree.knn(p, k + 1);
            let mean = nbrs.iter().map(|&(i, _)| cloud.points[i]).sum::<Vec3>() / (k + 1) as f64;
            let scatter = nbrs.iter().fold(Mat3::zeros(), |acc, &(i, _)| {
                let d = cloud.points[i] - mean;
                acc + d * d.transpose()
            });
            scatter / k as f64
        })
        .collect())
}

/// Per-point lower-triangular factors of the direct backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectParams {
    pub factors: Vec<LowerTri3>,
}

impl DirectParams {
    /// `n` factors equal to `scale * I`.
    pub fn isotropic(n: usize, scale: f64) -> Self {
        DirectParams { factors: vec![LowerTri3::scaled_identity(scale); n] }
    }
}

/// `C_i = L_i L_i^T` for every point.
pub fn predict_direct(params: &DirectParams) -> Vec<Covariance3> {
    params.factors.iter().map(cholesky_build).collect()
}

/// Unit normal extracted from a covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalEstimate {
    pub normal: Vec3,
    /// The two smallest eigenvalues coincide (within 1e-10 relative to the
    /// largest), so the normal direction is not determined.
    pub ill_defined: bool,
}

/// Eigenvector of the smallest eigenvalue, signed so that its largest
/// component (by magnitude) is positive.
pub fn normal_from_covariance(c: &Covariance3) -> NormalEstimate {
    let (vals, vecs) = sym_eigen_sorted(c);
    let mut n: Vec3 = vecs.column(0).into_owned();
    let k = n.iamax();
    if n[k] < 0.0 {
        n = -n;
    }
    let scale = vals[2].abs().max(f64::MIN_POSITIVE);
    NormalEstimate { normal: n, ill_defined: (vals[1] - vals[0]).abs() <= 1e-10 * scale }
}

/// Angle in radians between two lines (sign-insensitive).
pub fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = (a.dot(b).abs() / (a.norm() * b.norm())).min(1.0);
    c.acos()
}
