//! Geometric and probabilistic primitives shared by every other module.
//!
//! SE(3) uses the right-perturbation convention throughout: a twist `xi`
//! perturbs a pose as `T * Exp(xi)`, and twists are ordered
//! `(rho, nu)` = (rotation, translation).

pub mod gaussian;
pub mod se3;

pub use gaussian::{
    apply_pose_to_component, cholesky_build, eigen_factor, factor_gradient, logdet_spd,
    regularized_inverse, residual, sample_component, sym_eigen_sorted, transform_component,
    Covariance3, GaussianComponent, LowerTri3, PoseNoise, COV_EPSILON,
};
pub use se3::{
    hat, project_to_so3, rotation_angle, rotation_distance, se3_exp, se3_left_jacobian_inv,
    se3_log, so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log, vee, Mat3, Mat6,
    PoseSE3, Twist6, Vec3,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of points with optional per-point covariances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub covariances: Option<Vec<Covariance3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud { points, covariances: None }
    }

    pub fn with_covariances(points: Vec<Vec3>, covs: Vec<Covariance3>) -> Result<Self> {
        if covs.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} covariances for {} points",
                covs.len(),
                points.len()
            )));
        }
        Ok(PointCloud { points, covariances: Some(covs) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies a rigid transform to every point (and covariance, if present).
    pub fn transformed(&self, pose: &PoseSE3) -> PointCloud {
        let points = self.points.iter().map(|p| pose.transform_point(p)).collect();
        let covariances = self.covariances.as_ref().map(|cs| {
            cs.iter()
                .map(|c| pose.rotation * c * pose.rotation.transpose())
                .collect()
        });
        PointCloud { points, covariances }
    }

    /// Multiplies coordinates by `s` and covariances by `s^2`.
    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * s).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|cs| cs.iter().map(|c| c * (s * s)).collect()),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        if self.points.is_empty() {
            return Vec3::zeros();
        }
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

/// Index pairs `(source, target)` into two clouds. Several sources may share
/// a target.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        CorrespondenceSet { pairs }
    }

    /// Pairs `(i, i)` for `i < n`.
    pub fn identity(n: usize) -> Self {
        CorrespondenceSet { pairs: (0..n).map(|i| (i, i)).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, source: &PointCloud, target: &PointCloud) -> Result<()> {
        for &(s, t) in &self.pairs {
            if s >= source.len() || t >= target.len() {
                return Err(Error::InvalidInput(format!(
                    "correspondence ({s}, {t}) out of range for clouds of size {} and {}",
                    source.len(),
                    target.len()
                )));
            }
        }
        Ok(())
    }
}

/// Source/target coordinates gathered from a correspondence set, in pair
/// order. This is the form every objective in the crate consumes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchedPairs {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
}

impl MatchedPairs {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::InvalidInput(format!(
                "{} source points but {} target points",
                source.len(),
                target.len()
            )));
        }
        Ok(MatchedPairs { source, target })
    }

    pub fn gather(
        corr: &CorrespondenceSet,
        source: &PointCloud,
        target: &PointCloud,
    ) -> Result<Self> {
        corr.validate(source, target)?;
        Ok(MatchedPairs {
            source: corr.pairs.iter().map(|&(s, _)| source.points[s]).collect(),
            target: corr.pairs.iter().map(|&(_, t)| target.points[t]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Residual of pair `i` under `pose`.
    pub fn residual(&self, i: usize, pose: &PoseSE3) -> Vec3 {
        residual(&self.target[i], &self.source[i], pose)
    }
}
