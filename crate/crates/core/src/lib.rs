//! Statistical-manifold modelling of point-cloud geometry.
//!
//! Every point of a scan is treated as a sample of a local Gaussian
//! `(mean, covariance)`. Covariances are learned without labels by
//! maximizing a Laplace-approximated marginal likelihood of scan pairs,
//! differentiating through a certifiably optimal SE(3) registration layer,
//! and are then consumed by covariance-aware scan matching, normal
//! extraction and scan augmentation.
//!
//! Module map:
//! - [`manifold`]: SE(3), Gaussian components, clouds and correspondences.
//! - [`likelihood`]: residual and pose likelihoods, energy, Hessian, Laplace loss.
//! - [`registration`]: QCQP lifting, SDP relaxation, certification, implicit gradients.
//! - [`estimators`]: covariance backends, correspondence search, training.
//! - [`matching`]: ICP variants, GICP, odometry and trajectory metrics.
//! - [`augment`]: covariance-driven scan densification.
//! - [`harness`]: synthetic scenes, file formats and experiment configuration.

pub mod augment;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod likelihood;
pub mod manifold;
pub mod matching;
pub mod registration;
pub mod spatial;

pub use error::{Error, RegistrationFailure, Result};
pub use manifold::{
    Covariance3, CorrespondenceSet, GaussianComponent, LowerTri3, MatchedPairs, PointCloud,
    PoseNoise, PoseSE3, Twist6, Vec3,
};
