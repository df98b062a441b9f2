//! Covariance-driven scan densification.
//!
//! Every point spawns `samples_per_point` draws from `N(point, s^2 C)`,
//! generated in the eigenframe of `C`. Each eigenvector is oriented to point
//! away from the cloud centroid, which makes the frame — and therefore every
//! sample — move rigidly with the cloud. Each point has its own random
//! stream derived from the master seed and the point index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{gaussian::standard_normal3, sym_eigen_sorted, Covariance3, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub samples_per_point: usize,
    pub sigma_scale: f64,
    pub include_original: bool,
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    /// Seven samples within the 0.05-sigma region.
    fn default() -> Self {
        AugmentSpec { samples_per_point: 7, sigma_scale: 0.05, include_original: true, rng_seed: 0 }
    }
}

/// Densifies `cloud`; originals (if kept) come first, then the samples
/// grouped by source point.
pub fn augment_scan(cloud: &PointCloud, covs: &[Covariance3], spec: &AugmentSpec) -> Result<PointCloud> {
    if covs.len() != cloud.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariances for {} points",
            covs.len(),
            cloud.len()
        )));
    }
    if !(spec.sigma_scale > 0.0) {
        return Err(Error::InvalidInput("sigma_scale must be positive".into()));
    }
    let n = cloud.len();
    let mut out = Vec::with_capacity(n * (spec.samples_per_point + spec.include_original as usize));
    if spec.include_original {
        out.extend_from_slice(&cloud.points);
    }
    if spec.samples_per_point == 0 || n == 0 {
        return Ok(PointCloud::new(out));
    }
    let centroid = cloud.centroid();
    for (i, (p, c)) in cloud.points.iter().zip(covs).enumerate() {
        let (vals, mut vecs) = sym_eigen_sorted(c);
        let outward = p - centroid;
        for k in 0..3 {
            if vecs.column(k).dot(&outward) < 0.0 {
                vecs.column_mut(k).neg_mut();
            }
            let s = vals[k].max(0.0).sqrt() * spec.sigma_scale;
            vecs.column_mut(k).scale_mut(s);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        rng.set_stream(i as u64);
        for _ in 0..spec.samples_per_point {
            let z: Vec3 = standard_normal3(&mut rng);
            out.push(p + vecs * z);
        }
    }
    Ok(PointCloud::new(out))
}
