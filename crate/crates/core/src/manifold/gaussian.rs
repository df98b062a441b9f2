//! Per-point Gaussians: covariance factors, frame changes and sampling.

use nalgebra::{Matrix6, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::se3::{Mat3, PoseSE3, Vec3};
use crate::error::{Error, Result};

/// A 3x3 symmetric positive semi-definite matrix, in m².
pub type Covariance3 = Mat3;

/// Ridge added to covariances before any inversion or log-determinant.
pub const COV_EPSILON: f64 = 1e-8;

/// Lower-triangular Cholesky-style factor `L`, entries
/// `(l11, l21, l22, l31, l32, l33)`. The diagonal is unconstrained in sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerTri3(pub [f64; 6]);

impl LowerTri3 {
    pub fn identity() -> Self {
        LowerTri3([1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }

    pub fn scaled_identity(s: f64) -> Self {
        LowerTri3([s, 0.0, s, 0.0, 0.0, s])
    }

    pub fn to_matrix(&self) -> Mat3 {
        let [l11, l21, l22, l31, l32, l33] = self.0;
        Mat3::new(l11, 0.0, 0.0, l21, l22, 0.0, l31, l32, l33)
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        LowerTri3([
            m[(0, 0)],
            m[(1, 0)],
            m[(1, 1)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ])
    }

    /// Matrix position `(row, col)` of the k-th packed entry.
    pub const ENTRY_INDEX: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

    /// Projects a full 3x3 gradient onto the packed lower-triangular entries.
    pub fn pack_gradient(g: &Mat3) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (k, &(r, c)) in Self::ENTRY_INDEX.iter().enumerate() {
            out[k] = g[(r, c)];
        }
        out
    }
}

/// `L L^T`, PSD for any real factor.
pub fn cholesky_build(l: &LowerTri3) -> Covariance3 {
    let m = l.to_matrix();
    let c = m * m.transpose();
    0.5 * (c + c.transpose())
}

/// Gradient of a scalar `f(C)` with respect to the factor entries of
/// `C = L L^T`, given `dF/dC` (not necessarily symmetric).
pub fn factor_gradient(l: &LowerTri3, d_cov: &Mat3) -> [f64; 6] {
    let g = (d_cov + d_cov.transpose()) * l.to_matrix();
    LowerTri3::pack_gradient(&g)
}

/// Symmetric eigen-decomposition with eigenvalues in ascending order; the
/// columns of the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen_sorted(c: &Mat3) -> (Vec3, Mat3) {
    let sym = 0.5 * (c + c.transpose());
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vals = Vec3::zeros();
    let mut vecs = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = eig.eigenvalues[src];
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// `C + eps I`, inverted. Errors when the result is not positive definite.
pub fn regularized_inverse(c: &Covariance3) -> Result<Mat3> {
    let reg = c + Mat3::identity() * COV_EPSILON;
    let chol = reg.cholesky().ok_or(Error::SingularCovariance)?;
    Ok(chol.inverse())
}

/// Log-determinant through a Cholesky factorization.
pub fn logdet_spd<const D: usize>(
    m: &nalgebra::SMatrix<f64, D, D>,
) -> Option<f64> {
    let chol = nalgebra::Cholesky::new(*m)?;
    let l = chol.l();
    Some((0..D).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Covariance of the 6-vector pose measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise(pub Matrix6<f64>);

impl PoseNoise {
    /// Diagonal noise with the same standard deviation on all rotation axes
    /// and on all translation axes.
    pub fn isotropic(sigma_rot: f64, sigma_trans: f64) -> Result<Self> {
        if !(sigma_rot > 0.0 && sigma_trans > 0.0) {
            return Err(Error::InvalidInput("pose noise sigmas must be positive".into()));
        }
        let r2 = sigma_rot * sigma_rot;
        let t2 = sigma_trans * sigma_trans;
        Ok(PoseNoise(Matrix6::from_diagonal(
            &nalgebra::Vector6::new(r2, r2, r2, t2, t2, t2),
        )))
    }

    pub fn new(m: Matrix6<f64>) -> Result<Self> {
        if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(Error::InvalidInput("pose noise must be symmetric".into()));
        }
        if nalgebra::Cholesky::new(m).is_none() {
            return Err(Error::NotPositiveDefinite("pose noise".into()));
        }
        Ok(PoseNoise(m))
    }

    pub fn information(&self) -> Matrix6<f64> {
        self.0.cholesky().expect("validated SPD").inverse()
    }
}

impl Default for PoseNoise {
    /// `sigma_rot = 0.01 rad`, `sigma_trans = 0.05 m`.
    fn default() -> Self {
        PoseNoise::isotropic(0.01, 0.05).expect("positive sigmas")
    }
}

/// One element of the statistical manifold: a mean and a PSD covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec3,
    pub cov: Covariance3,
}

impl GaussianComponent {
    pub fn new(mean: Vec3, cov: Covariance3) -> Self {
        GaussianComponent { mean, cov }
    }
}

/// Expresses a world-frame component in the frame of a sensor at pose
/// `sensor` (i.e. applies `sensor^-1`).
pub fn transform_component(g: &GaussianComponent, sensor: &PoseSE3) -> GaussianComponent {
    let rt = sensor.rotation.transpose();
    let cov = rt * g.cov * sensor.rotation;
    GaussianComponent {
        mean: rt * (g.mean - sensor.translation),
        cov: 0.5 * (cov + cov.transpose()),
    }
}

/// Applies a rigid transform to a component (`mean -> R mean + t`,
/// `cov -> R cov R^T`).
pub fn apply_pose_to_component(g: &GaussianComponent, pose: &PoseSE3) -> GaussianComponent {
    let cov = pose.rotation * g.cov * pose.rotation.transpose();
    GaussianComponent {
        mean: pose.transform_point(&g.mean),
        cov: 0.5 * (cov + cov.transpose()),
    }
}

/// Displacement `q - (R p + t)` of a correspondence.
pub fn residual(q: &Vec3, p: &Vec3, pose: &PoseSE3) -> Vec3 {
    q - pose.transform_point(p)
}

/// Square-root factor `V diag(sqrt(lambda))` in the eigenframe; negative
/// eigenvalues from round-off are clamped to zero.
pub fn eigen_factor(c: &Covariance3) -> Mat3 {
    let (vals, vecs) = sym_eigen_sorted(c);
    let mut f = vecs;
    for k in 0..3 {
        let s = vals[k].max(0.0).sqrt();
        f.column_mut(k).scale_mut(s);
    }
    f
}

/// Draws `n` points from `N(mean, sigma_scale^2 cov)`. Deterministic in
/// `seed`.
pub fn sample_component(
    g: &GaussianComponent,
    n: usize,
    sigma_scale: f64,
    seed: u64,
) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = eigen_factor(&g.cov) * sigma_scale;
    (0..n)
        .map(|_| g.mean + factor * standard_normal3(&mut rng))
        .collect()
}

pub(crate) fn standard_normal3<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}
