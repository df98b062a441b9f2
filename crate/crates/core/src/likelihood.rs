//! The probabilistic objective: correspondence and pose negative
//! log-likelihoods, the energy `Phi`, its Gauss–Newton Hessian and the
//! Laplace-approximated evidence loss.
//!
//! The residual of a pair is `d = q - (R p + t)` and is distributed as
//! `N(0, 2 C)` where `C` is the target covariance. All `(2 pi)^3` constants
//! are dropped.

use nalgebra::{Matrix3x6, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    hat, logdet_spd, se3_left_jacobian_inv, se3_log, Covariance3, Mat3, MatchedPairs, PoseNoise,
    PoseSE3, Twist6, Vec3, COV_EPSILON,
};

/// 6x6 symmetric Hessian of the energy with respect to a right
/// perturbation of the pose.
pub type HessianSE3 = Matrix6<f64>;

/// Terms of the energy. `total` is the sum of every term that depends on
/// the pose or on the covariances; `pose_logdet = 1/2 log|Gamma|` is a
/// constant for fixed `Gamma` and is reported but not included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub corr_logdet: f64,
    pub corr_quadratic: f64,
    pub pose_logdet: f64,
    pub pose_quadratic: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn correspondence(&self) -> f64 {
        self.corr_logdet + self.corr_quadratic
    }
}

/// Residual covariance `S = 2 (C + eps I)`.
pub fn residual_covariance(c: &Covariance3) -> Mat3 {
    2.0 * (c + Mat3::identity() * COV_EPSILON)
}

/// Information matrix `W = S^{-1}` used as the per-pair weight.
pub fn residual_weight(c: &Covariance3) -> Result<Mat3> {
    let s = residual_covariance(c);
    let chol = s.cholesky().ok_or(Error::SingularCovariance)?;
    let w = chol.inverse();
    Ok(0.5 * (w + w.transpose()))
}

/// `1/2 [ log|2C| + d^T (2C)^{-1} d ]` with the usual ridge on `C`.
pub fn correspondence_nll(d: &Vec3, c: &Covariance3) -> Result<f64> {
    let (logdet, quad) = correspondence_terms(d, c)?;
    Ok(logdet + quad)
}

/// The two halves of [`correspondence_nll`]: `(1/2 log|S|, 1/2 d^T S^-1 d)`.
pub fn correspondence_terms(d: &Vec3, c: &Covariance3) -> Result<(f64, f64)> {
    let s = residual_covariance(c);
    let chol = s.cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let logdet: f64 = (0..3).map(|i| 2.0 * l[(i, i)].ln()).sum();
    let y = chol.solve(d);
    Ok((0.5 * logdet, 0.5 * d.dot(&y)))
}

/// `xi = Log(T^{-1} T_tilde)`.
pub fn pose_error(pose: &PoseSE3, observed: &PoseSE3) -> Result<Twist6> {
    se3_log(&pose.inverse().compose(observed))
}

/// `1/2 xi^T Gamma^{-1} xi` with `xi = Log(T^{-1} T_tilde)`.
pub fn pose_nll(pose: &PoseSE3, observed: &PoseSE3, gamma: &PoseNoise) -> Result<f64> {
    let xi = pose_error(pose, observed)?;
    Ok(0.5 * xi.0.dot(&(gamma.information() * xi.0)))
}

/// Gradient of [`pose_nll`] with respect to a right perturbation of `pose`.
///
/// Perturbing `T -> T Exp(delta)` moves the relative pose by `Exp(-delta)`
/// on the left, so `xi(delta) = xi - J_l(xi)^{-1} delta + O(delta^2)`.
pub fn pose_nll_gradient(
    pose: &PoseSE3,
    observed: &PoseSE3,
    gamma: &PoseNoise,
) -> Result<Vector6<f64>> {
    let xi = pose_error(pose, observed)?;
    let jinv = se3_left_jacobian_inv(&xi);
    Ok(-(jinv.transpose() * (gamma.information() * xi.0)))
}

fn check_lengths(pairs: &MatchedPairs, covs: &[Covariance3]) -> Result<()> {
    if covs.len() != pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariances for {} correspondences",
            covs.len(),
            pairs.len()
        )));
    }
    Ok(())
}

/// The energy `Phi(T; C)` with constants dropped.
pub fn energy(
    pose: &PoseSE3,
    pairs: &MatchedPairs,
    covs: &[Covariance3],
    observed: &PoseSE3,
    gamma: &PoseNoise,
) -> Result<EnergyBreakdown> {
    let mut e = correspondence_energy(pose, pairs, covs)?;
    e.pose_quadratic = pose_nll(pose, observed, gamma)?;
    e.pose_logdet = 0.5
        * logdet_spd(&gamma.0).ok_or_else(|| Error::NotPositiveDefinite("pose noise".into()))?;
    e.total = e.corr_logdet + e.corr_quadratic + e.pose_quadratic;
    Ok(e)
}

/// Correspondence part of the energy only; pose fields are zero.
pub fn correspondence_energy(
    pose: &PoseSE3,
    pairs: &MatchedPairs,
    covs: &[Covariance3],
) -> Result<EnergyBreakdown> {
    check_lengths(pairs, covs)?;
    let mut e = EnergyBreakdown::default();
    for (i, c) in covs.iter().enumerate() {
        let (ld, q) = correspondence_terms(&pairs.residual(i, pose), c)?;
        e.corr_logdet += ld;
        e.corr_quadratic += q;
    }
    e.total = e.corr_logdet + e.corr_quadratic;
    Ok(e)
}

/// `d(residual)/d(xi)` under `T -> T Exp(xi)`: `[ R [p]x | -R ]`.
pub fn residual_jacobian(p: &Vec3, pose: &PoseSE3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(pose.rotation * hat(p)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-pose.rotation));
    j
}

/// Contribution `J^T S^{-1} J` of one pair to the Gauss–Newton Hessian.
pub fn pair_hessian(p: &Vec3, pose: &PoseSE3, weight: &Mat3) -> HessianSE3 {
    let j = residual_jacobian(p, pose);
    let h = j.transpose() * weight * j;
    0.5 * (h + h.transpose())
}

/// Gauss–Newton Hessian `sum J^T (2C)^{-1} J + Gamma^{-1}`. Passing `None`
/// for `gamma` drops the prior summand.
pub fn gn_hessian(
    pose: &PoseSE3,
    pairs: &MatchedPairs,
    covs: &[Covariance3],
    gamma: Option<&PoseNoise>,
) -> Result<HessianSE3> {
    check_lengths(pairs, covs)?;
    let mut h = gamma.map(|g| g.information()).unwrap_or_else(Matrix6::zeros);
    for (i, c) in covs.iter().enumerate() {
        h += pair_hessian(&pairs.source[i], pose, &residual_weight(c)?);
    }
    Ok(0.5 * (h + h.transpose()))
}

/// Full Hessian of `Phi` by central second differences over right
/// perturbations, step `h`. Meant as a test oracle for [`gn_hessian`].
pub fn fd_hessian(
    pose: &PoseSE3,
    pairs: &MatchedPairs,
    covs: &[Covariance3],
    observed: &PoseSE3,
    gamma: &PoseNoise,
    step: f64,
) -> Result<HessianSE3> {
    let f = |xi: &Vector6<f64>| -> Result<f64> {
        Ok(energy(&pose.retract(&Twist6(*xi)), pairs, covs, observed, gamma)?.total)
    };
    let f0 = f(&Vector6::zeros())?;
    let mut h = Matrix6::zeros();
    for a in 0..6 {
        for b in a..6 {
            let mut e = Vector6::zeros();
            let val = if a == b {
                e[a] = step;
                (f(&e)? - 2.0 * f0 + f(&-e)?) / (step * step)
            } else {
                let mut pp = Vector6::zeros();
                pp[a] = step;
                pp[b] = step;
                let mut pm = Vector6::zeros();
                pm[a] = step;
                pm[b] = -step;
                (f(&pp)? - f(&pm)? - f(&-pm)? + f(&-pp)?) / (4.0 * step * step)
            };
            h[(a, b)] = val;
            h[(b, a)] = val;
        }
    }
    Ok(h)
}

/// Components of the Laplace loss at a mode estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LaplaceLoss {
    pub energy: EnergyBreakdown,
    /// `1/2 log|H(T_hat)|`.
    pub half_logdet_hessian: f64,
    pub total: f64,
}

/// `1/2 log|H(T_hat)| + Phi(T_hat; C)`.
///
/// With `use_pose_likelihood = false` the pose terms of `Phi` and the
/// `Gamma^{-1}` summand of `H` are dropped, which models an exact pose label.
pub fn laplace_loss(
    mode: &PoseSE3,
    pairs: &MatchedPairs,
    covs: &[Covariance3],
    observed: &PoseSE3,
    gamma: &PoseNoise,
    use_pose_likelihood: bool,
) -> Result<LaplaceLoss> {
    let (e, h) = if use_pose_likelihood {
        (
            energy(mode, pairs, covs, observed, gamma)?,
            gn_hessian(mode, pairs, covs, Some(gamma))?,
        )
    } else {
        (
            correspondence_energy(mode, pairs, covs)?,
            gn_hessian(mode, pairs, covs, None)?,
        )
    };
    let logdet = logdet_spd(&h)
        .ok_or_else(|| Error::NotPositiveDefinite("Hessian of the energy at the mode".into()))?;
    let half = 0.5 * logdet;
    Ok(LaplaceLoss { energy: e, half_logdet_hessian: half, total: half + e.total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{se3_exp, Twist6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn rand_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let xi: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        se3_exp(&Twist6::from_slice(&xi))
    }

    fn rand_spd(rng: &mut ChaCha8Rng) -> Mat3 {
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Mat3::identity() * 0.1
    }

    #[test]
    fn correspondence_nll_examples() {
        let half = Mat3::identity() * 0.5;
        assert!(correspondence_nll(&Vec3::zeros(), &half).unwrap().abs() < 1e-7);
        let v = correspondence_nll(&Vec3::new(1.0, 0.0, 0.0), &half).unwrap();
        assert!((v - 0.5).abs() < 1e-7);
    }

    #[test]
    fn correspondence_nll_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = rand_spd(&mut rng);
            let d = rand_vec(&mut rng, 1.0);
            // Independent route: explicit determinant and adjugate inverse.
            let s = 2.0 * (c + Mat3::identity() * COV_EPSILON);
            let det = s.determinant();
            let inv = s.try_inverse().unwrap();
            let expected = 0.5 * (det.ln() + (d.transpose() * inv * d)[0]);
            let got = correspondence_nll(&d, &c).unwrap();
            assert!((got - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let c = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            correspondence_nll(&Vec3::zeros(), &c),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn pose_nll_examples() {
        let g = PoseNoise::new(Matrix6::identity()).unwrap();
        let t = PoseSE3::identity();
        assert_eq!(pose_nll(&t, &t, &g).unwrap(), 0.0);
        let obs = PoseSE3::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert!((pose_nll(&t, &obs, &g).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = PoseNoise::isotropic(0.3, 0.7).unwrap();
        for _ in 0..10 {
            let t = rand_pose(&mut rng);
            let obs = t.retract(&Twist6::from_slice(&std::array::from_fn(|_| {
                rng.random_range(-0.4..0.4)
            })));
            let grad = pose_nll_gradient(&t, &obs, &g).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut e = [0.0; 6];
                e[k] = h;
                let fp = pose_nll(&t.retract(&Twist6::from_slice(&e)), &obs, &g).unwrap();
                e[k] = -h;
                let fm = pose_nll(&t.retract(&Twist6::from_slice(&e)), &obs, &g).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn energy_examples() {
        let g = PoseNoise::default();
        let t = PoseSE3::identity();
        let empty = MatchedPairs::default();
        assert_eq!(energy(&t, &empty, &[], &t, &g).unwrap().total, 0.0);
        let one = MatchedPairs::new(vec![Vec3::new(1.0, 2.0, 3.0)], vec![Vec3::new(1.0, 2.0, 3.0)])
            .unwrap();
        let e = energy(&t, &one, &[Mat3::identity() * 0.5], &t, &g).unwrap();
        assert!(e.total.abs() < 1e-7);
    }

    #[test]
    fn energy_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = PoseNoise::default();
        let n = 50;
        let pairs = MatchedPairs::new(
            (0..n).map(|_| rand_vec(&mut rng, 5.0)).collect(),
            (0..n).map(|_| rand_vec(&mut rng, 5.0)).collect(),
        )
        .unwrap();
        let covs: Vec<Mat3> = (0..n).map(|_| rand_spd(&mut rng)).collect();
        let t = rand_pose(&mut rng);
        let obs = t.retract(&Twist6::from_slice(&[0.01, -0.02, 0.0, 0.05, 0.0, -0.03]));
        let e = energy(&t, &pairs, &covs, &obs, &g).unwrap();
        let mut expected = pose_nll(&t, &obs, &g).unwrap();
        for i in 0..n {
            expected += correspondence_nll(&pairs.residual(i, &t), &covs[i]).unwrap();
        }
        assert!((e.total - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        assert!((e.corr_logdet + e.corr_quadratic + e.pose_quadratic - e.total).abs() < 1e-12);
    }

    #[test]
    fn jacobian_examples() {
        let t = PoseSE3::identity();
        let j0 = residual_jacobian(&Vec3::zeros(), &t);
        assert_eq!(j0.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert_eq!(j0.fixed_view::<3, 3>(0, 3).into_owned(), -Mat3::identity());
        // Rotating (0,0,1) about x by +eps moves it to (0,-eps,1); the
        // residual q - Tp then changes by (0,+eps,0).
        let j = residual_jacobian(&Vec3::new(0.0, 0.0, 1.0), &t);
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(j.fixed_view::<3, 3>(0, 0).into_owned(), expected);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..100 {
            let t = rand_pose(&mut rng);
            let p = rand_vec(&mut rng, 3.0);
            let q = rand_vec(&mut rng, 3.0);
            let j = residual_jacobian(&p, &t);
            for k in 0..6 {
                let mut e = [0.0; 6];
                e[k] = h;
                let dp = q - t.retract(&Twist6::from_slice(&e)).transform_point(&p);
                e[k] = -h;
                let dm = q - t.retract(&Twist6::from_slice(&e)).transform_point(&p);
                let fd = (dp - dm) / (2.0 * h);
                assert!((fd - j.column(k)).amax() < 1e-6);
            }
        }
    }

    #[test]
    fn hessian_examples() {
        let g = PoseNoise::default();
        let t = PoseSE3::identity();
        let h = gn_hessian(&t, &MatchedPairs::default(), &[], Some(&g)).unwrap();
        assert_eq!(h, g.information());
        let one = MatchedPairs::new(vec![Vec3::zeros()], vec![Vec3::zeros()]).unwrap();
        let h = gn_hessian(&t, &one, &[Mat3::identity() * 0.5], None).unwrap();
        assert!((h.fixed_view::<3, 3>(3, 3) - Mat3::identity()).amax() < 1e-7);
        assert_eq!(h.fixed_view::<3, 3>(0, 0).into_owned(), Mat3::zeros());
        assert_eq!(h, h.transpose());
    }

    #[test]
    fn gauss_newton_close_to_full_hessian_at_small_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = PoseNoise::default();
        let t = rand_pose(&mut rng);
        let n = 40;
        let src: Vec<Vec3> = (0..n).map(|_| rand_vec(&mut rng, 3.0)).collect();
        let tgt: Vec<Vec3> = src
            .iter()
            .map(|p| t.transform_point(p) + rand_vec(&mut rng, 0.005))
            .collect();
        let pairs = MatchedPairs::new(src, tgt).unwrap();
        let covs: Vec<Mat3> = (0..n).map(|_| rand_spd(&mut rng) * 0.05).collect();
        let h_gn = gn_hessian(&t, &pairs, &covs, Some(&g)).unwrap();
        let h_fd = fd_hessian(&t, &pairs, &covs, &t, &g, 1e-4).unwrap();
        let rel = (h_gn - h_fd).norm() / h_fd.norm();
        assert!(rel < 0.1, "relative difference {rel}");
    }

    #[test]
    fn laplace_loss_examples() {
        let g = PoseNoise::default();
        let t = PoseSE3::identity();
        let l = laplace_loss(&t, &MatchedPairs::default(), &[], &t, &g, true).unwrap();
        let expected = 0.5 * logdet_spd(&g.information()).unwrap();
        assert!((l.total - expected).abs() < 1e-9);
    }

    #[test]
    fn laplace_loss_is_compositional_and_shrinks_with_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PoseNoise::default();
        let t = rand_pose(&mut rng);
        let src: Vec<Vec3> = (0..20).map(|_| rand_vec(&mut rng, 3.0)).collect();
        let tgt: Vec<Vec3> = src.iter().map(|p| t.transform_point(p)).collect();
        let pairs = MatchedPairs::new(src, tgt).unwrap();
        let covs: Vec<Mat3> = (0..20).map(|_| rand_spd(&mut rng)).collect();
        for use_pose in [true, false] {
            let l = laplace_loss(&t, &pairs, &covs, &t, &g, use_pose).unwrap();
            let h = gn_hessian(&t, &pairs, &covs, use_pose.then_some(&g)).unwrap();
            let e = if use_pose {
                energy(&t, &pairs, &covs, &t, &g).unwrap().total
            } else {
                correspondence_energy(&t, &pairs, &covs).unwrap().total
            };
            let expected = 0.5 * h.determinant().ln() + e;
            assert!((l.total - expected).abs() < 1e-9 * (1.0 + expected.abs()));
            let small: Vec<Mat3> = covs.iter().map(|c| c * 0.1).collect();
            let l_small = laplace_loss(&t, &pairs, &small, &t, &g, use_pose).unwrap();
            assert!(l_small.total < l.total);
        }
    }

    #[test]
    fn quadratic_gradient_vanishes_at_zero_residual() {
        use crate::manifold::{cholesky_build, LowerTri3};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = rand_vec(&mut rng, 1.0);
        let pairs = MatchedPairs::new(vec![p], vec![p]).unwrap();
        let l0 = LowerTri3(std::array::from_fn(|_| rng.random_range(0.5..1.5)));
        let quad = |l: &LowerTri3| {
            correspondence_energy(&PoseSE3::identity(), &pairs, &[cholesky_build(l)])
                .unwrap()
                .corr_quadratic
        };
        for k in 0..6 {
            let mut lp = l0;
            lp.0[k] += 1e-5;
            let mut lm = l0;
            lm.0[k] -= 1e-5;
            assert_eq!((quad(&lp) - quad(&lm)) / 2e-5, 0.0);
        }
    }
}
