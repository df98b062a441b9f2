//! Self-supervised covariance learning from a scan pair and a noisy pose.
//!
//! Each step predicts factors `L`, forms `C = L L^T`, finds the mode pose
//! `T_hat` with the certifiable registration layer and evaluates the
//! Laplace loss `Phi(T_hat; C) + 1/2 log|H(T_hat)|`. The gradient with
//! respect to `C` has three parts:
//!
//! 1. the direct partials of `Phi` at fixed `T_hat`,
//! 2. `dPhi/dT_hat * dT_hat/dC` through the implicit registration gradient,
//! 3. the log-determinant term, by central differences over the factor
//!    entries with `T_hat` held fixed (or dropped entirely).
//!
//! Without the pose likelihood the pose is taken as known (`T_hat = T_tilde`),
//! no registration is run, and only parts 1 and 3 remain.

use std::time::Instant;

use nalgebra::{Matrix3x6, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_backward, mlp_forward_tape, MlpConfig, MlpParams};
use super::{build_correspondences, DirectParams};
use crate::error::{Error, Result};
use crate::likelihood::{
    correspondence_terms, pose_nll, pose_nll_gradient, residual_jacobian, residual_weight,
};
use crate::manifold::{
    cholesky_build, factor_gradient, logdet_spd, Covariance3, LowerTri3, Mat3, MatchedPairs,
    PointCloud, PoseNoise, PoseSE3,
};
use crate::registration::{register, WEIGHT_ENTRIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Direct,
    Mlp,
}

/// How the gradient of `1/2 log|H(T_hat)|` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogdetHessianMode {
    /// Central differences over factor entries, `T_hat` held fixed.
    FiniteDifference,
    /// The term is left out of both the loss and its gradient.
    Off,
}

/// Training hyper-parameters. Distances, the correspondence threshold and
/// the pose noise are all in post-scaling units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Number of gradient steps.
    pub epochs: usize,
    pub correspondence_threshold: f64,
    pub use_pose_likelihood: bool,
    pub logdet_hessian_mode: LogdetHessianMode,
    pub rng_seed: u64,
    /// Multiplies every coordinate on ingestion.
    pub coordinate_scale: f64,
    /// Initial factors are `init_scale * I`.
    pub init_scale: f64,
    pub mlp: MlpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 100,
            correspondence_threshold: 0.01,
            use_pose_likelihood: true,
            logdet_hessian_mode: LogdetHessianMode::FiniteDifference,
            rng_seed: 0,
            coordinate_scale: 0.01,
            init_scale: 1e-3,
            mlp: MlpConfig { radius: 0.01, ..MlpConfig::default() },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.correspondence_threshold > 0.0) {
            return Err(Error::Config("correspondence_threshold must be positive".into()));
        }
        if !(self.coordinate_scale > 0.0 && self.coordinate_scale.is_finite()) {
            return Err(Error::Config("coordinate_scale must be positive".into()));
        }
        if !(self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite".into()));
        }
        Ok(())
    }
}

/// Learned parameters of either backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedParams {
    Direct(DirectParams),
    Mlp(MlpParams),
}

impl TrainedParams {
    pub fn backend(&self) -> Backend {
        match self {
            TrainedParams::Direct(_) => Backend::Direct,
            TrainedParams::Mlp(_) => Backend::Mlp,
        }
    }

    /// Factors for every point of `cloud` (post-scaling coordinates).
    pub fn factors(&self, cloud: &PointCloud, mlp: &MlpConfig) -> Result<Vec<LowerTri3>> {
        match self {
            TrainedParams::Direct(d) => {
                if d.factors.len() != cloud.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} direct factors for a cloud of {} points",
                        d.factors.len(),
                        cloud.len()
                    )));
                }
                Ok(d.factors.clone())
            }
            TrainedParams::Mlp(p) => super::mlp::mlp_forward(cloud, p, mlp),
        }
    }

    /// Covariances of `cloud` (given in original units), undoing the
    /// coordinate scaling the parameters were trained under.
    pub fn covariances(&self, cloud: &PointCloud, config: &TrainConfig) -> Result<Vec<Covariance3>> {
        let s = config.coordinate_scale;
        let factors = self.factors(&cloud.scaled(s), &config.mlp)?;
        let inv = 1.0 / (s * s);
        Ok(factors.iter().map(|l| cholesky_build(l) * inv).collect())
    }
}

/// Traces and result of [`train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss evaluated before each update.
    pub loss: Vec<f64>,
    pub correspondence_loss: Vec<f64>,
    pub pose_loss: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub initial_params: TrainedParams,
    pub params: TrainedParams,
    /// Mode pose of the last evaluated step (post-scaling units).
    pub final_pose: Option<PoseSE3>,
    pub num_correspondences: usize,
    pub coordinate_scale: f64,
}

/// Loss value and gradient with respect to every target factor.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub correspondence: f64,
    pub pose: f64,
    pub half_logdet_hessian: f64,
    pub mode: PoseSE3,
    /// One entry per target point; zero for points without correspondences.
    pub gradient: Option<Vec<[f64; 6]>>,
}

/// The training loss of one scan pair as a function of the target factors.
/// All inputs are already scaled.
#[derive(Debug, Clone)]
pub struct TrainingObjective {
    pub pairs: MatchedPairs,
    /// Target index of each pair.
    pub target_index: Vec<usize>,
    pub num_targets: usize,
    pub observed: PoseSE3,
    pub gamma: PoseNoise,
    pub use_pose_likelihood: bool,
    pub logdet_mode: LogdetHessianMode,
}

/// Relative step of the log-determinant differences.
const LOGDET_FD_REL_STEP: f64 = 1e-5;

impl TrainingObjective {
    pub fn new(
        source: &PointCloud,
        target: &PointCloud,
        observed: &PoseSE3,
        gamma: &PoseNoise,
        config: &TrainConfig,
    ) -> Result<Self> {
        let corr = build_correspondences(source, target, observed, config.correspondence_threshold)?;
        let pairs = MatchedPairs::gather(&corr, source, target)?;
        Ok(TrainingObjective {
            pairs,
            target_index: corr.pairs.iter().map(|&(_, j)| j).collect(),
            num_targets: target.len(),
            observed: *observed,
            gamma: *gamma,
            use_pose_likelihood: config.use_pose_likelihood,
            logdet_mode: config.logdet_hessian_mode,
        })
    }

    /// Evaluates the loss (and optionally its gradient) at `factors`.
    pub fn evaluate(&self, factors: &[LowerTri3], want_grad: bool) -> Result<ObjectiveValue> {
        if factors.len() != self.num_targets {
            return Err(Error::InvalidInput(format!(
                "{} factors for {} target points",
                factors.len(),
                self.num_targets
            )));
        }
        let target_covs: Vec<Covariance3> = factors.iter().map(cholesky_build).collect();
        let covs: Vec<Covariance3> = self.target_index.iter().map(|&j| target_covs[j]).collect();
        let registration = if self.use_pose_likelihood {
            Some(register(&self.pairs, &covs, want_grad)?)
        } else {
            None
        };
        let mode = registration.as_ref().map(|r| r.pose).unwrap_or(self.observed);

        let weights: Vec<Mat3> = covs.iter().map(residual_weight).collect::<Result<_>>()?;
        let mut corr = 0.0;
        let mut residuals = Vec::with_capacity(self.pairs.len());
        for (i, c) in covs.iter().enumerate() {
            let d = self.pairs.residual(i, &mode);
            let (ld, q) = correspondence_terms(&d, c)?;
            corr += ld + q;
            residuals.push(d);
        }
        let pose = if self.use_pose_likelihood { pose_nll(&mode, &self.observed, &self.gamma)? } else { 0.0 };

        let jacobians: Vec<Matrix3x6<f64>> =
            self.pairs.source.iter().map(|p| residual_jacobian(p, &mode)).collect();
        let prior = if self.use_pose_likelihood { self.gamma.information() } else { Matrix6::zeros() };
        let logdet_on = self.logdet_mode == LogdetHessianMode::FiniteDifference;
        let mut hessian = prior;
        for (j, w) in jacobians.iter().zip(&weights) {
            hessian += j.transpose() * w * j;
        }
        let half_logdet = if logdet_on {
            0.5 * logdet_spd(&(0.5 * (hessian + hessian.transpose()))).ok_or_else(|| {
                Error::NotPositiveDefinite("Hessian of the energy at the mode".into())
            })?
        } else {
            0.0
        };
        let loss = corr + pose + half_logdet;

        let gradient = if want_grad {
            let mut d_cov = vec![Mat3::zeros(); self.num_targets];
            // (a) direct partials at fixed pose.
            for (i, w) in weights.iter().enumerate() {
                let wd = w * residuals[i];
                d_cov[self.target_index[i]] += w - wd * wd.transpose();
            }
            // (b) through the mode pose.
            if let Some(reg) = &registration {
                let bundle = reg.gradient.as_ref().expect("requested");
                let mut g_xi = pose_nll_gradient(&mode, &self.observed, &self.gamma)?;
                for (i, w) in weights.iter().enumerate() {
                    g_xi += jacobians[i].transpose() * (w * residuals[i]);
                }
                for (i, w) in weights.iter().enumerate() {
                    let m: Vector6<f64> = bundle.dxi[i].transpose() * g_xi;
                    let mut g_w = Mat3::zeros();
                    for (k, &(a, b)) in WEIGHT_ENTRIES.iter().enumerate() {
                        if a == b {
                            g_w[(a, a)] = m[k];
                        } else {
                            g_w[(a, b)] = 0.5 * m[k];
                            g_w[(b, a)] = 0.5 * m[k];
                        }
                    }
                    d_cov[self.target_index[i]] -= 2.0 * w * g_w * w;
                }
            }
            let mut grad: Vec<[f64; 6]> =
                factors.iter().zip(&d_cov).map(|(l, g)| factor_gradient(l, g)).collect();
            // (c) log-determinant of the Hessian, pose held fixed.
            if logdet_on {
                self.add_logdet_gradient(factors, &jacobians, &hessian, &weights, &mut grad)?;
            }
            Some(grad)
        } else {
            None
        };
        Ok(ObjectiveValue {
            loss,
            correspondence: corr,
            pose,
            half_logdet_hessian: half_logdet,
            mode,
            gradient,
        })
    }

    fn add_logdet_gradient(
        &self,
        factors: &[LowerTri3],
        jacobians: &[Matrix3x6<f64>],
        hessian: &Matrix6<f64>,
        weights: &[Mat3],
        grad: &mut [[f64; 6]],
    ) -> Result<()> {
        // Per target, sum_i J_i^T E_ab J_i for the symmetric unit basis E_ab,
        // so the Hessian contribution of that target is linear in its weight.
        let mut basis: Vec<Option<[Matrix6<f64>; 6]>> = vec![None; self.num_targets];
        for (i, j) in jacobians.iter().enumerate() {
            let slot = basis[self.target_index[i]].get_or_insert([Matrix6::zeros(); 6]);
            for (k, &(a, b)) in WEIGHT_ENTRIES.iter().enumerate() {
                let ra = j.row(a).transpose();
                let rb = j.row(b).transpose();
                slot[k] += if a == b { ra * ra.transpose() } else { ra * rb.transpose() + rb * ra.transpose() };
            }
        }
        let first_weight: Vec<Option<Mat3>> = {
            let mut v = vec![None; self.num_targets];
            for (i, w) in weights.iter().enumerate() {
                v[self.target_index[i]].get_or_insert(*w);
            }
            v
        };
        let contribution = |b: &[Matrix6<f64>; 6], w: &Mat3| -> Matrix6<f64> {
            WEIGHT_ENTRIES.iter().enumerate().fold(Matrix6::zeros(), |acc, (k, &(r, c))| acc + b[k] * w[(r, c)])
        };
        let half_logdet = |m: &Matrix6<f64>| -> Result<f64> {
            logdet_spd(&(0.5 * (m + m.transpose())))
                .map(|v| 0.5 * v)
                .ok_or_else(|| Error::NotPositiveDefinite("perturbed Hessian of the energy".into()))
        };
        for t in 0..self.num_targets {
            let (Some(b), Some(w0)) = (&basis[t], first_weight[t]) else { continue };
            let rest = hessian - contribution(b, &w0);
            let l = factors[t];
            let size = l.0.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let h = LOGDET_FD_REL_STEP * size;
            for e in 0..6 {
                let eval = |delta: f64| -> Result<f64> {
                    let mut lp = l;
                    lp.0[e] += delta;
                    let w = residual_weight(&cholesky_build(&lp))?;
                    half_logdet(&(rest + contribution(b, &w)))
                };
                grad[t][e] += (eval(h)? - eval(-h)?) / (2.0 * h);
            }
        }
        Ok(())
    }
}

/// Runs plain gradient descent on the Laplace loss of one scan pair.
///
/// `source`, `target` and `observed` are given in original units and are
/// scaled by `config.coordinate_scale` on ingestion; `gamma` is taken to be
/// in post-scaling units already.
pub fn train(
    source: &PointCloud,
    target: &PointCloud,
    observed: &PoseSE3,
    gamma: &PoseNoise,
    backend: Backend,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let s = config.coordinate_scale;
    let source = source.scaled(s);
    let target = target.scaled(s);
    let observed = PoseSE3 { rotation: observed.rotation, translation: observed.translation * s };
    let objective = TrainingObjective::new(&source, &target, &observed, gamma, config)?;

    let mut params = match backend {
        Backend::Direct => TrainedParams::Direct(DirectParams::isotropic(target.len(), config.init_scale)),
        Backend::Mlp => TrainedParams::Mlp(MlpParams::init(config.rng_seed, config.init_scale)),
    };
    let initial_params = params.clone();
    let mut report = TrainReport {
        loss: Vec::with_capacity(config.epochs),
        correspondence_loss: Vec::with_capacity(config.epochs),
        pose_loss: Vec::with_capacity(config.epochs),
        step_seconds: Vec::with_capacity(config.epochs),
        initial_params,
        params: params.clone(),
        final_pose: None,
        num_correspondences: objective.pairs.len(),
        coordinate_scale: s,
    };
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        let start = Instant::now();
        match &mut params {
            TrainedParams::Direct(d) => {
                let value = objective.evaluate(&d.factors, true)?;
                let grad = value.gradient.as_ref().expect("requested");
                for (l, g) in d.factors.iter_mut().zip(grad) {
                    for e in 0..6 {
                        l.0[e] -= lr * g[e];
                    }
                }
                record(&mut report, &value);
            }
            TrainedParams::Mlp(p) => {
                let tape = mlp_forward_tape(&target, p, &config.mlp)?;
                let value = objective.evaluate(tape.outputs(), true)?;
                let grad = mlp_backward(&tape, p, value.gradient.as_ref().expect("requested"))?;
                let mut flat = p.to_flat();
                for (v, g) in flat.iter_mut().zip(grad.to_flat()) {
                    *v -= lr * g;
                }
                *p = MlpParams::from_flat(&flat)?;
                if !p.is_finite() {
                    return Err(Error::NotPositiveDefinite("network parameters diverged".into()));
                }
                record(&mut report, &value);
            }
        }
        report.step_seconds.push(start.elapsed().as_secs_f64());
    }
    report.params = params;
    Ok(report)
}

fn record(report: &mut TrainReport, value: &ObjectiveValue) {
    report.loss.push(value.loss);
    report.correspondence_loss.push(value.correspondence);
    report.pose_loss.push(value.pose);
    report.final_pose = Some(value.mode);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{se3_exp, Twist6, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_instance(seed: u64, n: usize) -> (PointCloud, PointCloud, PoseSE3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = se3_exp(&Twist6::from_slice(&[0.2, -0.1, 0.3, 0.5, -0.2, 0.1]));
        let src: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let tgt: Vec<Vec3> = src
            .iter()
            .map(|p| pose.transform_point(p) + Vec3::from_fn(|_, _| 0.02 * rng.random_range(-1.0..1.0)))
            .collect();
        (PointCloud::new(src), PointCloud::new(tgt), pose)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            coordinate_scale: 1.0,
            correspondence_threshold: 1.0,
            init_scale: 0.05,
            learning_rate: 1e-6,
            epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, q, t) = small_instance(1, 15);
        let cfg = TrainConfig { learning_rate: 0.0, ..config() };
        let r = train(&p, &q, &t, &PoseNoise::default(), Backend::Direct, &cfg).unwrap();
        assert_eq!(r.params, r.initial_params);
        assert_eq!(r.loss.len(), 3);
        assert!(r.loss.iter().all(|&l| l == r.loss[0]));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (p, q, t) = small_instance(2, 15);
        let cfg = TrainConfig { epochs: 0, ..config() };
        let r = train(&p, &q, &t, &PoseNoise::default(), Backend::Mlp, &cfg).unwrap();
        assert_eq!(r.params, r.initial_params);
        assert!(r.loss.is_empty() && r.step_seconds.is_empty());
    }

    fn fd_check(use_pose: bool, mode: LogdetHessianMode) -> f64 {
        let (p, q, t) = small_instance(3, 10);
        let cfg = TrainConfig { use_pose_likelihood: use_pose, logdet_hessian_mode: mode, ..config() };
        let obj = TrainingObjective::new(&p, &q, &t, &PoseNoise::isotropic(0.05, 0.1).unwrap(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let factors: Vec<LowerTri3> = (0..10)
            .map(|_| {
                let mut l = LowerTri3::scaled_identity(0.05);
                for v in &mut l.0 {
                    *v += 0.01 * rng.random_range(-1.0..1.0);
                }
                l
            })
            .collect();
        let g = obj.evaluate(&factors, true).unwrap().gradient.unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..10 {
            for e in 0..6 {
                let h = 1e-6;
                let mut fp = factors.clone();
                fp[t].0[e] += h;
                let mut fm = factors.clone();
                fm[t].0[e] -= h;
                let fd = (obj.evaluate(&fp, false).unwrap().loss - obj.evaluate(&fm, false).unwrap().loss) / (2.0 * h);
                num += (fd - g[t][e]).powi(2);
                den += fd * fd;
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn gradient_without_logdet_matches_fd_through_solver() {
        let err = fd_check(true, LogdetHessianMode::Off);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn known_pose_gradient_matches_fd() {
        let err = fd_check(false, LogdetHessianMode::FiniteDifference);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn full_gradient_error() {
        let err = fd_check(true, LogdetHessianMode::FiniteDifference);
        eprintln!("full gradient relative error {err:e}");
        assert!(err < 1e-3, "relative error {err}");
    }
}
