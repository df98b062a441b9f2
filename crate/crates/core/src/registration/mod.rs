//! Certifiably optimal, differentiable weighted point-to-point registration.
//!
//! `register` lifts the problem to a 13-dimensional QCQP, solves its SDP
//! relaxation, rounds the leading eigenvector to a pose, certifies the
//! rounding against the SDP lower bound, and polishes the certified pose by
//! Gauss–Newton on the exact objective. Gradients of the optimal pose with
//! respect to the weights come from implicit differentiation of the KKT
//! system of the QCQP.

mod ift;
pub mod qcqp;
pub mod sdp;

pub use ift::{implicit_grad, Certificate, RegistrationGradient, WEIGHT_ENTRIES};
pub use qcqp::{
    build_constraints, build_cost, data_matrix, lift, unlift, ConstraintSet, HomVec13, Mat13,
};
pub use sdp::{solve_sdp, SdpSolution};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, RegistrationFailure, Result};
use crate::likelihood::{residual_jacobian, residual_weight};
use crate::manifold::{project_to_so3, Covariance3, Mat3, MatchedPairs, PoseSE3, Twist6, Vec3};

/// Default relative duality-gap target of the interior-point solve.
pub const DEFAULT_SDP_TOL: f64 = 1e-12;
/// Rank-1 ratio below which the SDP solution is considered rank one.
pub const RANK1_THRESHOLD: f64 = 1e-6;
/// Relative rounding gap accepted as certified.
pub const GAP_THRESHOLD: f64 = 1e-6;

/// Rounds an SDP solution to a pose.
///
/// The leading eigenvector of `X` is scaled so that `h = +1`, the rotation
/// block is projected onto SO(3). `tight` holds when `X` is numerically rank
/// one and the rounded pose's cost exceeds the SDP lower bound by less than
/// `GAP_THRESHOLD` relative. Both quantities are measured on the
/// Frobenius-normalized cost so the test does not depend on the weights'
/// overall scale.
pub fn extract_pose(sol: &SdpSolution, q: &Mat13) -> Result<(PoseSE3, bool)> {
    let (vals, v) = sdp::leading_eigenpair(&sol.x);
    if !(vals[0] > 0.0) {
        return Err(Error::NotPositiveDefinite(
            "leading eigenvalue of the SDP solution is not positive".into(),
        ));
    }
    if v[0].abs() < 1e-12 {
        return Err(Error::DegenerateGeometry(
            "homogenizing coordinate of the leading eigenvector vanishes".into(),
        ));
    }
    let x = v / v[0];
    let (r_raw, t) = unlift(&x);
    let pose = PoseSE3 { rotation: project_to_so3(&r_raw), translation: t };
    let (_, gap) = rounding_gap(&pose, sol, q);
    let tight = sol.rank1_ratio < RANK1_THRESHOLD && gap < GAP_THRESHOLD;
    Ok((pose, tight))
}

/// `(rounded objective, relative rounding gap)`, the latter on the
/// normalized cost.
fn rounding_gap(pose: &PoseSE3, sol: &SdpSolution, q: &Mat13) -> (f64, f64) {
    let x = lift(pose);
    let rounded = x.dot(&(q * x));
    let scale = {
        let n = q.norm();
        if n > 0.0 { n } else { 1.0 }
    };
    let primal = sol.primal_value / scale;
    let gap = (rounded / scale - primal) / (1.0 + primal.abs());
    (rounded, gap)
}

/// Diagnostics of one registration. The SDP values are those of the
/// interior-point solve, before crossover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDiagnostics {
    pub primal_value: f64,
    pub dual_value: f64,
    /// SDP duality gap (primal - dual).
    pub duality_gap: f64,
    /// Rounded objective minus the SDP lower bound.
    pub optimality_gap: f64,
    pub rank1_ratio: f64,
    pub tight: bool,
    pub sdp_iterations: usize,
    /// `|H x_hat| / |Q|_F` at the returned pose.
    pub stationarity: f64,
    /// Objective `sum d^T W d` at the returned pose.
    pub cost: f64,
}

/// Output of [`register`].
#[derive(Debug, Clone)]
pub struct Registration {
    pub pose: PoseSE3,
    pub gradient: Option<RegistrationGradient>,
    pub diagnostics: RegistrationDiagnostics,
    /// Relaxation solution; the exact rank-one pair when the certificate
    /// allows crossover, the interior-point iterate otherwise.
    pub sdp: SdpSolution,
    pub certificate: Certificate,
}

/// Registers with weights `W_i = (2 C_i + 2 eps I)^{-1}`.
pub fn register(
    pairs: &MatchedPairs,
    covs: &[Covariance3],
    want_grad: bool,
) -> Result<Registration> {
    if covs.len() != pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} covariances for {} correspondences",
            covs.len(),
            pairs.len()
        )));
    }
    let weights = covs.iter().map(residual_weight).collect::<Result<Vec<_>>>()?;
    register_weighted(pairs, &weights, want_grad)
}

/// Registration with explicit symmetric PSD weights.
pub fn register_weighted(
    pairs: &MatchedPairs,
    weights: &[Mat3],
    want_grad: bool,
) -> Result<Registration> {
    check_spread(&pairs.source)?;
    let q = build_cost(pairs, weights)?;
    let constraints = build_constraints();
    let mut sol = solve_sdp(&q, &constraints, DEFAULT_SDP_TOL)?;
    let (rounded, tight) = extract_pose(&sol, &q)?;
    let (rounded_cost, _) = rounding_gap(&rounded, &sol, &q);
    sol.tight = tight;
    if !tight {
        return Err(Error::NotTight(Box::new(RegistrationFailure {
            candidate: rounded,
            optimality_gap: rounded_cost - sol.primal_value,
            rank1_ratio: sol.rank1_ratio,
        })));
    }
    let pose = polish(pairs, weights, &rounded);
    let certificate = Certificate::new(&q, &constraints, &sol, &pose)?;
    let x_hat = lift(&pose);
    let cost = x_hat.dot(&(q * x_hat));
    let q_norm = q.norm().max(f64::MIN_POSITIVE);
    let ipm = sol.clone();
    if certificate.min_eigenvalue >= -CROSSOVER_EIGEN_TOL * q_norm {
        sol = crossover(&sol, &certificate, &constraints, cost);
    }
    let diagnostics = RegistrationDiagnostics {
        primal_value: ipm.primal_value,
        dual_value: ipm.dual_value,
        duality_gap: ipm.gap,
        optimality_gap: rounded_cost - ipm.primal_value,
        rank1_ratio: ipm.rank1_ratio,
        tight,
        sdp_iterations: ipm.iterations,
        stationarity: (certificate.h_bar * x_hat).norm() / q_norm,
        cost,
    };
    let gradient = if want_grad {
        Some(implicit_grad(&certificate, pairs, weights)?)
    } else {
        None
    };
    Ok(Registration { pose, gradient, diagnostics, sdp: sol, certificate })
}

/// Smallest certificate eigenvalue, relative to `|Q|_F`, still read as
/// positive semidefinite.
const CROSSOVER_EIGEN_TOL: f64 = 1e-9;

/// Replaces an interior-point solution by the rank-one pair built from the
/// polished pose and its certificate: `X = x x^T` is feasible, `H x = 0`
/// gives complementarity and `H >= 0` dual feasibility, so both objectives
/// equal the cost at `x` to round-off. The interior-point path itself
/// stalls near `1e-8` relative gap as `X` approaches rank one.
fn crossover(sol: &SdpSolution, cert: &Certificate, constraints: &ConstraintSet, cost: f64) -> SdpSolution {
    let dual = -cert.lambda.iter().zip(&constraints.rhs).map(|(l, b)| l * b).sum::<f64>();
    SdpSolution {
        x: cert.x_hat * cert.x_hat.transpose(),
        lambda: cert.lambda.clone(),
        primal_value: cost,
        dual_value: dual,
        gap: cost - dual,
        rank1_ratio: 0.0,
        tight: true,
        iterations: sol.iterations,
        active_constraints: sol.active_constraints.clone(),
    }
}

/// Requires the source points to span at least a plane.
fn check_spread(points: &[Vec3]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: points.len() });
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let scatter = points
        .iter()
        .fold(Mat3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear; the rotation is not determined".into(),
        ));
    }
    Ok(())
}

/// Gauss–Newton refinement of `sum d^T W d` from a certified start. The
/// start is already the global optimum to solver precision; this removes
/// the interior-point residual error.
pub fn polish(pairs: &MatchedPairs, weights: &[Mat3], start: &PoseSE3) -> PoseSE3 {
    let cost = |pose: &PoseSE3| -> f64 {
        (0..pairs.len())
            .map(|i| {
                let d = pairs.residual(i, pose);
                d.dot(&(weights[i] * d))
            })
            .sum()
    };
    let mut pose = *start;
    let mut f = cost(&pose);
    for _ in 0..100 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for i in 0..pairs.len() {
            let j = residual_jacobian(&pairs.source[i], &pose);
            let d = pairs.residual(i, &pose);
            let jw = j.transpose() * weights[i];
            h += jw * j;
            g += jw * d;
        }
        let Some(step) = h.cholesky().map(|c| -c.solve(&g)) else { break };
        if step.norm() < 1e-15 {
            break;
        }
        // Close to the optimum the cost is flat to round-off, so small steps
        // are taken as they are; larger ones are safeguarded by halving.
        if step.norm() < 1e-6 {
            pose = pose.retract(&Twist6(step));
            f = cost(&pose);
            continue;
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = pose.retract(&Twist6(step * alpha));
            let fc = cost(&cand);
            if fc <= f {
                pose = cand;
                f = fc;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// JSON document with the cost, constraints, primal matrix and multipliers,
/// for cross-checking against an external SDP solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdpDebugDump {
    pub cost: Vec<Vec<f64>>,
    pub constraints: Vec<Vec<Vec<f64>>>,
    pub rhs: Vec<f64>,
    pub primal: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
}

fn rows(m: &Mat13) -> Vec<Vec<f64>> {
    (0..13).map(|i| (0..13).map(|j| m[(i, j)]).collect()).collect()
}

pub fn debug_dump(q: &Mat13, constraints: &ConstraintSet, sol: &SdpSolution) -> Result<String> {
    let dump = SdpDebugDump {
        cost: rows(q),
        constraints: constraints.matrices.iter().map(rows).collect(),
        rhs: constraints.rhs.clone(),
        primal: rows(&sol.x),
        lambda: sol.lambda.clone(),
    };
    Ok(serde_json::to_string_pretty(&dump)?)
}
