//! Scan matching: point-to-point and point-to-plane ICP, covariance-aware
//! GICP, sequence odometry and trajectory metrics.
//!
//! All three matchers share one outer loop: nearest-neighbor association
//! under the current pose, a candidate pose that minimizes the weighted
//! residuals of that association, and a backtracking halving search along
//! the geodesic to the candidate that never accepts an increase of the
//! matcher's cost. Costs are always evaluated with fresh associations, so
//! the recorded trace is non-increasing by construction.

mod odometry;

pub use odometry::{
    odometry, pose_success_rate, rpe, success_rate, voxel_downsample, Matcher, OdometryOptions,
    Trajectory, SUCCESS_ROTATION_DEG,
};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::residual_jacobian;
use crate::manifold::{
    se3_exp, se3_log, Covariance3, Mat3, PointCloud, PoseSE3, Twist6, Vec3, COV_EPSILON,
};
use crate::spatial::KdTree;

/// Outcome of one alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pose: PoseSE3,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Cost at the initial pose followed by the cost after every iteration.
    pub cost_trace: Vec<f64>,
    /// Accepted poses, one per iteration.
    pub pose_trace: Vec<PoseSE3>,
}

/// Loop controls shared by all matchers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the norm of the pose increment twist.
    pub tolerance: f64,
    /// Pairs farther apart than this are treated as outliers with a
    /// constant cost. `None` keeps every pair.
    pub max_correspondence_distance: Option<f64>,
    /// Backtracking halving on every step; off means plain full steps.
    pub line_search: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            max_iterations: 50,
            tolerance: 1e-8,
            max_correspondence_distance: None,
            line_search: true,
        }
    }
}

const MAX_HALVINGS: usize = 10;
const INNER_GN_ITERATIONS: usize = 50;
const INNER_GN_TOLERANCE: f64 = 1e-13;

/// Per-pair residual weighting of a matcher.
enum Weighting<'a> {
    Euclidean,
    Plane { normals: &'a [Vec3] },
    Fused { source: &'a [Covariance3], target: &'a [Covariance3] },
}

impl Weighting<'_> {
    fn weight(&self, src: usize, tgt: usize, rotation: &Mat3) -> Result<Mat3> {
        Ok(match self {
            Weighting::Euclidean => Mat3::identity(),
            Weighting::Plane { normals } => normals[tgt] * normals[tgt].transpose(),
            Weighting::Fused { source, target } => {
                let fused = target[tgt]
                    + rotation * source[src] * rotation.transpose()
                    + Mat3::identity() * COV_EPSILON;
                let chol = fused.cholesky().ok_or(Error::SingularCovariance)?;
                let w = chol.inverse();
                0.5 * (w + w.transpose())
            }
        })
    }

    /// Cost charged to a pair beyond the distance gate; never less than
    /// what the pair would cost at the gate boundary.
    fn outlier_cost(&self, gate2: f64, weight: &Mat3) -> f64 {
        match self {
            Weighting::Euclidean | Weighting::Plane { .. } => gate2,
            Weighting::Fused { .. } => {
                gate2 * weight.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max)
            }
        }
    }
}

struct Association {
    /// (source index, target index, weight) of the inlier pairs.
    pairs: Vec<(usize, usize, Mat3)>,
    cost: f64,
}

struct Problem<'a> {
    source: &'a PointCloud,
    target: &'a PointCloud,
    tree: KdTree,
    weighting: Weighting<'a>,
    gate2: Option<f64>,
}

impl Problem<'_> {
    fn associate(&self, pose: &PoseSE3) -> Result<Association> {
        let mut pairs = Vec::with_capacity(self.source.len());
        let mut cost = 0.0;
        for (i, p) in self.source.points.iter().enumerate() {
            let tp = pose.transform_point(p);
            let (j, d2) = self.tree.nearest(&tp).expect("target is non-empty");
            let w = self.weighting.weight(i, j, &pose.rotation)?;
            match self.gate2 {
                Some(g) if d2 > g => cost += self.weighting.outlier_cost(g, &w),
                _ => {
                    let d = self.target.points[j] - tp;
                    cost += d.dot(&(w * d));
                    pairs.push((i, j, w));
                }
            }
        }
        Ok(Association { pairs, cost })
    }

    fn weighted_cost(&self, assoc: &Association, pose: &PoseSE3) -> f64 {
        assoc
            .pairs
            .iter()
            .map(|&(i, j, w)| {
                let d = self.target.points[j] - pose.transform_point(&self.source.points[i]);
                d.dot(&(w * d))
            })
            .sum()
    }

    /// Gauss–Newton on the association's weighted cost, to convergence.
    fn solve_weighted(&self, assoc: &Association, start: &PoseSE3) -> Result<PoseSE3> {
        let mut pose = *start;
        for _ in 0..INNER_GN_ITERATIONS {
            let (g, h) = gauss_newton_system(self.source, self.target, &assoc.pairs, &pose);
            let delta = solve_step(&g, &h)?;
            let mut step = 1.0;
            let base = self.weighted_cost(assoc, &pose);
            let mut next = pose.retract(&Twist6(delta));
            for _ in 0..MAX_HALVINGS {
                if self.weighted_cost(assoc, &next) <= base {
                    break;
                }
                step *= 0.5;
                next = pose.retract(&Twist6(delta * step));
            }
            pose = next;
            if (delta * step).norm() < INNER_GN_TOLERANCE {
                break;
            }
        }
        Ok(pose)
    }
}

/// Gradient and Gauss–Newton Hessian of `sum d^T W d` under a right
/// perturbation of `pose`, with `d = q - T p`.
pub fn gauss_newton_system(
    source: &PointCloud,
    target: &PointCloud,
    pairs: &[(usize, usize, Mat3)],
    pose: &PoseSE3,
) -> (Vector6<f64>, Matrix6<f64>) {
    let mut g = Vector6::zeros();
    let mut h = Matrix6::zeros();
    for &(i, j, w) in pairs {
        let p = source.points[i];
        let d = target.points[j] - pose.transform_point(&p);
        let jac = residual_jacobian(&p, pose);
        g += 2.0 * jac.transpose() * (w * d);
        h += 2.0 * jac.transpose() * w * jac;
    }
    (g, 0.5 * (h + h.transpose()))
}

fn solve_step(g: &Vector6<f64>, h: &Matrix6<f64>) -> Result<Vector6<f64>> {
    let scale = h.trace().abs().max(f64::MIN_POSITIVE);
    let damped = h + Matrix6::identity() * (1e-12 * scale);
    let chol = damped.cholesky().ok_or_else(|| {
        Error::DegenerateGeometry("Gauss–Newton system is singular; the pose is unconstrained".into())
    })?;
    Ok(-chol.solve(g))
}

/// Closed-form weighted-free Procrustes alignment `argmin sum |q - T p|^2`.
fn procrustes(source: &PointCloud, target: &PointCloud, assoc: &Association) -> Result<PoseSE3> {
    let n = assoc.pairs.len();
    if n < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: n });
    }
    let (mut cp, mut cq) = (Vec3::zeros(), Vec3::zeros());
    for &(i, j, _) in &assoc.pairs {
        cp += source.points[i];
        cq += target.points[j];
    }
    cp /= n as f64;
    cq /= n as f64;
    let mut m = Mat3::zeros();
    for &(i, j, _) in &assoc.pairs {
        m += (target.points[j] - cq) * (source.points[i] - cp).transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Ok(PoseSE3 { rotation: r, translation: cq - r * cp })
}

fn check_spread(points: &[Vec3]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints { needed: 3, got: points.len() });
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let scatter = points.iter().fold(Mat3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::DegenerateGeometry("point spread is collinear".into()));
    }
    Ok(())
}

fn geodesic(from: &PoseSE3, to: &PoseSE3, alpha: f64) -> Result<PoseSE3> {
    if alpha == 1.0 {
        return Ok(*to);
    }
    let xi = se3_log(&from.inverse().compose(to))?;
    Ok(from.compose(&se3_exp(&Twist6(xi.0 * alpha))))
}

fn run(problem: Problem<'_>, init: &PoseSE3, options: &MatchOptions, closed_form: bool) -> Result<MatchResult> {
    if problem.source.is_empty() || problem.target.is_empty() {
        return Err(Error::InvalidInput("cannot align empty clouds".into()));
    }
    check_spread(&problem.source.points)?;
    check_spread(&problem.target.points)?;
    let mut pose = *init;
    let mut assoc = problem.associate(&pose)?;
    let mut result = MatchResult {
        pose,
        iterations: 0,
        final_cost: assoc.cost,
        converged: false,
        cost_trace: vec![assoc.cost],
        pose_trace: Vec::new(),
    };
    for _ in 0..options.max_iterations {
        let candidate = if closed_form {
            procrustes(problem.source, problem.target, &assoc)?
        } else {
            problem.solve_weighted(&assoc, &pose)?
        };
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let trial = geodesic(&pose, &candidate, alpha)?;
            let trial_assoc = problem.associate(&trial)?;
            if !options.line_search || trial_assoc.cost <= assoc.cost {
                accepted = Some((trial, trial_assoc));
                break;
            }
            alpha *= 0.5;
        }
        result.iterations += 1;
        let Some((next, next_assoc)) = accepted else {
            // No descent along the step: the current pose is a fixed point.
            result.converged = true;
            result.cost_trace.push(assoc.cost);
            result.pose_trace.push(pose);
            break;
        };
        let delta = se3_log(&pose.inverse().compose(&next))?.norm();
        pose = next;
        assoc = next_assoc;
        result.cost_trace.push(assoc.cost);
        result.pose_trace.push(pose);
        if delta < options.tolerance {
            result.converged = true;
            break;
        }
    }
    result.pose = pose;
    result.final_cost = assoc.cost;
    Ok(result)
}

fn problem<'a>(
    source: &'a PointCloud,
    target: &'a PointCloud,
    weighting: Weighting<'a>,
    options: &MatchOptions,
) -> Problem<'a> {
    Problem {
        source,
        target,
        tree: KdTree::new(&target.points),
        weighting,
        gate2: options.max_correspondence_distance.map(|d| d * d),
    }
}

/// Classical ICP: nearest neighbors alternated with closed-form Procrustes.
pub fn icp_point2point(
    source: &PointCloud,
    target: &PointCloud,
    init: &PoseSE3,
    options: &MatchOptions,
) -> Result<MatchResult> {
    run(problem(source, target, Weighting::Euclidean, options), init, options, true)
}

/// ICP on the squared point-to-plane distances `(n^T d)^2`.
pub fn icp_point2plane(
    source: &PointCloud,
    target: &PointCloud,
    target_normals: &[Vec3],
    init: &PoseSE3,
    options: &MatchOptions,
) -> Result<MatchResult> {
    if target_normals.len() != target.len() {
        return Err(Error::InvalidInput("one normal per target point is required".into()));
    }
    if target_normals.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
        return Err(Error::InvalidInput("target normals must have unit length".into()));
    }
    run(problem(source, target, Weighting::Plane { normals: target_normals }, options), init, options, false)
}

/// Generalized ICP with fused covariances `C_q + R C_p R^T`.
pub fn gicp_align(
    source: &PointCloud,
    target: &PointCloud,
    source_covs: &[Covariance3],
    target_covs: &[Covariance3],
    init: &PoseSE3,
    options: &MatchOptions,
) -> Result<MatchResult> {
    if source_covs.len() != source.len() || target_covs.len() != target.len() {
        return Err(Error::InvalidInput("one covariance per point is required".into()));
    }
    let weighting = Weighting::Fused { source: source_covs, target: target_covs };
    run(problem(source, target, weighting, options), init, options, false)
}

/// GICP cost `sum d^T (C_q + R C_p R^T + eps I)^{-1} d` with the
/// association held fixed; exposed for derivative checks.
pub fn gicp_pair_weights(
    source_covs: &[Covariance3],
    target_covs: &[Covariance3],
    pairs: &[(usize, usize)],
    rotation: &Mat3,
) -> Result<Vec<(usize, usize, Mat3)>> {
    let weighting = Weighting::Fused { source: source_covs, target: target_covs };
    pairs
        .iter()
        .map(|&(i, j)| Ok((i, j, weighting.weight(i, j, rotation)?)))
        .collect()
}
