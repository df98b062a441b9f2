//! Primal-dual interior-point solver for the 13x13 Shor relaxation
//!
//! ```text
//! min <Q, X>  s.t.  <A_l, X> = b_l,  X >= 0
//! max b^T y   s.t.  Z = Q - sum y_l A_l >= 0
//! ```
//!
//! Infeasible-start path following with the HKM search direction and a
//! Mehrotra predictor-corrector. Linearly dependent constraints are removed
//! before the solve (their multipliers are reported as zero), since the
//! Schur complement is singular otherwise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::qcqp::{ConstraintSet, HomVec13, Mat13};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;
const STEP_FRACTION: f64 = 0.98;
/// Residual level at which a numerically stalled path is accepted.
const ACCEPT_TOL: f64 = 1e-7;
/// Iterations without improving the best iterate before giving up on `tol`.
const STALL_WINDOW: usize = 8;

/// Primal-dual solution of the relaxation, in the units of the input cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    /// Primal matrix `X`.
    pub x: Mat13,
    /// Multipliers `lambda_l` with `H = Q + sum lambda_l A_l`, one per input
    /// constraint; constraints removed as redundant carry zero.
    pub lambda: Vec<f64>,
    pub primal_value: f64,
    pub dual_value: f64,
    /// `primal_value - dual_value`.
    pub gap: f64,
    /// Second-largest over largest eigenvalue of `X`.
    pub rank1_ratio: f64,
    /// Set by the rounding step; see [`super::extract_pose`].
    pub tight: bool,
    pub iterations: usize,
    /// Indices of the constraints kept in the solve.
    pub active_constraints: Vec<usize>,
}

impl SdpSolution {
    /// Certificate matrix `Q + sum lambda_l A_l`.
    pub fn certificate_matrix(&self, q: &Mat13, constraints: &ConstraintSet) -> Mat13 {
        let mut h = *q;
        for (l, a) in self.lambda.iter().zip(&constraints.matrices) {
            h += a * *l;
        }
        0.5 * (h + h.transpose())
    }
}

fn inner(a: &Mat13, b: &Mat13) -> f64 {
    a.component_mul(b).sum()
}

fn sym(a: &Mat13) -> Mat13 {
    0.5 * (a + a.transpose())
}

/// Indices of a maximal linearly independent subset of the constraint
/// matrices, chosen greedily in order by Gram–Schmidt with relative
/// threshold `tol`.
pub fn independent_constraints(constraints: &ConstraintSet, tol: f64) -> Vec<usize> {
    let mut basis: Vec<Mat13> = Vec::new();
    let mut keep = Vec::new();
    for (idx, a) in constraints.matrices.iter().enumerate() {
        let scale = a.norm();
        if scale == 0.0 {
            continue;
        }
        let mut r = *a;
        // Two passes of modified Gram–Schmidt for stability.
        for _ in 0..2 {
            for b in &basis {
                r -= b * inner(&r, b);
            }
        }
        let n = r.norm();
        if n > tol * scale {
            basis.push(r / n);
            keep.push(idx);
        }
    }
    keep
}

/// Largest `alpha <= 1` keeping `m + alpha dm` positive definite, damped.
fn step_length(m: &Mat13, dm: &Mat13) -> Result<f64> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("interior-point iterate".into()))?;
    let l = chol.l();
    let linv = l
        .solve_lower_triangular(&Mat13::identity())
        .ok_or_else(|| Error::NotPositiveDefinite("interior-point iterate".into()))?;
    let s = sym(&(linv * dm * linv.transpose()));
    let min_eig = s.symmetric_eigenvalues().min();
    if min_eig >= 0.0 {
        Ok(1.0)
    } else {
        Ok((STEP_FRACTION * (-1.0 / min_eig)).min(1.0))
    }
}

fn spd_inverse(m: &Mat13, what: &str) -> Result<Mat13> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    Ok(sym(&chol.inverse()))
}

/// Eigenvalues of `X` in descending order with the leading eigenvector.
pub fn leading_eigenpair(x: &Mat13) -> (Vec<f64>, HomVec13) {
    let eig = SymmetricEigen::new(sym(x));
    let mut order: Vec<usize> = (0..13).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let v = eig.eigenvectors.column(order[0]).into_owned();
    (vals, v)
}

/// Second-largest over largest eigenvalue of `X`.
pub fn rank1_ratio(x: &Mat13) -> f64 {
    let (vals, _) = leading_eigenpair(x);
    if vals[0] <= 0.0 {
        return f64::INFINITY;
    }
    vals[1].max(0.0) / vals[0]
}

/// Solves the relaxation to relative duality gap `tol`.
pub fn solve_sdp(q: &Mat13, constraints: &ConstraintSet, tol: f64) -> Result<SdpSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("SDP tolerance must be positive".into()));
    }
    if constraints.matrices.len() != constraints.rhs.len() {
        return Err(Error::InvalidInput("constraint/rhs length mismatch".into()));
    }
    let active = independent_constraints(constraints, 1e-9);
    // Dropped constraints must be implied by the kept ones, right-hand side
    // included; otherwise the system is inconsistent.
    check_consistency(constraints, &active)?;
    if active.iter().all(|&i| constraints.rhs[i] == 0.0) {
        return Err(Error::SdpInfeasible(
            "no normalizing constraint: the only feasible point is X = 0".into(),
        ));
    }

    let scale = {
        let n = q.norm();
        if n > 0.0 { n } else { 1.0 }
    };
    let c = sym(q) / scale;
    let a: Vec<Mat13> = active.iter().map(|&i| constraints.matrices[i]).collect();
    let b = DVector::from_iterator(active.len(), active.iter().map(|&i| constraints.rhs[i]));
    let m = a.len();
    let n = 13.0;

    let mut x = Mat13::identity();
    let mut z = Mat13::identity();
    let mut y = DVector::zeros(m);

    let apply = |xm: &Mat13| DVector::from_iterator(m, a.iter().map(|ai| inner(ai, xm)));
    let adjoint = |v: &DVector<f64>| {
        let mut s = Mat13::zeros();
        for (ai, vi) in a.iter().zip(v.iter()) {
            s += ai * *vi;
        }
        s
    };
    let b_norm = b.norm();
    let c_norm = c.norm();

    let mut iterations = 0;
    // Best iterate by its worst residual, and when it was found.
    let mut best: Option<(f64, Mat13, DVector<f64>, usize)> = None;
    loop {
        let rp = &b - apply(&x);
        let rd = c - adjoint(&y) - z;
        let pobj = inner(&c, &x);
        let dobj = b.dot(&y);
        let rel_gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let comp = inner(&x, &z) / (1.0 + pobj.abs() + dobj.abs());
        let pinf = rp.norm() / (1.0 + b_norm);
        let dinf = rd.norm() / (1.0 + c_norm);
        let last_gap = rel_gap.max(comp);
        if rel_gap < tol && comp < tol && pinf < tol && dinf < tol {
            break;
        }
        let worst = rel_gap.max(comp).max(pinf).max(dinf);
        if best.as_ref().is_none_or(|b| worst < b.0) {
            best = Some((worst, x, y.clone(), iterations));
        }
        let (best_worst, _, _, best_at) = best.as_ref().expect("set above");
        // Round-off can keep the path from reaching `tol` on badly scaled
        // data; once progress stops at an accurate enough point, take it.
        let stalled = iterations >= best_at + STALL_WINDOW && *best_worst < ACCEPT_TOL;
        if stalled || iterations >= MAX_ITERATIONS {
            let (bw, bx, by, _) = best.take().expect("set above");
            let sol = finish(&bx, &by, &c, scale, &active, constraints, iterations);
            if bw < ACCEPT_TOL {
                return Ok(sol);
            }
            return Err(Error::SdpMaxIterations {
                iterations,
                gap: last_gap,
                best: Box::new(sol),
            });
        }
        if x.norm() > 1e12 || z.norm() > 1e12 {
            return Err(Error::SdpInfeasible("iterates diverged".into()));
        }
        iterations += 1;

        match ipm_step(&a, &x, &y, &z, &rp, &rd, n) {
            Ok((xn, yn, zn)) if xn.cholesky().is_some() && zn.cholesky().is_some() => {
                x = xn;
                y = yn;
                z = zn;
            }
            // Round-off breaks positive definiteness of nearly rank-deficient
            // iterates at the very end of the path; the current iterate is
            // then as good as the arithmetic allows.
            failed => {
                if let Some((bw, bx, by, _)) = best.take() {
                    if bw < ACCEPT_TOL {
                        return Ok(finish(&bx, &by, &c, scale, &active, constraints, iterations));
                    }
                }
                return Err(match failed {
                    Err(e) => e,
                    Ok(_) => Error::NotPositiveDefinite("interior-point iterate".into()),
                });
            }
        }
    }

    Ok(finish(&x, &y, &c, scale, &active, constraints, iterations))
}

/// One Mehrotra predictor-corrector step with the HKM direction.
fn ipm_step(
    a: &[Mat13],
    x: &Mat13,
    y: &DVector<f64>,
    z: &Mat13,
    rp: &DVector<f64>,
    rd: &Mat13,
    n: f64,
) -> Result<(Mat13, DVector<f64>, Mat13)> {
    let m = a.len();
    let apply = |xm: &Mat13| DVector::from_iterator(m, a.iter().map(|ai| inner(ai, xm)));
    let adjoint = |v: &DVector<f64>| {
        let mut s = Mat13::zeros();
        for (ai, vi) in a.iter().zip(v.iter()) {
            s += ai * *vi;
        }
        s
    };
    let mu = inner(x, z) / n;
    let zinv = spd_inverse(z, "dual slack")?;
    let gram = DMatrix::from_fn(m, m, |i, j| inner(&a[i], &a[j]))
        .cholesky()
        .ok_or_else(|| Error::SdpInfeasible("dependent constraints".into()))?;

    // Schur complement M_ij = tr(A_i X A_j Z^-1).
    let p: Vec<Mat13> = a.iter().map(|aj| x * aj * zinv).collect();
    let mut schur = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = inner(&a[i], &p[j].transpose());
            schur[(i, j)] = v;
            schur[(j, i)] = v;
        }
    }
    let schur_chol = schur.clone().cholesky();
    let solve = |rhs: DVector<f64>| -> Result<DVector<f64>> {
        match &schur_chol {
            Some(ch) => Ok(ch.solve(&rhs)),
            None => schur
                .clone()
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::SdpInfeasible("singular Schur complement".into())),
        }
    };
    let x_rd_zinv = x * rd * zinv;
    let direction = |k: &Mat13| -> Result<(Mat13, DVector<f64>, Mat13)> {
        let dy = solve(rp - apply(&(k - x_rd_zinv)))?;
        let dz = sym(&(rd - adjoint(&dy)));
        let mut dx = sym(&(k - x * dz * zinv));
        // The Schur system loses accuracy as X approaches rank one; restore
        // A(dX) = rp by a least-squares projection onto the constraint set.
        let miss = rp - apply(&dx);
        dx += adjoint(&gram.solve(&miss));
        Ok((dx, dy, dz))
    };

    // Predictor.
    let (dxa, _, dza) = direction(&(-x))?;
    let ap = step_length(x, &dxa)?;
    let ad = step_length(z, &dza)?;
    let mu_aff = inner(&(x + dxa * ap), &(z + dza * ad)) / n;
    let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

    // Corrector.
    let k = zinv * (sigma * mu) - x - sym(&(dxa * dza * zinv));
    let (dx, dy, dz) = direction(&k)?;
    let ap = step_length(x, &dx)?;
    let ad = step_length(z, &dz)?;
    Ok((sym(&(x + dx * ap)), y + dy * ad, sym(&(z + dz * ad))))
}

fn check_consistency(constraints: &ConstraintSet, active: &[usize]) -> Result<()> {
    let k = active.len();
    if k == constraints.len() {
        return Ok(());
    }
    // Least-squares expansion of each dropped matrix in the kept ones.
    let basis = DMatrix::from_fn(169, k, |r, c| constraints.matrices[active[c]][r]);
    let svd = basis.clone().svd(true, true);
    for idx in 0..constraints.len() {
        if active.contains(&idx) {
            continue;
        }
        let target = DVector::from_column_slice(constraints.matrices[idx].as_slice());
        let coef = svd
            .solve(&target, 1e-12)
            .map_err(|e| Error::SdpInfeasible(e.to_string()))?;
        let implied: f64 = coef
            .iter()
            .zip(active)
            .map(|(c, &i)| c * constraints.rhs[i])
            .sum();
        if (implied - constraints.rhs[idx]).abs() > 1e-9 * (1.0 + implied.abs()) {
            return Err(Error::SdpInfeasible(format!(
                "constraint {idx} contradicts the others"
            )));
        }
    }
    Ok(())
}

fn finish(
    x: &Mat13,
    y: &DVector<f64>,
    c: &Mat13,
    scale: f64,
    active: &[usize],
    constraints: &ConstraintSet,
    iterations: usize,
) -> SdpSolution {
    let mut lambda = vec![0.0; constraints.len()];
    for (k, &idx) in active.iter().enumerate() {
        lambda[idx] = -y[k] * scale;
    }
    let primal = inner(c, x) * scale;
    let dual: f64 = active
        .iter()
        .enumerate()
        .map(|(k, &idx)| y[k] * constraints.rhs[idx])
        .sum::<f64>()
        * scale;
    SdpSolution {
        x: *x,
        lambda,
        primal_value: primal,
        dual_value: dual,
        gap: primal - dual,
        rank1_ratio: rank1_ratio(x),
        tight: false,
        iterations,
        active_constraints: active.to_vec(),
    }
}
