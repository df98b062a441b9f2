//! Optimality certificate and implicit differentiation of the QCQP optimum
//! with respect to the per-pair weights.
//!
//! At a certified optimum `x` the KKT conditions read `H x = 0` and
//! `x^T A_l x = b_l`, with `H = Q + sum lambda_l A_l`. Differentiating them
//! with respect to a weight entry `theta` gives
//!
//! ```text
//! 2 [ H   G^T ] [ dx      ]     [ 2 (dQ/dtheta) x ]
//!   [ G   0   ] [ dlambda ] = - [ 0               ]
//! ```
//!
//! where the rows of `G` are `x^T A_l`. The constraints are redundant, so
//! `G` is reduced to a full-row-rank subset by column-pivoted QR of `G^T`
//! and the system is solved in the least-squares sense.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix};

use super::qcqp::{data_matrix, lift, ConstraintSet, HomVec13, Mat13, T_OFFSET};
use super::sdp::SdpSolution;
use crate::error::{Error, Result};
use crate::manifold::{vee, Mat3, MatchedPairs, PoseSE3, Vec3};

/// Independent entries `(a, b)`, `a <= b`, of a symmetric 3x3 weight, in the
/// order used by every per-pair gradient.
pub const WEIGHT_ENTRIES: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

const QR_THRESHOLD: f64 = 1e-9;
const KKT_RANK_THRESHOLD: f64 = 1e-11;

/// Certificate of global optimality at a rounded pose.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub x_hat: HomVec13,
    pub pose: PoseSE3,
    /// Multipliers, refined so that `h_bar * x_hat = 0` holds to round-off.
    pub lambda: Vec<f64>,
    /// `Q + sum lambda_l A_l`.
    pub h_bar: Mat13,
    /// Rows `x^T A_l` of a maximal independent subset of constraints.
    pub g_r: Vec<HomVec13>,
    /// Constraint indices of the rows of `g_r`.
    pub reduced_indices: Vec<usize>,
    /// Smallest eigenvalue of `h_bar`; non-negative up to round-off at a
    /// certified optimum.
    pub min_eigenvalue: f64,
}

impl Certificate {
    pub fn new(
        q: &Mat13,
        constraints: &ConstraintSet,
        sol: &SdpSolution,
        pose: &PoseSE3,
    ) -> Result<Self> {
        let x_hat = lift(pose);
        let grads: Vec<HomVec13> = constraints.matrices.iter().map(|a| a * x_hat).collect();
        let mut lambda = sol.lambda.clone();
        let build_h = |lambda: &[f64]| {
            let mut h = *q;
            for (l, a) in lambda.iter().zip(&constraints.matrices) {
                h += a * *l;
            }
            0.5 * (h + h.transpose())
        };

        // Minimum-norm multiplier correction restoring stationarity at the
        // polished point: solve G^T dlambda = -H x.
        let h = build_h(&lambda);
        let resid = h * x_hat;
        let gt = DMatrix::from_fn(13, grads.len(), |r, c| grads[c][r]);
        let svd = gt.svd(true, true);
        let smax = svd.singular_values.max();
        let correction = svd
            .solve(&DVector::from_iterator(13, resid.iter().map(|v| -v)), smax * 1e-12)
            .map_err(|e| Error::RankDeficientKkt(e.to_string()))?;
        for (l, c) in lambda.iter_mut().zip(correction.iter()) {
            *l += c;
        }
        let h_bar = build_h(&lambda);

        let reduced_indices = pivoted_row_selection(&grads, QR_THRESHOLD);
        let g_r = reduced_indices.iter().map(|&i| grads[i]).collect();
        let min_eigenvalue = h_bar.symmetric_eigenvalues().min();
        Ok(Certificate { x_hat, pose: *pose, lambda, h_bar, g_r, reduced_indices, min_eigenvalue })
    }
}

/// Column-pivoted Gram–Schmidt on the vectors `rows`, stopping when the
/// largest remaining residual falls below `tol` times the largest input
/// norm. Returns the selected indices in pivot order.
fn pivoted_row_selection(rows: &[HomVec13], tol: f64) -> Vec<usize> {
    let scale = rows.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let mut resid: Vec<HomVec13> = rows.to_vec();
    let mut chosen = Vec::new();
    loop {
        let mut best = None;
        let mut best_norm = tol * scale;
        for (i, r) in resid.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let n = r.norm();
            if n > best_norm {
                best_norm = n;
                best = Some(i);
            }
        }
        let Some(k) = best else { break };
        let qk = resid[k] / best_norm;
        chosen.push(k);
        for r in resid.iter_mut() {
            let c = qk.dot(r);
            *r -= qk * c;
        }
        if chosen.len() == 13 {
            break;
        }
    }
    chosen
}

/// Derivatives of the optimum with respect to every independent weight
/// entry of every pair.
#[derive(Debug, Clone)]
pub struct RegistrationGradient {
    /// Per pair, column `k` is `d x_hat / d W[WEIGHT_ENTRIES[k]]`.
    pub dx: Vec<SMatrix<f64, 13, 6>>,
    /// Per pair, column `k` is the twist derivative (right perturbation of
    /// the optimal pose) with respect to `W[WEIGHT_ENTRIES[k]]`.
    pub dxi: Vec<Matrix6<f64>>,
}

/// Implicit gradient of the optimum. Weights enter symmetrically: the entry
/// `(a, b)` with `a != b` moves both `W[(a, b)]` and `W[(b, a)]`.
pub fn implicit_grad(
    cert: &Certificate,
    pairs: &MatchedPairs,
    weights: &[Mat3],
) -> Result<RegistrationGradient> {
    if weights.len() != pairs.len() {
        return Err(Error::InvalidInput("weights/pairs length mismatch".into()));
    }
    let r = cert.g_r.len();
    let n = 13 + r;
    // Rows of G are rescaled to the magnitude of H so that the singular
    // value threshold is meaningful; this only rescales the multipliers.
    let s = cert.h_bar.norm().max(f64::MIN_POSITIVE);
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (13, 13)).copy_from(&(cert.h_bar * 2.0));
    for (k, g) in cert.g_r.iter().enumerate() {
        for c in 0..13 {
            m[(13 + k, c)] = 2.0 * s * g[c];
            m[(c, 13 + k)] = 2.0 * s * g[c];
        }
    }
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > KKT_RANK_THRESHOLD * smax) {
        return Err(Error::RankDeficientKkt(format!(
            "singular value ratio {:e} with {} reduced constraints",
            smin / smax,
            r
        )));
    }
    let pinv = svd
        .pseudo_inverse(KKT_RANK_THRESHOLD * smax)
        .map_err(|e| Error::RankDeficientKkt(e.to_string()))?;
    // Only the first 13 columns of the pseudo-inverse meet a non-zero right
    // hand side, and only its first 13 rows are needed.
    let p = pinv.view((0, 0), (13, 13)).into_owned();
    let p13 = Mat13::from_fn(|i, j| p[(i, j)]);

    let r_hat = cert.pose.rotation;
    let mut dx_all = Vec::with_capacity(pairs.len());
    let mut dxi_all = Vec::with_capacity(pairs.len());
    for i in 0..pairs.len() {
        let dmat = data_matrix(&pairs.source[i], &pairs.target[i]);
        let d = dmat * cert.x_hat;
        let mut dx = SMatrix::<f64, 13, 6>::zeros();
        let mut dxi = Matrix6::zeros();
        for (k, &(a, b)) in WEIGHT_ENTRIES.iter().enumerate() {
            let da = dmat.row(a).transpose();
            let db = dmat.row(b).transpose();
            let dq_x: HomVec13 = if a == b { da * d[a] } else { da * d[b] + db * d[a] };
            let col = -(p13 * (dq_x * 2.0));
            dx.set_column(k, &col);
            dxi.set_column(k, &twist_from_lifted(&col, &r_hat));
        }
        dx_all.push(dx);
        dxi_all.push(dxi);
    }
    Ok(RegistrationGradient { dx: dx_all, dxi: dxi_all })
}

/// Maps a tangent direction of the lifted vector to a right-perturbation
/// twist at rotation `r_hat`.
pub fn twist_from_lifted(dx: &HomVec13, r_hat: &Mat3) -> nalgebra::Vector6<f64> {
    let d_r = Mat3::from_fn(|i, j| dx[super::qcqp::rot_index(i, j)]);
    let d_t: Vec3 = dx.fixed_rows::<3>(T_OFFSET).into_owned();
    let a = r_hat.transpose() * d_r;
    let rho = vee(&(0.5 * (a - a.transpose())));
    let nu = r_hat.transpose() * d_t;
    nalgebra::Vector6::new(rho[0], rho[1], rho[2], nu[0], nu[1], nu[2])
}
