//! Homogeneous QCQP form of weighted point-to-point registration.
//!
//! The decision vector is `x = [h, vec(R), t]` with `vec` column-major, so
//! entry `1 + 3 j + i` holds `R[(i, j)]`. A pair's residual is linear in `x`:
//! `d = q - R p - t = D x` with `D = [q, -(p^T (x) I_3), -I_3]`, hence the
//! cost `sum d^T W d` equals `x^T Q x` with `Q = sum D^T W D`.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::manifold::{Mat3, MatchedPairs, PoseSE3, Vec3};

pub type HomVec13 = SVector<f64, 13>;
pub type Mat13 = SMatrix<f64, 13, 13>;
pub type DataMatrix = SMatrix<f64, 3, 13>;

/// Index of `R[(i, j)]` inside the lifted vector.
pub const fn rot_index(i: usize, j: usize) -> usize {
    1 + 3 * j + i
}

/// First index of the translation block.
pub const T_OFFSET: usize = 10;

/// Lifts a pose to `x = [1, vec(R), t]`.
pub fn lift(pose: &PoseSE3) -> HomVec13 {
    let mut x = HomVec13::zeros();
    x[0] = 1.0;
    for j in 0..3 {
        for i in 0..3 {
            x[rot_index(i, j)] = pose.rotation[(i, j)];
        }
    }
    x.fixed_rows_mut::<3>(T_OFFSET).copy_from(&pose.translation);
    x
}

/// Splits a lifted vector into its (unnormalized) rotation block and
/// translation.
pub fn unlift(x: &HomVec13) -> (Mat3, Vec3) {
    let r = Mat3::from_fn(|i, j| x[rot_index(i, j)]);
    (r, x.fixed_rows::<3>(T_OFFSET).into_owned())
}

/// `D` such that `q - R p - t = D x`.
pub fn data_matrix(p: &Vec3, q: &Vec3) -> DataMatrix {
    let mut d = DataMatrix::zeros();
    for i in 0..3 {
        d[(i, 0)] = q[i];
        for j in 0..3 {
            d[(i, rot_index(i, j))] = -p[j];
        }
        d[(i, T_OFFSET + i)] = -1.0;
    }
    d
}

/// Rejects weights that are not symmetric to 1e-12 relative.
pub fn check_weight(w: &Mat3) -> Result<()> {
    let asym = (w - w.transpose()).amax();
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("weight matrix has non-finite entries".into()));
    }
    if asym > 1e-12 * w.amax().max(f64::MIN_POSITIVE) {
        return Err(Error::AsymmetricWeight(asym));
    }
    Ok(())
}

/// `Q = sum_i D_i^T W_i D_i`.
pub fn build_cost(pairs: &MatchedPairs, weights: &[Mat3]) -> Result<Mat13> {
    if weights.len() != pairs.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} correspondences",
            weights.len(),
            pairs.len()
        )));
    }
    let mut q = Mat13::zeros();
    for (i, w) in weights.iter().enumerate() {
        check_weight(w)?;
        let w = 0.5 * (w + w.transpose());
        let d = data_matrix(&pairs.source[i], &pairs.target[i]);
        q += d.transpose() * w * d;
    }
    Ok(0.5 * (q + q.transpose()))
}

/// The rotation constraints of the lifted problem. `matrices[0]` is the
/// normalizer `e_h e_h^T` with right-hand side 1; every other matrix is
/// homogeneous (`x^T A x = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub matrices: Vec<Mat13>,
    pub rhs: Vec<f64>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// `x^T A_l x - b_l` for every constraint.
    pub fn violations(&self, x: &HomVec13) -> Vec<f64> {
        self.matrices
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| x.dot(&(a * x)) - b)
            .collect()
    }
}

/// Accumulates a symmetric matrix representing a quadratic form.
struct Quad(Mat13);

impl Quad {
    fn new() -> Self {
        Quad(Mat13::zeros())
    }

    /// Adds `c * x_u * x_v`.
    fn add(&mut self, u: usize, v: usize, c: f64) {
        self.0[(u, v)] += 0.5 * c;
        self.0[(v, u)] += 0.5 * c;
    }
}

/// The 25 constraint matrices: normalizer, 6 orthonormality, 9 row/column
/// balancing and 9 right-handedness constraints.
pub fn build_constraints() -> ConstraintSet {
    let r = rot_index;
    let mut mats = Vec::with_capacity(25);

    let mut a0 = Quad::new();
    a0.add(0, 0, 1.0);
    mats.push(a0.0);

    // Columns orthonormal: c_i . c_j = delta_ij h^2.
    for i in 0..3 {
        for j in i..3 {
            let mut a = Quad::new();
            for k in 0..3 {
                a.add(r(k, i), r(k, j), 1.0);
            }
            if i == j {
                a.add(0, 0, -1.0);
            }
            mats.push(a.0);
        }
    }

    // Balancing: |column j|^2 = |row i|^2.
    for i in 0..3 {
        for j in 0..3 {
            let mut a = Quad::new();
            for k in 0..3 {
                a.add(r(k, j), r(k, j), 1.0);
                a.add(r(i, k), r(i, k), -1.0);
            }
            mats.push(a.0);
        }
    }

    // Right-handedness: c_j x c_k = h c_i for cyclic (i, j, k).
    for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
        for comp in 0..3 {
            let (a_, b_) = ((comp + 1) % 3, (comp + 2) % 3);
            let mut a = Quad::new();
            // (c_j x c_k)[comp] = c_j[a_] c_k[b_] - c_j[b_] c_k[a_]
            a.add(r(a_, j), r(b_, k), 1.0);
            a.add(r(b_, j), r(a_, k), -1.0);
            a.add(0, r(comp, i), -1.0);
            mats.push(a.0);
        }
    }

    let mut rhs = vec![0.0; mats.len()];
    rhs[0] = 1.0;
    ConstraintSet { matrices: mats, rhs }
}

/// Row-wise `x^T A_l` for all constraints (the constraint Jacobian up to a
/// factor 2).
pub fn constraint_gradients(constraints: &ConstraintSet, x: &HomVec13) -> Vec<HomVec13> {
    constraints.matrices.iter().map(|a| a * x).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{se3_exp, Twist6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let mut xi: [f64; 6] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let n = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        if n > 3.0 {
            for v in &mut xi[..3] {
                *v *= 3.0 / n;
            }
        }
        se3_exp(&Twist6::from_slice(&xi))
    }

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0))
    }

    #[test]
    fn there_are_25_symmetric_constraints() {
        let c = build_constraints();
        assert_eq!(c.len(), 25);
        for a in &c.matrices {
            assert_eq!(*a, a.transpose());
        }
    }

    #[test]
    fn identity_lift_is_feasible_with_either_sign() {
        let c = build_constraints();
        let x = lift(&PoseSE3::identity());
        for v in c.violations(&x) {
            assert_eq!(v, 0.0);
        }
        for v in c.violations(&-x) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn random_poses_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = build_constraints();
        for _ in 0..100 {
            let x = lift(&rand_pose(&mut rng));
            let worst = c.violations(&x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-12, "violation {worst}");
        }
    }

    #[test]
    fn reflections_violate_handedness() {
        let c = build_constraints();
        let mut x = lift(&PoseSE3::identity());
        x[rot_index(2, 2)] = -1.0;
        let worst = c.violations(&x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst > 0.5);
    }

    #[test]
    fn origin_pair_measures_translation() {
        let pairs = MatchedPairs::new(vec![Vec3::zeros()], vec![Vec3::zeros()]).unwrap();
        let q = build_cost(&pairs, &[Mat3::identity()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let pose = rand_pose(&mut rng);
            let x = lift(&pose);
            let v = x.dot(&(q * x));
            assert!((v - pose.translation.norm_squared()).abs() < 1e-12);
        }
    }

    #[test]
    fn lifted_cost_equals_weighted_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let pairs = MatchedPairs::new(
            (0..n).map(|_| rand_vec(&mut rng)).collect(),
            (0..n).map(|_| rand_vec(&mut rng)).collect(),
        )
        .unwrap();
        let weights: Vec<Mat3> = (0..n)
            .map(|_| {
                let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                a * a.transpose()
            })
            .collect();
        let q = build_cost(&pairs, &weights).unwrap();
        for _ in 0..100 {
            let pose = rand_pose(&mut rng);
            let x = lift(&pose);
            let direct: f64 = (0..n)
                .map(|i| {
                    let d = pairs.residual(i, &pose);
                    d.dot(&(weights[i] * d))
                })
                .sum();
            let lifted = x.dot(&(q * x));
            assert!((direct - lifted).abs() < 1e-10 * (1.0 + direct.abs()));
        }
    }

    /// Block-by-block construction with explicit Kronecker products, as an
    /// independent check of `D^T W D`.
    #[test]
    fn cost_blocks_match_kronecker_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_vec(&mut rng);
        let q = rand_vec(&mut rng);
        let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let w = a * a.transpose();
        let pairs = MatchedPairs::new(vec![p], vec![q]).unwrap();
        let qm = build_cost(&pairs, &[w]).unwrap();

        let wq = w * q;
        let ppt = p * p.transpose();
        let mut expected = Mat13::zeros();
        expected[(0, 0)] = q.dot(&wq);
        for j in 0..3 {
            for i in 0..3 {
                // (p (x) W q)_(3j+i) = p_j (Wq)_i, with a minus sign.
                expected[(0, rot_index(i, j))] = -p[j] * wq[i];
                expected[(rot_index(i, j), 0)] = -p[j] * wq[i];
            }
        }
        for i in 0..3 {
            expected[(0, T_OFFSET + i)] = -wq[i];
            expected[(T_OFFSET + i, 0)] = -wq[i];
        }
        for jb in 0..3 {
            for ja in 0..3 {
                for ib in 0..3 {
                    for ia in 0..3 {
                        // (p p^T) (x) W
                        expected[(rot_index(ia, ja), rot_index(ib, jb))] = ppt[(ja, jb)] * w[(ia, ib)];
                    }
                }
            }
        }
        for j in 0..3 {
            for ia in 0..3 {
                for ib in 0..3 {
                    // p (x) W
                    expected[(rot_index(ia, j), T_OFFSET + ib)] = p[j] * w[(ia, ib)];
                    expected[(T_OFFSET + ib, rot_index(ia, j))] = p[j] * w[(ia, ib)];
                }
            }
        }
        expected.fixed_view_mut::<3, 3>(T_OFFSET, T_OFFSET).copy_from(&w);
        assert!((qm - expected).amax() < 1e-12);
    }

    #[test]
    fn asymmetric_weight_rejected() {
        let pairs = MatchedPairs::new(vec![Vec3::zeros()], vec![Vec3::zeros()]).unwrap();
        let mut w = Mat3::identity();
        w[(0, 1)] = 0.1;
        assert!(matches!(build_cost(&pairs, &[w]), Err(Error::AsymmetricWeight(_))));
    }
}
