//! Rigid transforms and their tangent space.
//!
//! Conventions used throughout the crate:
//!
//! * A twist is ordered `(rho, nu)`: `rho` is the rotation vector (rad),
//!   `nu` the translational part (m).
//! * Perturbations are applied on the right: `T(xi) = T_hat * Exp(xi)`. Every
//!   Jacobian in the crate (residuals, Gauss-Newton Hessians, registration
//!   gradients) is expressed in this body-frame convention.
//! * `Log` is defined for rotation angles strictly below `pi - 1e-6`; closer
//!   to `pi` the axis is ill-conditioned and [`se3_log`] returns an error.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

const SMALL_ANGLE: f64 = 1e-8;
const LOG_PI_MARGIN: f64 = 1e-6;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Tangent vector of SE(3), ordered rotation first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist6(pub Vector6<f64>);

impl Twist6 {
    pub fn new(rho: Vec3, nu: Vec3) -> Self {
        Twist6(Vector6::new(rho.x, rho.y, rho.z, nu.x, nu.y, nu.z))
    }

    pub fn zero() -> Self {
        Twist6(Vector6::zeros())
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Twist6(Vector6::from_column_slice(v))
    }

    pub fn rho(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn nu(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose after checking orthonormality and handedness to 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = PoseSE3 {
            rotation,
            translation,
        };
        if !pose.is_valid(1e-9) {
            return Err(Error::InvalidInput(format!(
                "not a rotation matrix: |R^T R - I| = {:e}, det = {}",
                (rotation.transpose() * rotation - Mat3::identity()).norm(),
                rotation.determinant()
            )));
        }
        Ok(pose)
    }

    pub fn from_translation(t: Vec3) -> Self {
        PoseSE3 {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        r.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && (r.transpose() * r - Mat3::identity()).norm() < tol
            && (r.determinant() - 1.0).abs() < tol
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * Exp(xi)`.
    pub fn retract(&self, xi: &Twist6) -> PoseSE3 {
        self.compose(&se3_exp(xi))
    }

    /// Geodesic rotation angle of this pose, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Row-major 3x4 matrix `[R | t]`.
    #[rustfmt::skip]
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }
}

/// Angle of a rotation matrix, robust near zero (atan2 instead of acos).
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = vee(r).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Geodesic distance between two rotations.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k * k
}

/// SO(3) logarithm. Errors within `1e-6` of a half turn.
pub fn so3_log(r: &Mat3) -> Result<Vec3> {
    let v = vee(r);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > std::f64::consts::PI - LOG_PI_MARGIN {
        return Err(Error::LogSingularity {
            angle: theta,
            margin: LOG_PI_MARGIN,
        });
    }
    if theta < SMALL_ANGLE {
        // sin(theta)/theta -> 1
        return Ok(v);
    }
    Ok(v * (theta / s))
}

/// Left Jacobian of SO(3): `Exp(w + dw) ~= Exp(J_l(w) dw) Exp(w)`.
pub fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    if theta < 1e-5 {
        return Mat3::identity() + 0.5 * k + k * k / 6.0;
    }
    Mat3::identity()
        + (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

pub fn so3_left_jacobian_inv(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    if theta < 1e-5 {
        return Mat3::identity() - 0.5 * k + k * k / 12.0;
    }
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() - 0.5 * k + coeff * k * k
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q_block(rho: &Vec3, nu: &Vec3) -> Mat3 {
    let p = hat(rho);
    let v = hat(nu);
    let theta2 = rho.norm_squared();
    let theta = theta2.sqrt();
    let (a, b, c) = if theta < 1e-4 {
        (1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0)
    } else {
        let (s, co) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        (
            (theta - s) / t3,
            (theta2 + 2.0 * co - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * co) / (2.0 * t4 * theta),
        )
    };
    0.5 * v + a * (p * v + v * p + p * v * p) + b * (p * p * v + v * p * p - 3.0 * p * v * p)
        + c * (p * v * p * p + p * p * v * p)
}

/// Inverse left Jacobian of SE(3) in `(rho, nu)` ordering:
/// `Log(Exp(d) Exp(xi)) ~= xi + J_l(xi)^-1 d`.
pub fn se3_left_jacobian_inv(xi: &Twist6) -> Mat6 {
    let rho = xi.rho();
    let nu = xi.nu();
    let jinv = so3_left_jacobian_inv(&rho);
    let q = se3_q_block(&rho, &nu);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jinv * q * jinv));
    out
}

/// SE(3) exponential. Below `1e-8` rad the second-order series is used.
pub fn se3_exp(xi: &Twist6) -> PoseSE3 {
    let rho = xi.rho();
    let nu = xi.nu();
    let rotation = so3_exp(&rho);
    PoseSE3 {
        rotation,
        translation: so3_left_jacobian(&rho) * nu,
    }
}

/// SE(3) logarithm; inverse of [`se3_exp`] for angles below `pi - 1e-6`.
pub fn se3_log(t: &PoseSE3) -> Result<Twist6> {
    let rho = so3_log(&t.rotation)?;
    let nu = so3_left_jacobian_inv(&rho) * t.translation;
    Ok(Twist6::new(rho, nu))
}

/// Nearest rotation in Frobenius norm (polar factor with determinant fix).
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        // singular values come sorted in decreasing order
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}
