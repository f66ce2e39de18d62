//! Attitude algebra: unit quaternions, rotation matrices, skew maps, the
//! azimuth (vertical-frame) rotation and reduced-attitude extraction/recovery.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norm tolerance accepted by constructors that check unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("quaternion is not unit length (norm {norm})")]
    NonUnitQuaternion { norm: f64 },
    #[error("reduced attitude is not unit length (norm {norm})")]
    NonUnitReducedAttitude { norm: f64 },
    #[error("reduced attitude is antipodal to e3 (gamma_z + 1 = {margin:e}); attitude recovery is singular")]
    DegenerateAttitude { margin: f64 },
}

/// Unit quaternion `q = [eta, epsilon]` with scalar part first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    eta: f64,
    epsilon: Vector3<f64>,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            eta: 1.0,
            epsilon: Vector3::zeros(),
        }
    }

    /// Checks unit norm within [`UNIT_TOLERANCE`] and renormalizes.
    pub fn new(eta: f64, epsilon: Vector3<f64>) -> Result<Self, Se3Error> {
        let norm = (eta * eta + epsilon.norm_squared()).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Se3Error::NonUnitQuaternion { norm });
        }
        Ok(Self {
            eta: eta / norm,
            epsilon: epsilon / norm,
        })
    }

    /// Normalizes an arbitrary non-zero 4-vector `[eta, e1, e2, e3]`.
    pub fn from_vector(v: Vector4<f64>) -> Result<Self, Se3Error> {
        let norm = v.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Se3Error::NonUnitQuaternion { norm });
        }
        let v = v / norm;
        Ok(Self {
            eta: v[0],
            epsilon: Vector3::new(v[1], v[2], v[3]),
        })
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let axis = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self {
            eta: c,
            epsilon: axis * s,
        }
    }

    /// Pure rotation about inertial Z.
    pub fn from_yaw(psi: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), psi)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn epsilon(&self) -> Vector3<f64> {
        self.epsilon
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.eta, self.epsilon.x, self.epsilon.y, self.epsilon.z)
    }

    pub fn norm(&self) -> f64 {
        (self.eta * self.eta + self.epsilon.norm_squared()).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self {
            eta: self.eta,
            epsilon: -self.epsilon,
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            eta: -self.eta,
            epsilon: -self.epsilon,
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.eta * other.eta + self.epsilon.dot(&other.epsilon)
    }

    pub fn to_rotation(&self) -> RotationMatrix {
        RotationMatrix(rotation_from_parts(self.eta, &self.epsilon))
    }

    /// `½ q ⊗ [0, omega]` for a body-frame angular velocity.
    pub fn derivative(&self, omega: &Vector3<f64>) -> Vector4<f64> {
        let eta_dot = -0.5 * self.epsilon.dot(omega);
        let eps_dot = 0.5 * (self.eta * omega + self.epsilon.cross(omega));
        Vector4::new(eta_dot, eps_dot.x, eps_dot.y, eps_dot.z)
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    /// Hamilton product.
    fn mul(self, rhs: Self) -> Self {
        let eta = self.eta * rhs.eta - self.epsilon.dot(&rhs.epsilon);
        let epsilon = self.eta * rhs.epsilon + rhs.eta * self.epsilon + self.epsilon.cross(&rhs.epsilon);
        let norm = (eta * eta + epsilon.norm_squared()).sqrt();
        Self {
            eta: eta / norm,
            epsilon: epsilon / norm,
        }
    }
}

fn rotation_from_parts(eta: f64, epsilon: &Vector3<f64>) -> Matrix3<f64> {
    let e = skew(epsilon);
    Matrix3::identity() + 2.0 * eta * e + 2.0 * e * e
}

/// Proper rotation matrix (body to inertial when built from an attitude).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }

    /// Shepperd's method; the returned quaternion has `eta >= 0`.
    pub fn to_quaternion(&self) -> UnitQuaternion {
        let m = &self.0;
        let trace = m.trace();
        let v = if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = 2.0 * (1.0 + trace).sqrt();
            Vector4::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            Vector4::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            Vector4::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            Vector4::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        let v = if v[0] < 0.0 { -v } else { v };
        UnitQuaternion::from_vector(v).expect("rotation matrix yields a finite quaternion")
    }

    /// Reduced attitude `Rᵀ e3`.
    pub fn reduced_attitude(&self) -> ReducedAttitude {
        ReducedAttitude::from_unnormalized(self.0.transpose() * Vector3::z())
            .expect("rotation rows are unit length")
    }

    /// Azimuth of the vertical frame: the yaw left after removing the tilt
    /// `R(q_e)` that maps the reduced attitude back onto e3.
    pub fn azimuth(&self) -> f64 {
        let gamma = self.reduced_attitude();
        match reduced_quaternion(&gamma, 1.0) {
            Ok(qe) => {
                let yaw = self.0 * qe.to_rotation().0.transpose();
                wrap_angle(yaw[(1, 0)].atan2(yaw[(0, 0)]))
            }
            // Upside down: fall back to the heading of the body X axis.
            Err(_) => wrap_angle(self.0[(1, 0)].atan2(self.0[(0, 0)])),
        }
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

/// `Γ = Rᵀ(q) e3`, the body-frame direction of inertial Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedAttitude(Vector3<f64>);

impl ReducedAttitude {
    pub fn level() -> Self {
        Self(Vector3::z())
    }

    /// Accepts vectors within [`UNIT_TOLERANCE`] of unit length.
    pub fn new(gamma: Vector3<f64>) -> Result<Self, Se3Error> {
        let norm = gamma.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Se3Error::NonUnitReducedAttitude { norm });
        }
        Ok(Self(gamma / norm))
    }

    /// Normalizes any non-zero vector.
    pub fn from_unnormalized(gamma: Vector3<f64>) -> Result<Self, Se3Error> {
        let norm = gamma.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Se3Error::NonUnitReducedAttitude { norm });
        }
        Ok(Self(gamma / norm))
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = angle.sin().atan2(angle.cos());
    if wrapped <= -PI {
        PI
    } else {
        wrapped
    }
}

/// `R(ψ)`: rotation about inertial Z taking vertical-frame vectors to the
/// inertial frame.
pub fn azimuth_rotation(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

pub fn quat_to_rot(q: &UnitQuaternion) -> Result<RotationMatrix, Se3Error> {
    let norm = q.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Se3Error::NonUnitQuaternion { norm });
    }
    Ok(q.to_rotation())
}

pub fn reduced_attitude(q: &UnitQuaternion) -> ReducedAttitude {
    q.to_rotation().reduced_attitude()
}

/// Tilt quaternion `q_e` with `R(q_e)ᵀ e3 = Γ` and no yaw component.
/// `sign` selects between the two antipodal representatives.
pub fn reduced_quaternion(gamma: &ReducedAttitude, sign: f64) -> Result<UnitQuaternion, Se3Error> {
    let g = gamma.vector();
    let margin = g.z + 1.0;
    if margin < 1e-6 {
        return Err(Se3Error::DegenerateAttitude { margin });
    }
    let axis = g.cross(&Vector3::z());
    let s = if sign < 0.0 { -1.0 } else { 1.0 };
    UnitQuaternion::from_vector(s * Vector4::new(margin, axis.x, axis.y, axis.z))
}

/// `R = R(ψ) R(q_e)` from a reduced attitude and an azimuth.
pub fn recover_attitude(gamma: &ReducedAttitude, psi: f64, sign: f64) -> Result<RotationMatrix, Se3Error> {
    let qe = reduced_quaternion(gamma, sign)?;
    Ok(RotationMatrix(azimuth_rotation(psi) * qe.to_rotation().0))
}

/// Angular velocity extracted from `[ω]× = Ṙ Rᵀ` (inertial frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractedRate {
    pub omega: Vector3<f64>,
    /// Largest entry of the symmetric part of `Ṙ Rᵀ`; zero for a consistent derivative.
    pub symmetric_residual: f64,
}

impl ExtractedRate {
    pub fn is_consistent(&self) -> bool {
        self.symmetric_residual <= 1e-6
    }
}

pub fn angular_velocity_from_rotation(r: &RotationMatrix, r_dot: &Matrix3<f64>) -> ExtractedRate {
    let w = r_dot * r.0.transpose();
    let symmetric_residual = (0.5 * (w + w.transpose())).abs().max();
    if symmetric_residual > 1e-6 {
        log::warn!("rotation derivative inconsistent with SO(3): symmetric part {symmetric_residual:e}");
    }
    ExtractedRate {
        omega: vee(&w),
        symmetric_residual,
    }
}

/// Body-frame counterpart `[ω_B]× = Rᵀ Ṙ`.
pub fn body_rate_from_rotation(r: &RotationMatrix, r_dot: &Matrix3<f64>) -> Vector3<f64> {
    vee(&(r.0.transpose() * r_dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn unit_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
            .prop_map(|(a, b, c, d)| UnitQuaternion::from_vector(Vector4::new(a, b, c, d)).unwrap())
    }

    #[test]
    fn identity_quaternion_gives_identity() {
        let r = quat_to_rot(&UnitQuaternion::identity()).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_x() {
        let q = UnitQuaternion::new(0.0, Vector3::x()).unwrap();
        let r = quat_to_rot(&q).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_maps_e1_to_e2() {
        let q = UnitQuaternion::new(FRAC_PI_4.cos(), Vector3::new(0.0, 0.0, FRAC_PI_4.sin())).unwrap();
        let r = quat_to_rot(&q).unwrap();
        assert_relative_eq!(r.matrix() * Vector3::x(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(matches!(
            UnitQuaternion::new(1.1, Vector3::zeros()),
            Err(Se3Error::NonUnitQuaternion { .. })
        ));
    }

    #[test]
    fn skew_is_cross_product() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
        assert_eq!(skew(&Vector3::z()) * Vector3::x(), Vector3::y());
    }

    #[test]
    fn reduced_attitude_examples() {
        assert_relative_eq!(*reduced_attitude(&UnitQuaternion::identity()).vector(), Vector3::z());
        let q = UnitQuaternion::new(FRAC_PI_4.cos(), Vector3::new(FRAC_PI_4.sin(), 0.0, 0.0)).unwrap();
        // Oracle: build R explicitly and transpose-multiply.
        let r = quat_to_rot(&q).unwrap();
        let oracle = r.matrix().transpose() * Vector3::z();
        assert_relative_eq!(*reduced_attitude(&q).vector(), oracle, epsilon = 1e-15);
        assert_relative_eq!(oracle, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn recover_attitude_examples() {
        let level = ReducedAttitude::level();
        let r = recover_attitude(&level, 0.0, 1.0).unwrap();
        assert_relative_eq!(*r.matrix(), Matrix3::identity(), epsilon = 1e-15);
        let r = recover_attitude(&level, PI / 2.0, 1.0).unwrap();
        assert_relative_eq!(*r.matrix(), azimuth_rotation(PI / 2.0), epsilon = 1e-15);
        let flipped = ReducedAttitude::new(-Vector3::z()).unwrap();
        assert!(matches!(
            recover_attitude(&flipped, 0.0, 1.0),
            Err(Se3Error::DegenerateAttitude { .. })
        ));
    }

    #[test]
    fn angular_velocity_examples() {
        let r = RotationMatrix::identity();
        assert_eq!(angular_velocity_from_rotation(&r, &Matrix3::zeros()).omega, Vector3::zeros());
        let w = angular_velocity_from_rotation(&r, &skew(&Vector3::new(0.0, 0.0, 2.0)));
        assert_relative_eq!(w.omega, Vector3::new(0.0, 0.0, 2.0));
        assert!(w.is_consistent());

        // Yaw ramp psi(t) = t, central differences.
        let t = 0.7;
        let h = 1e-5;
        let r = RotationMatrix::from_matrix_unchecked(azimuth_rotation(t));
        let r_dot = (azimuth_rotation(t + h) - azimuth_rotation(t - h)) / (2.0 * h);
        let w = angular_velocity_from_rotation(&r, &r_dot);
        assert_relative_eq!(w.omega, Vector3::z(), epsilon = 1e-4);
    }

    #[test]
    fn inconsistent_derivative_flagged() {
        let w = angular_velocity_from_rotation(&RotationMatrix::identity(), &Matrix3::identity());
        assert!(!w.is_consistent());
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn shepperd_round_trip() {
        let q = UnitQuaternion::from_axis_angle(Vector3::new(0.3, -0.2, 0.9), 2.5);
        let back = q.to_rotation().to_quaternion();
        assert!(back.dot(&q).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn conjugate_transposes() {
        let q = UnitQuaternion::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 0.8);
        assert_relative_eq!(*q.to_rotation().matrix(), q.conjugate().to_rotation().matrix().transpose(), epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn rotation_is_orthonormal(q in unit_quat()) {
            let r = quat_to_rot(&q).unwrap();
            prop_assert!(r.orthonormality_error() < 1e-9);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn reduced_attitude_is_yaw_invariant(q in unit_quat(), yaw in -PI..PI) {
            let turned = UnitQuaternion::from_yaw(yaw) * q;
            let a = reduced_attitude(&q);
            let b = reduced_attitude(&turned);
            prop_assert!((a.vector() - b.vector()).norm() < 1e-12);
        }

        #[test]
        fn recovery_round_trips(theta in 0.0..(PI - 1e-3), phi in -PI..PI, psi in -PI..PI, neg in any::<bool>()) {
            let gamma = ReducedAttitude::new(Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())).unwrap();
            let sign = if neg { -1.0 } else { 1.0 };
            let r = recover_attitude(&gamma, psi, sign).unwrap();
            prop_assert!((r.reduced_attitude().vector() - gamma.vector()).norm() < 1e-9);
            prop_assert!((wrap_angle(r.azimuth() - psi)).abs() < 1e-7);
        }

        #[test]
        fn skew_antisymmetry(a in prop::array::uniform3(-10.0..10.0f64), b in prop::array::uniform3(-10.0..10.0f64)) {
            let v = Vector3::from(a);
            let w = Vector3::from(b);
            prop_assert!((skew(&v) * w + skew(&w) * v).norm() < 1e-12);
            prop_assert!((skew(&v).transpose() + skew(&v)).norm() == 0.0);
        }
    }
}
