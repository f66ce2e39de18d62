//! Differential-flatness maps from position derivatives to states and inputs.
//!
//! All time derivatives are propagated with [`Jet`]s, so polynomial flat
//! outputs map to exact heading rates, attitude rates and angular accelerations.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{sgn, FwavCommand, FwavParams, VerticalParams};
use crate::jet::{jet_matmul, jet_matrix_derivative, jet_transpose, Jet, JetMatrix, MAX_ORDER};
use crate::planner::{PiecewiseTrajectory, PlannerError};
use crate::se3::{vee, ReducedAttitude, RotationMatrix, Se3Error, UnitQuaternion};

/// Horizontal speed (m/s) below which the velocity azimuth is undefined.
pub const V_EPS: f64 = 0.05;
/// Flapping frequency (Hz) below which thrust direction is unrecoverable.
pub const F_EPS: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlatnessError {
    #[error("horizontal speed {speed:.3e} m/s too small to define heading; supply the heading explicitly")]
    DegenerateHeading { speed: f64 },
    #[error("recovered flapping frequency {f_flap:.3e} Hz is negligible")]
    NegligibleThrust { f_flap: f64 },
    #[error("required lateral reduced attitude {gamma_y:.3} exceeds unit magnitude")]
    InfeasibleHeadingAcceleration { gamma_y: f64 },
    #[error("deflection gain on the {axis} axis vanishes; {input} is unrecoverable")]
    UnrecoverableDeflection { axis: char, input: &'static str },
    #[error("non-finite flat sample")]
    NonFinite,
    #[error(transparent)]
    Attitude(#[from] Se3Error),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// Flat outputs and their derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlatSample {
    pub sigma: Vector3<f64>,
    /// First to fifth derivatives. The fifth is only needed for angular acceleration.
    pub d: [Vector3<f64>; 5],
    /// Optional explicit heading `[ψ, ψ̇, ψ̈, ψ⁽³⁾, ψ⁽⁴⁾]`.
    #[serde(default)]
    pub heading: Option<[f64; 5]>,
}

impl FlatSample {
    pub fn new(sigma: Vector3<f64>, d: [Vector3<f64>; 5]) -> Self {
        Self { sigma, d, heading: None }
    }

    pub fn from_trajectory(traj: &PiecewiseTrajectory, t: f64) -> Result<Self, FlatnessError> {
        let k = traj.derivatives(t, 6)?;
        Ok(Self::new(k[0], [k[1], k[2], k[3], k[4], k[5]]))
    }

    pub fn with_heading(mut self, heading: [f64; 5]) -> Self {
        self.heading = Some(heading);
        self
    }

    fn is_finite(&self) -> bool {
        self.sigma.iter().chain(self.d.iter().flat_map(|v| v.iter())).all(|x| x.is_finite())
            && self.heading.is_none_or(|h| h.iter().all(|x| x.is_finite()))
    }

    /// Jets of position components, order 5.
    fn position_jets(&self) -> [Jet; 3] {
        std::array::from_fn(|j| {
            Jet::from_derivatives(&[self.sigma[j], self.d[0][j], self.d[1][j], self.d[2][j], self.d[3][j], self.d[4][j]])
        })
    }
}

/// How the required yaw acceleration is split between wind-vane attitude and rudder.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadingAllocation {
    /// Rudder yaw torque neglected; lateral tilt alone produces yaw acceleration.
    #[default]
    WindVane,
    /// Minimum-norm split minimizing `Γ_y² + w θ_rud²` subject to the yaw equation.
    RudderAssisted { rudder_weight: f64 },
}

/// Vertical-frame kinematics recovered from a flat sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalFlatState {
    pub psi: f64,
    pub omega_psi: f64,
    pub omega_psi_dot: f64,
    pub vv: Vector3<f64>,
    pub vv_dot: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeThrust {
    pub gamma: ReducedAttitude,
    pub f_flap: f64,
    /// Rudder deflection assumed by the heading allocation (zero for wind-vane).
    pub theta_rud: f64,
    /// `1 − Γ_y²`; small values mean the thrust recovery is ill-conditioned.
    pub lateral_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatDiagnostics {
    pub s_e: f64,
    pub lateral_margin: f64,
}

/// Full state and inputs recovered from a flat sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatStateResult {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub gamma: ReducedAttitude,
    pub psi: f64,
    pub omega_psi: f64,
    pub vv: Vector3<f64>,
    pub vv_dot: Vector3<f64>,
    pub q: UnitQuaternion,
    /// Body-frame angular velocity and acceleration.
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
    pub inputs: FwavCommand,
    pub diagnostics: FlatDiagnostics,
}

fn cst(x: f64) -> Jet {
    Jet::constant(x, MAX_ORDER)
}

/// Heading, vertical-frame velocity and the intermediate jets shared by all maps.
struct HeadingJets {
    psi: Jet,
    vv: [Jet; 3],
}

fn heading_jets(sample: &FlatSample) -> Result<HeadingJets, FlatnessError> {
    if !sample.is_finite() {
        return Err(FlatnessError::NonFinite);
    }
    let pos = sample.position_jets();
    let vel: [Jet; 3] = std::array::from_fn(|j| pos[j].derivative());
    let psi = match sample.heading {
        Some(h) => Jet::from_derivatives(&h),
        None => {
            let speed = sample.d[0].xy().norm();
            if speed < V_EPS {
                return Err(FlatnessError::DegenerateHeading { speed });
            }
            Jet::atan2(&vel[1], &vel[0])
        }
    };
    let (s, c) = psi.sin_cos();
    let vv = [c * vel[0] + s * vel[1], c * vel[1] - s * vel[0], vel[2]];
    Ok(HeadingJets { psi, vv })
}

pub fn flat_to_vertical(sample: &FlatSample, _params: &VerticalParams) -> Result<VerticalFlatState, FlatnessError> {
    let h = heading_jets(sample)?;
    let vv = Vector3::new(h.vv[0].value(), h.vv[1].value(), h.vv[2].value());
    let vv_dot = Vector3::new(h.vv[0].derivative_value(1), h.vv[1].derivative_value(1), h.vv[2].derivative_value(1));
    Ok(VerticalFlatState {
        psi: h.psi.value(),
        omega_psi: h.psi.derivative_value(1),
        omega_psi_dot: h.psi.derivative_value(2),
        vv,
        vv_dot,
    })
}

struct AttitudeJets {
    gamma: [Jet; 3],
    f_sq: Jet,
    theta_rud: Jet,
    lateral_margin: f64,
}

fn attitude_jets(
    h: &HeadingJets,
    params: &VerticalParams,
    allocation: HeadingAllocation,
) -> Result<AttitudeJets, FlatnessError> {
    let m = params.m;
    let vx = h.vv[0];
    let vz = h.vv[2];
    // Specific-force components along the vertical-frame X and Z axes, times m/k_tf.
    let a = -(vx.derivative() + vx.signed_square().scale(params.vk_d_x / m)).scale(m / params.k_tf);
    let b = (vz.derivative() + vz.signed_square().scale(params.vk_d_z / m)).add_scalar(params.g).scale(m / params.k_tf);

    let omega = h.psi.derivative();
    let r = omega.derivative() + omega.signed_square().scale(params.vk_damp);
    let vane = vx.signed_square().scale(params.vk_gamma);
    let gain = vz.signed_square().scale(params.vk_tau_x) + b.scale(params.vk_flap_x);
    let (gamma_y, theta_rud) = match allocation {
        HeadingAllocation::WindVane => {
            if vane.value().abs() < 1e-12 {
                if r.value().abs() < 1e-12 {
                    (cst(0.0), cst(0.0))
                } else {
                    return Err(FlatnessError::InfeasibleHeadingAcceleration { gamma_y: f64::INFINITY });
                }
            } else {
                (r / vane, cst(0.0))
            }
        }
        HeadingAllocation::RudderAssisted { rudder_weight } => {
            let denom = vane * vane + gain * gain.scale(1.0 / rudder_weight);
            if denom.value() < 1e-18 {
                if r.value().abs() < 1e-12 {
                    (cst(0.0), cst(0.0))
                } else {
                    return Err(FlatnessError::InfeasibleHeadingAcceleration { gamma_y: f64::INFINITY });
                }
            } else {
                (vane * r / denom, -(gain.scale(1.0 / rudder_weight) * r / denom))
            }
        }
    };
    if gamma_y.value().abs() >= 1.0 {
        return Err(FlatnessError::InfeasibleHeadingAcceleration { gamma_y: gamma_y.value() });
    }
    let margin = (gamma_y * gamma_y).scale(-1.0).add_scalar(1.0);
    let f_sq = (a * a + b * b).sqrt() / margin.sqrt();
    let f = f_sq.value().max(0.0).sqrt();
    if !(f > F_EPS) {
        return Err(FlatnessError::NegligibleThrust { f_flap: f });
    }
    Ok(AttitudeJets {
        gamma: [a / f_sq, gamma_y, b / f_sq],
        f_sq,
        theta_rud,
        lateral_margin: margin.value(),
    })
}

pub fn flat_to_attitude_and_thrust(
    sample: &FlatSample,
    params: &VerticalParams,
    allocation: HeadingAllocation,
) -> Result<AttitudeThrust, FlatnessError> {
    let h = heading_jets(sample)?;
    let att = attitude_jets(&h, params, allocation)?;
    let gamma = ReducedAttitude::from_unnormalized(Vector3::new(
        att.gamma[0].value(),
        att.gamma[1].value(),
        att.gamma[2].value(),
    ))?;
    Ok(AttitudeThrust {
        gamma,
        f_flap: att.f_sq.value().sqrt(),
        theta_rud: att.theta_rud.value(),
        lateral_margin: att.lateral_margin,
    })
}

/// Rotation `I + 2η[ε]× + 2[ε]×²` built from quaternion jets.
fn rotation_jets(eta: Jet, e: [Jet; 3]) -> JetMatrix {
    let two = |x: Jet| x.scale(2.0);
    let one = cst(1.0);
    [
        [
            one - two(e[1] * e[1] + e[2] * e[2]),
            two(e[0] * e[1] - eta * e[2]),
            two(e[0] * e[2] + eta * e[1]),
        ],
        [
            two(e[0] * e[1] + eta * e[2]),
            one - two(e[0] * e[0] + e[2] * e[2]),
            two(e[1] * e[2] - eta * e[0]),
        ],
        [
            two(e[0] * e[2] - eta * e[1]),
            two(e[1] * e[2] + eta * e[0]),
            one - two(e[0] * e[0] + e[1] * e[1]),
        ],
    ]
}

fn jet_values(m: &JetMatrix, k: usize) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j].derivative_value(k))
}

/// Recovers the full state and the three actuator commands.
///
/// `previous` is the quaternion at the prior sample, used to pick the sign
/// of the tilt quaternion for continuity.
pub fn flat_to_full(
    sample: &FlatSample,
    vparams: &VerticalParams,
    params: &FwavParams,
    allocation: HeadingAllocation,
    previous: Option<&UnitQuaternion>,
) -> Result<FlatStateResult, FlatnessError> {
    let h = heading_jets(sample)?;
    let att = attitude_jets(&h, vparams, allocation)?;
    let [gx, gy, gz] = att.gamma;
    if gz.value() + 1.0 < 1e-6 {
        return Err(Se3Error::DegenerateAttitude { margin: gz.value() + 1.0 }.into());
    }
    // Tilt quaternion [Γz + 1, Γy, −Γx, 0] / √(2(1 + Γz)).
    let norm = gz.add_scalar(1.0).scale(2.0).sqrt();
    let eta = gz.add_scalar(1.0) / norm;
    let tilt = rotation_jets(eta, [gy / norm, -(gx / norm), cst(0.0)]);
    let (s, c) = h.psi.sin_cos();
    let zero = cst(0.0);
    let yaw: JetMatrix = [[c, -s, zero], [s, c, zero], [zero, zero, cst(1.0)]];
    let r = jet_matmul(&yaw, &tilt);
    let r_dot = jet_matrix_derivative(&r);
    // Body rate from RᵀṘ; its derivative gives the angular acceleration.
    let body = jet_matmul(&jet_transpose(&r), &r_dot);
    let omega = vee(&jet_values(&body, 0));
    let omega_dot = vee(&jet_values(&body, 1));

    let rot = RotationMatrix::from_matrix_unchecked(jet_values(&r, 0));
    let mut q = rot.to_quaternion();
    let mut s_e = 1.0;
    if let Some(prev) = previous {
        if q.dot(prev) < 0.0 {
            q = q.negated();
            s_e = -1.0;
        }
    }

    let j = params.inertia();
    let tau = j * omega_dot + omega.cross(&(j * omega));
    let v = sample.d[0];
    let vb = rot.matrix().transpose() * v;
    let speed_term = sgn(vb.z) * vb.x * vb.x;
    let f_sq = att.f_sq.value();
    let gain_x = params.k_tau_x * speed_term + params.k_flap_x * f_sq;
    let gain_y = params.k_tau_y * speed_term + params.k_flap_y * f_sq;
    if gain_x.abs() < 1e-15 {
        return Err(FlatnessError::UnrecoverableDeflection { axis: 'x', input: "rudder" });
    }
    if gain_y.abs() < 1e-15 {
        return Err(FlatnessError::UnrecoverableDeflection { axis: 'y', input: "elevator" });
    }
    let gamma = ReducedAttitude::from_unnormalized(Vector3::new(gx.value(), gy.value(), gz.value()))?;
    Ok(FlatStateResult {
        p: sample.sigma,
        v,
        gamma,
        psi: h.psi.value(),
        omega_psi: h.psi.derivative_value(1),
        vv: Vector3::new(h.vv[0].value(), h.vv[1].value(), h.vv[2].value()),
        vv_dot: Vector3::new(h.vv[0].derivative_value(1), h.vv[1].derivative_value(1), h.vv[2].derivative_value(1)),
        q,
        omega,
        omega_dot,
        inputs: FwavCommand {
            f_flap: f_sq.sqrt(),
            theta_rud: -tau.x / gain_x,
            theta_ele: -tau.y / gain_y,
        },
        diagnostics: FlatDiagnostics { s_e, lateral_margin: att.lateral_margin },
    })
}
