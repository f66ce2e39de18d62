//! Right-hand sides of the full 16-state flapping-wing model and the
//! simplified vertical-frame model, plus a fixed-step RK4 integrator.

use nalgebra::{DVector, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{azimuth_rotation, ReducedAttitude, Se3Error, UnitQuaternion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite state encountered at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error(transparent)]
    Attitude(#[from] Se3Error),
}

/// `sgn(x)·x²` with `sgn(0) = 0`.
#[inline]
pub fn signed_square(x: f64) -> f64 {
    x * x.abs()
}

#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Physical coefficients of the full model. Flat keys, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwavParams {
    pub m: f64,
    pub g: f64,
    pub j_xx: f64,
    pub j_yy: f64,
    pub j_zz: f64,
    #[serde(default)]
    pub j_xy: f64,
    #[serde(default)]
    pub j_xz: f64,
    #[serde(default)]
    pub j_yz: f64,
    pub k_tf: f64,
    pub k_d_x: f64,
    pub k_d_y: f64,
    pub k_d_z: f64,
    pub k_tau_x: f64,
    pub k_tau_y: f64,
    pub k_tau_z: f64,
    pub k_flap_x: f64,
    pub k_flap_y: f64,
    pub k_flap_z: f64,
    pub k_flap_c: f64,
    pub k_rud_c: f64,
    pub k_ele_c: f64,
}

impl FwavParams {
    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.j_xx, self.j_xy, self.j_xz, self.j_xy, self.j_yy, self.j_yz, self.j_xz, self.j_yz, self.j_zz,
        )
    }

    pub fn hover_frequency(&self) -> f64 {
        (self.m * self.g / self.k_tf).sqrt()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m", self.m),
            ("g", self.g),
            ("k_tf", self.k_tf),
            ("k_flap_c", self.k_flap_c),
            ("k_rud_c", self.k_rud_c),
            ("k_ele_c", self.k_ele_c),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(DynamicsError::InvalidInput(format!("{name} must be positive, got {value}")));
            }
        }
        for (name, value) in [("k_d_x", self.k_d_x), ("k_d_y", self.k_d_y), ("k_d_z", self.k_d_z)] {
            if value < 0.0 {
                return Err(DynamicsError::InvalidInput(format!("{name} must be non-negative, got {value}")));
            }
        }
        if self.inertia().cholesky().is_none() {
            return Err(DynamicsError::InvalidInput("inertia must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

/// Lateral velocity treatment in the vertical-frame model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralModel {
    /// `ᵛv_y ≡ 0`: velocity stays aligned with the heading.
    #[default]
    Constrained,
    /// `ᵛv̇_y = ω_ψ ᵛv_x − ᵛk_d,y sgn(ᵛv_y) ᵛv_y² / m`.
    Relaxed,
}

/// Coefficients of the vertical-frame model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerticalParams {
    pub m: f64,
    pub g: f64,
    pub k_tf: f64,
    pub vk_d_x: f64,
    pub vk_d_y: f64,
    pub vk_d_z: f64,
    /// Wind-vane yaw gain.
    pub vk_gamma: f64,
    /// Yaw damping.
    pub vk_damp: f64,
    /// Velocity-induced rudder yaw coefficient.
    pub vk_tau_x: f64,
    /// Flapping-induced rudder yaw coefficient.
    pub vk_flap_x: f64,
    /// Lumped gains of the reduced-attitude yaw proxy.
    pub kbar_gamma: f64,
    pub kbar_flap_x: f64,
    pub l_gamma_min: f64,
    pub l_gamma_max: f64,
    #[serde(default)]
    pub lateral: LateralModel,
}

impl VerticalParams {
    pub fn hover_frequency(&self) -> f64 {
        (self.m * self.g / self.k_tf).sqrt()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, value) in [("m", self.m), ("g", self.g), ("k_tf", self.k_tf)] {
            if !(value > 0.0) {
                return Err(DynamicsError::InvalidInput(format!("{name} must be positive, got {value}")));
            }
        }
        let nonneg = [
            ("vk_d_x", self.vk_d_x),
            ("vk_d_y", self.vk_d_y),
            ("vk_d_z", self.vk_d_z),
            ("vk_gamma", self.vk_gamma),
            ("vk_damp", self.vk_damp),
            ("vk_tau_x", self.vk_tau_x),
            ("vk_flap_x", self.vk_flap_x),
            ("kbar_gamma", self.kbar_gamma),
            ("kbar_flap_x", self.kbar_flap_x),
        ];
        for (name, value) in nonneg {
            if value < 0.0 {
                return Err(DynamicsError::InvalidInput(format!("{name} must be non-negative, got {value}")));
            }
        }
        if !(self.l_gamma_min > 0.0 && self.l_gamma_min <= self.l_gamma_max) {
            return Err(DynamicsError::InvalidInput(format!(
                "need 0 < l_gamma_min <= l_gamma_max, got {} and {}",
                self.l_gamma_min, self.l_gamma_max
            )));
        }
        Ok(())
    }

    /// Control gain multiplying `−Γ_y` in the reduced-attitude yaw proxy.
    pub fn yaw_proxy_gain(&self, vv_z: f64, f_flap: f64, gamma_z: f64) -> f64 {
        self.kbar_gamma * signed_square(vv_z) + self.kbar_flap_x * f_flap * f_flap * gamma_z
    }

    /// Magnitude multiplying `−θ_rud` in the explicit rudder yaw term.
    pub fn rudder_yaw_gain(&self, vv_z: f64, f_flap: f64, gamma_z: f64) -> f64 {
        self.vk_tau_x * signed_square(vv_z) + self.vk_flap_x * f_flap * f_flap * gamma_z
    }
}

/// 16-state model state. Position and velocity are inertial, `omega` is body-frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwavState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion,
    pub omega: Vector3<f64>,
    pub f_flap: f64,
    pub theta_rud: f64,
    pub theta_ele: f64,
}

impl FwavState {
    pub fn at_rest() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            omega: Vector3::zeros(),
            f_flap: 0.0,
            theta_rud: 0.0,
            theta_ele: 0.0,
        }
    }

    pub fn hover(params: &FwavParams) -> Self {
        Self {
            f_flap: params.hover_frequency(),
            ..Self::at_rest()
        }
    }
}

/// Commanded actuator inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FwavCommand {
    pub f_flap: f64,
    pub theta_rud: f64,
    pub theta_ele: f64,
}

/// Time derivative of [`FwavState`]; the quaternion part is `½ q ⊗ ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwavStateDot {
    pub p_dot: Vector3<f64>,
    pub v_dot: Vector3<f64>,
    pub q_dot: Vector4<f64>,
    pub omega_dot: Vector3<f64>,
    pub f_flap_dot: f64,
    pub theta_rud_dot: f64,
    pub theta_ele_dot: f64,
}

/// Vertical-frame model state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalState {
    pub p: Vector3<f64>,
    /// Velocity expressed in the vertical frame.
    pub vv: Vector3<f64>,
    pub psi: f64,
    pub omega_psi: f64,
}

impl VerticalState {
    pub fn at_rest() -> Self {
        Self {
            p: Vector3::zeros(),
            vv: Vector3::zeros(),
            psi: 0.0,
            omega_psi: 0.0,
        }
    }

    /// Inertial velocity `R(ψ) ᵛv`.
    pub fn inertial_velocity(&self) -> Vector3<f64> {
        azimuth_rotation(self.psi) * self.vv
    }
}

/// Source of the vertical-frame yaw acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RudderMode {
    /// Rudder-induced torque from an explicit deflection plus wind-vane term.
    Explicit { theta_rud: f64 },
    /// Reduced-attitude proxy `−(k̄_Γ sgn(ᵛv_z)ᵛv_z² + k̄_flap f² Γ_z) Γ_y`.
    GammaProxy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalInput {
    pub gamma: ReducedAttitude,
    pub f_flap: f64,
    pub rudder: RudderMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalStateDot {
    pub p_dot: Vector3<f64>,
    pub vv_dot: Vector3<f64>,
    pub psi_dot: f64,
    pub omega_psi_dot: f64,
}

pub fn thrust_magnitude(f_flap: f64, params: &FwavParams) -> Result<f64, DynamicsError> {
    if f_flap < 0.0 || !f_flap.is_finite() {
        return Err(DynamicsError::InvalidInput(format!("flapping frequency must be >= 0, got {f_flap}")));
    }
    Ok(params.k_tf * f_flap * f_flap)
}

pub fn body_drag(v_body: &Vector3<f64>, params: &FwavParams) -> Vector3<f64> {
    Vector3::new(
        -params.k_d_x * signed_square(v_body.x),
        -params.k_d_y * signed_square(v_body.y),
        -params.k_d_z * signed_square(v_body.z),
    )
}

/// Rudder/elevator torque. The velocity term uses `sgn(ᴮv_z)·ᴮv_x²` in every row.
pub fn deflection_torque(state: &FwavState, params: &FwavParams) -> Vector3<f64> {
    let vb = state.q.to_rotation().matrix().transpose() * state.v;
    let speed_term = sgn(vb.z) * vb.x * vb.x;
    let f2 = state.f_flap * state.f_flap;
    Vector3::new(
        -(params.k_tau_x * speed_term + params.k_flap_x * f2) * state.theta_rud,
        -(params.k_tau_y * speed_term + params.k_flap_y * f2) * state.theta_ele,
        -(params.k_tau_z * speed_term + params.k_flap_z * f2) * state.theta_rud,
    )
}

fn check_finite(values: &[f64]) -> Result<(), DynamicsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFinite { step: 0, t: f64::NAN })
    }
}

pub fn full_rhs(state: &FwavState, cmd: &FwavCommand, params: &FwavParams) -> Result<FwavStateDot, DynamicsError> {
    check_finite(state.to_vector().as_slice())?;
    let r = *state.q.to_rotation().matrix();
    let vb = r.transpose() * state.v;
    let thrust = params.k_tf * state.f_flap * state.f_flap;
    let force_body = body_drag(&vb, params) + Vector3::new(0.0, 0.0, thrust);
    let v_dot = -params.g * Vector3::z() + r * force_body / params.m;

    let j = params.inertia();
    let j_inv = j
        .try_inverse()
        .ok_or_else(|| DynamicsError::InvalidInput("singular inertia".into()))?;
    let tau = deflection_torque(state, params);
    let omega_dot = j_inv * (tau - state.omega.cross(&(j * state.omega)));

    Ok(FwavStateDot {
        p_dot: state.v,
        v_dot,
        q_dot: state.q.derivative(&state.omega),
        omega_dot,
        f_flap_dot: (cmd.f_flap - state.f_flap) / params.k_flap_c,
        theta_rud_dot: (cmd.theta_rud - state.theta_rud) / params.k_rud_c,
        theta_ele_dot: (cmd.theta_ele - state.theta_ele) / params.k_ele_c,
    })
}

pub fn vertical_rhs(
    state: &VerticalState,
    input: &VerticalInput,
    params: &VerticalParams,
) -> Result<VerticalStateDot, DynamicsError> {
    check_finite(state.to_vector().as_slice())?;
    if input.f_flap < 0.0 {
        return Err(DynamicsError::InvalidInput(format!(
            "flapping frequency must be >= 0, got {}",
            input.f_flap
        )));
    }
    let gamma = input.gamma.vector();
    let vv = state.vv;
    let m = params.m;
    let thrust = params.k_tf * input.f_flap * input.f_flap;
    let w = state.omega_psi;

    let ax = -thrust * gamma.x / m - params.vk_d_x * signed_square(vv.x) / m - w * vv.y;
    let ay = match params.lateral {
        LateralModel::Constrained => 0.0,
        LateralModel::Relaxed => w * vv.x - params.vk_d_y * signed_square(vv.y) / m,
    };
    let az = thrust * gamma.z / m - params.vk_d_z * signed_square(vv.z) / m - params.g;

    let yaw_drive = match input.rudder {
        RudderMode::Explicit { theta_rud } => {
            -params.rudder_yaw_gain(vv.z, input.f_flap, gamma.z) * theta_rud
                + params.vk_gamma * gamma.y * signed_square(vv.x)
        }
        RudderMode::GammaProxy => -params.yaw_proxy_gain(vv.z, input.f_flap, gamma.z) * gamma.y,
    };
    let omega_psi_dot = yaw_drive - params.vk_damp * signed_square(w);

    Ok(VerticalStateDot {
        p_dot: state.inertial_velocity(),
        vv_dot: Vector3::new(ax, ay, az),
        psi_dot: w,
        omega_psi_dot,
    })
}

/// Flattening of a model state for the integrator.
pub trait OdeState: Clone {
    fn to_vector(&self) -> DVector<f64>;
    /// Rebuilds a state, re-normalizing any constrained parts.
    fn from_vector(v: &DVector<f64>) -> Self;
}

impl OdeState for FwavState {
    fn to_vector(&self) -> DVector<f64> {
        let q = self.q.as_vector();
        DVector::from_vec(vec![
            self.p.x,
            self.p.y,
            self.p.z,
            self.v.x,
            self.v.y,
            self.v.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.f_flap,
            self.theta_rud,
            self.theta_ele,
        ])
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        let q = UnitQuaternion::from_vector(Vector4::new(v[6], v[7], v[8], v[9]));
        // A degenerate quaternion poisons the state so the integrator reports it.
        let poison = if q.is_ok() { 0.0 } else { f64::NAN };
        Self {
            p: Vector3::new(v[0], v[1], v[2]),
            v: Vector3::new(v[3], v[4], v[5]),
            q: q.unwrap_or_else(|_| UnitQuaternion::identity()),
            omega: Vector3::new(v[10], v[11], v[12]),
            f_flap: v[13] + poison,
            theta_rud: v[14],
            theta_ele: v[15],
        }
    }
}

impl FwavStateDot {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(16);
        out.extend_from_slice(self.p_dot.as_slice());
        out.extend_from_slice(self.v_dot.as_slice());
        out.extend_from_slice(self.q_dot.as_slice());
        out.extend_from_slice(self.omega_dot.as_slice());
        out.extend_from_slice(&[self.f_flap_dot, self.theta_rud_dot, self.theta_ele_dot]);
        DVector::from_vec(out)
    }
}

impl OdeState for VerticalState {
    fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.p.x,
            self.p.y,
            self.p.z,
            self.vv.x,
            self.vv.y,
            self.vv.z,
            self.psi,
            self.omega_psi,
        ])
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            p: Vector3::new(v[0], v[1], v[2]),
            vv: Vector3::new(v[3], v[4], v[5]),
            psi: v[6],
            omega_psi: v[7],
        }
    }
}

impl VerticalStateDot {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.p_dot.x,
            self.p_dot.y,
            self.p_dot.z,
            self.vv_dot.x,
            self.vv_dot.y,
            self.vv_dot.z,
            self.psi_dot,
            self.omega_psi_dot,
        ])
    }
}

/// One classical RK4 step of `ẋ = f(t, x)`.
pub fn rk4_step<S, F>(state: &S, t: f64, dt: f64, f: &mut F) -> Result<S, DynamicsError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<DVector<f64>, DynamicsError>,
{
    let x0 = state.to_vector();
    let k1 = f(t, state)?;
    let k2 = f(t + 0.5 * dt, &S::from_vector(&(&x0 + &k1 * (0.5 * dt))))?;
    let k3 = f(t + 0.5 * dt, &S::from_vector(&(&x0 + &k2 * (0.5 * dt))))?;
    let k4 = f(t + dt, &S::from_vector(&(&x0 + &k3 * dt)))?;
    let x1 = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(S::from_vector(&x1))
}

/// Time-indexed state log.
pub type StateLog<S> = Vec<(f64, S)>;

/// Fixed-step RK4 from `t = 0`, logging every step including the initial state.
pub fn integrate<S, F>(state: S, dt: f64, duration: f64, mut f: F) -> Result<StateLog<S>, DynamicsError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<DVector<f64>, DynamicsError>,
{
    if !(dt > 0.0) || !(duration >= dt) {
        return Err(DynamicsError::InvalidInput(format!(
            "need dt > 0 and duration >= dt (dt = {dt}, duration = {duration})"
        )));
    }
    let steps = (duration / dt).round() as usize;
    let mut log = Vec::with_capacity(steps + 1);
    let mut current = state;
    log.push((0.0, current.clone()));
    for step in 0..steps {
        let t = step as f64 * dt;
        let next = rk4_step(&current, t, dt, &mut f).map_err(|e| match e {
            DynamicsError::NonFinite { .. } => DynamicsError::NonFinite { step, t },
            other => other,
        })?;
        if next.to_vector().iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::NonFinite { step: step + 1, t: t + dt });
        }
        current = next;
        log.push(((step + 1) as f64 * dt, current.clone()));
    }
    Ok(log)
}

/// Integrates the full model under a time-varying command.
pub fn integrate_full(
    state: FwavState,
    params: &FwavParams,
    mut command: impl FnMut(f64) -> FwavCommand,
    dt: f64,
    duration: f64,
) -> Result<StateLog<FwavState>, DynamicsError> {
    integrate(state, dt, duration, |t, s: &FwavState| {
        Ok(full_rhs(s, &command(t), params)?.to_vector())
    })
}

/// Integrates the vertical model under a time-varying input.
pub fn integrate_vertical(
    state: VerticalState,
    params: &VerticalParams,
    mut input: impl FnMut(f64) -> Result<VerticalInput, DynamicsError>,
    dt: f64,
    duration: f64,
) -> Result<StateLog<VerticalState>, DynamicsError> {
    integrate(state, dt, duration, |t, s: &VerticalState| {
        Ok(vertical_rhs(s, &input(t)?, params)?.to_vector())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> FwavParams {
        defaults::fwav_params()
    }

    fn vparams() -> VerticalParams {
        defaults::vertical_params()
    }

    #[test]
    fn thrust_examples() {
        let mut p = params();
        assert_eq!(thrust_magnitude(0.0, &p).unwrap(), 0.0);
        p.k_tf = 1e-5;
        assert_relative_eq!(thrust_magnitude(20.0, &p).unwrap(), 4e-3, epsilon = 1e-15);
        assert_relative_eq!(thrust_magnitude(40.0, &p).unwrap(), 4.0 * thrust_magnitude(20.0, &p).unwrap());
        assert!(thrust_magnitude(-1.0, &p).is_err());
    }

    #[test]
    fn drag_examples() {
        let mut p = params();
        assert_eq!(body_drag(&Vector3::zeros(), &p), Vector3::zeros());
        p.k_d_x = 0.02;
        assert_relative_eq!(body_drag(&Vector3::new(3.0, 0.0, 0.0), &p), Vector3::new(-0.18, 0.0, 0.0), epsilon = 1e-15);
        let v = Vector3::new(0.4, -1.2, 2.0);
        assert_eq!(body_drag(&-v, &p), -body_drag(&v, &p));
    }

    #[test]
    fn deflection_torque_examples() {
        let p = params();
        let mut s = FwavState::hover(&p);
        s.v = Vector3::new(1.0, 0.0, 0.3);
        assert_eq!(deflection_torque(&s, &p), Vector3::zeros());

        let mut still = FwavState::at_rest();
        still.theta_rud = 0.3;
        still.theta_ele = -0.2;
        assert_eq!(deflection_torque(&still, &p), Vector3::zeros());

        s.theta_rud = 0.1;
        s.theta_ele = 0.05;
        let a = deflection_torque(&s, &p);
        s.theta_rud = -0.1;
        let b = deflection_torque(&s, &p);
        assert_relative_eq!(a.x, -b.x);
        assert_relative_eq!(a.z, -b.z);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn full_rhs_examples() {
        let p = params();
        let d = full_rhs(&FwavState::at_rest(), &FwavCommand::default(), &p).unwrap();
        assert_relative_eq!(d.v_dot, Vector3::new(0.0, 0.0, -p.g));

        let hover = FwavState::hover(&p);
        let cmd = FwavCommand { f_flap: hover.f_flap, ..Default::default() };
        let d = full_rhs(&hover, &cmd, &p).unwrap();
        assert!(d.v_dot.norm() < 1e-12);
        assert!(d.omega_dot.norm() < 1e-12);

        let mut p2 = p;
        p2.k_flap_c = 0.1;
        let cmd = FwavCommand { f_flap: 10.0, ..Default::default() };
        let d = full_rhs(&FwavState::at_rest(), &cmd, &p2).unwrap();
        assert_relative_eq!(d.f_flap_dot, 100.0);
    }

    #[test]
    fn full_rhs_rejects_nan() {
        let mut s = FwavState::at_rest();
        s.p.x = f64::NAN;
        assert!(full_rhs(&s, &FwavCommand::default(), &params()).is_err());
    }

    #[test]
    fn vertical_hover_equilibrium() {
        let p = vparams();
        let input = VerticalInput {
            gamma: ReducedAttitude::level(),
            f_flap: p.hover_frequency(),
            rudder: RudderMode::Explicit { theta_rud: 0.0 },
        };
        let d = vertical_rhs(&VerticalState::at_rest(), &input, &p).unwrap();
        assert!(d.to_vector().norm() < 1e-12);
    }

    #[test]
    fn vertical_lateral_constraint_consistent() {
        let mut p = vparams();
        p.lateral = LateralModel::Relaxed;
        let mut s = VerticalState::at_rest();
        s.vv = Vector3::new(1.0, 0.0, 0.1);
        let input = VerticalInput {
            gamma: ReducedAttitude::new(Vector3::new(-0.1, 0.0, 0.99f64.sqrt())).unwrap(),
            f_flap: p.hover_frequency(),
            rudder: RudderMode::GammaProxy,
        };
        assert_eq!(vertical_rhs(&s, &input, &p).unwrap().vv_dot.y, 0.0);
    }

    #[test]
    fn wind_vane_turns_toward_positive_gamma_y() {
        // With damping off, ω̇_ψ = ᵛk_Γ Γ_y sgn(ᵛv_x) ᵛv_x² > 0 for Γ_y > 0, ᵛv_x > 0.
        let mut p = vparams();
        p.vk_damp = 0.0;
        let mut s = VerticalState::at_rest();
        s.vv.x = 0.8;
        let gy: f64 = 0.05;
        let input = VerticalInput {
            gamma: ReducedAttitude::new(Vector3::new(-0.1, gy, (1.0 - 0.01 - gy * gy).sqrt())).unwrap(),
            f_flap: p.hover_frequency(),
            rudder: RudderMode::Explicit { theta_rud: 0.0 },
        };
        let d = vertical_rhs(&s, &input, &p).unwrap();
        assert_relative_eq!(d.omega_psi_dot, p.vk_gamma * gy * 0.64, epsilon = 1e-12);
        assert!(d.omega_psi_dot > 0.0);
    }

    #[test]
    fn integrate_zero_dynamics_is_constant() {
        let p = FwavParams {
            g: 0.0,
            k_d_x: 0.0,
            k_d_y: 0.0,
            k_d_z: 0.0,
            k_tau_x: 0.0,
            k_tau_y: 0.0,
            k_tau_z: 0.0,
            k_flap_x: 0.0,
            k_flap_y: 0.0,
            k_flap_z: 0.0,
            ..params()
        };
        let mut s = FwavState::at_rest();
        s.p = Vector3::new(1.0, 2.0, 3.0);
        let log = integrate_full(s, &p, |_| FwavCommand::default(), 1e-3, 0.5).unwrap();
        assert_eq!(log.last().unwrap().1.p, s.p);
    }

    #[test]
    fn free_fall_is_exact() {
        let p = FwavParams { k_d_x: 0.0, k_d_y: 0.0, k_d_z: 0.0, ..params() };
        let log = integrate_full(FwavState::at_rest(), &p, |_| FwavCommand::default(), 1e-3, 1.0).unwrap();
        let last = log.last().unwrap();
        assert_relative_eq!(last.0, 1.0, epsilon = 1e-12);
        assert_relative_eq!(last.1.v.z, -p.g, epsilon = 1e-9);
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        // Richardson check on a spinning, pitching vehicle. The speed torque term
        // switches sign with the body vertical velocity, so it is disabled here.
        let p = FwavParams { k_tau_x: 0.0, k_tau_y: 0.0, k_tau_z: 0.0, ..params() };
        let mut s = FwavState::hover(&p);
        s.omega = Vector3::new(0.5, -0.8, 1.2);
        s.v = Vector3::new(1.0, 0.2, -0.3);
        let cmd = |t: f64| FwavCommand { f_flap: 14.0 + t.sin(), theta_rud: 0.1, theta_ele: -0.05 };
        let run = |dt: f64| integrate_full(s, &p, cmd, dt, 1.0).unwrap().last().unwrap().1.to_vector();
        let a = run(0.008);
        let b = run(0.004);
        let c = run(0.002);
        let ratio = (&a - &b).norm() / (&b - &c).norm();
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn nan_aborts_with_step_index() {
        let p = params();
        let err = integrate(FwavState::at_rest(), 1e-3, 0.1, |t, s: &FwavState| {
            let mut d = full_rhs(s, &FwavCommand::default(), &p)?.to_vector();
            if t > 0.05 {
                d[0] = f64::NAN;
            }
            Ok(d)
        })
        .unwrap_err();
        assert!(matches!(err, DynamicsError::NonFinite { step, .. } if step >= 50));
    }

    #[test]
    fn ballistic_energy_conserved() {
        let p = FwavParams {
            k_d_x: 0.0,
            k_d_y: 0.0,
            k_d_z: 0.0,
            ..params()
        };
        let mut s = FwavState::at_rest();
        s.v = Vector3::new(1.0, -0.5, 4.0);
        s.omega = Vector3::new(0.3, 0.1, -0.2);
        let energy = |s: &FwavState| 0.5 * s.v.norm_squared() + p.g * s.p.z;
        let log = integrate_full(s, &p, |_| FwavCommand::default(), 1e-3, 5.0).unwrap();
        let e0 = energy(&s);
        for (_, x) in &log {
            assert!((energy(x) - e0).abs() < 1e-6);
            assert!((x.q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_model_agrees_with_full_model_without_yaw() {
        // Fixed pitch-forward attitude, equal drag coefficients.
        let fp = params();
        let mut vp = vparams();
        vp.vk_d_x = fp.k_d_x;
        vp.vk_d_z = fp.k_d_z;
        vp.vk_damp = 0.0;
        let tilt = 0.15;
        let q = UnitQuaternion::from_axis_angle(Vector3::y(), tilt);
        let gamma = crate::se3::reduced_attitude(&q);
        let f = fp.hover_frequency() * 1.02;
        let mut full = FwavState::hover(&fp);
        full.q = q;
        full.f_flap = f;
        let full_log = integrate_full(full, &fp, |_| FwavCommand { f_flap: f, ..Default::default() }, 1e-3, 2.0).unwrap();
        let input = VerticalInput { gamma, f_flap: f, rudder: RudderMode::GammaProxy };
        let vlog = integrate_vertical(VerticalState::at_rest(), &vp, |_| Ok(input), 1e-3, 2.0).unwrap();
        let pf = full_log.last().unwrap().1.p;
        let pv = vlog.last().unwrap().1.p;
        assert!((pf - pv).norm() <= 0.05 * pf.norm(), "full {pf:?} vertical {pv:?}");
    }

    proptest! {
        #[test]
        fn forward_drag_row_is_odd(vx in -3.0..3.0f64, gx in -0.5..0.5f64) {
            let p = vparams();
            let gz = (1.0 - gx * gx).sqrt();
            let f = p.hover_frequency();
            let eval = |vx: f64, gx: f64| {
                let mut s = VerticalState::at_rest();
                s.vv.x = vx;
                let input = VerticalInput {
                    gamma: ReducedAttitude::new(Vector3::new(gx, 0.0, gz)).unwrap(),
                    f_flap: f,
                    rudder: RudderMode::GammaProxy,
                };
                vertical_rhs(&s, &input, &p).unwrap().vv_dot.x
            };
            prop_assert!((eval(vx, gx) + eval(-vx, -gx)).abs() < 1e-12);
        }
    }
}
