//! Cascaded tracking controller: saturated position loop, thrust and attitude
//! decomposition in the vertical frame, hysteretic heading loop and the
//! simplified rudder/elevator laws.

use std::f64::consts::SQRT_2;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{sgn, signed_square, VerticalParams};
use crate::se3::{azimuth_rotation, wrap_angle, ReducedAttitude};

/// Floor (m/s²) on the combined specific force below which the decomposition
/// holds its previous output.
pub const A_EPS: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("combined specific force {norm:.3e} m/s² below decomposition floor")]
    DegenerateDecomposition { norm: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Diagonal of `K_p`.
    pub kp: [f64; 3],
    /// Diagonal of `K_v`.
    pub kv: [f64; 3],
    pub k_psi: f64,
    pub k_omega: f64,
    /// Hysteresis threshold on `sin δ_ψ`.
    pub delta: f64,
    pub l_gamma_min: f64,
    pub l_gamma_max: f64,
    pub k_rud: f64,
    pub k_ele: f64,
    pub k_omega_x: f64,
    pub k_omega_y: f64,
    pub filter_wn: f64,
    pub filter_zeta: f64,
    /// Bound on the feedforward heading rate `ψ̇_d`.
    pub psi_rate_ff_cap: f64,
    /// Bound on `|Γ_yd|` before composition.
    #[serde(default = "default_gamma_y_max")]
    pub gamma_y_max: f64,
    #[serde(default)]
    pub heading_reference: HeadingReference,
}

fn default_gamma_y_max() -> f64 {
    0.3
}

/// How the desired azimuth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingReference {
    /// Along the horizontal desired velocity; the forward acceleration is the
    /// signed projection of `a_d` on the current heading.
    #[default]
    Velocity,
    /// Along the horizontal desired acceleration, with non-negative forward acceleration.
    Acceleration,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self::nominal()
    }
}

impl ControllerGains {
    /// Gains used for tracking runs.
    pub fn nominal() -> Self {
        Self {
            kp: [1.5, 1.5, 1.5],
            kv: [3.0, 3.0, 3.0],
            k_psi: 1.0,
            k_omega: 2.0,
            delta: 0.3,
            l_gamma_min: 5.0,
            l_gamma_max: 20.0,
            k_rud: 0.5,
            k_ele: 2.0,
            k_omega_x: 0.05,
            k_omega_y: 0.4,
            filter_wn: 20.0,
            filter_zeta: 1.0,
            psi_rate_ff_cap: 1.5,
            gamma_y_max: default_gamma_y_max(),
            heading_reference: HeadingReference::Velocity,
        }
    }

    /// Heading gains for which the jump-decrease margin is real and wide.
    pub fn certified() -> Self {
        Self {
            k_psi: 0.3,
            k_omega: 1.0,
            delta: 0.5,
            psi_rate_ff_cap: 0.5,
            ..Self::nominal()
        }
    }

    pub fn kp_vec(&self) -> Vector3<f64> {
        Vector3::from(self.kp)
    }

    pub fn kv_vec(&self) -> Vector3<f64> {
        Vector3::from(self.kv)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            ("kp", self.kp.iter().copied().fold(f64::INFINITY, f64::min)),
            ("kv", self.kv.iter().copied().fold(f64::INFINITY, f64::min)),
            ("k_psi", self.k_psi),
            ("k_omega", self.k_omega),
            ("delta", self.delta),
            ("l_gamma_min", self.l_gamma_min),
            ("k_rud", self.k_rud),
            ("k_ele", self.k_ele),
            ("k_omega_x", self.k_omega_x),
            ("k_omega_y", self.k_omega_y),
            ("filter_wn", self.filter_wn),
            ("filter_zeta", self.filter_zeta),
            ("psi_rate_ff_cap", self.psi_rate_ff_cap),
            ("gamma_y_max", self.gamma_y_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ControlError::InvalidGains(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if self.delta >= 1.0 {
            return Err(ControlError::InvalidGains(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.filter_zeta > 2.0 {
            return Err(ControlError::InvalidGains(format!("filter_zeta must be <= 2, got {}", self.filter_zeta)));
        }
        if !(self.l_gamma_min <= self.l_gamma_max && self.l_gamma_max.is_finite()) {
            return Err(ControlError::InvalidGains(format!(
                "need l_gamma_min <= l_gamma_max, got {} and {}",
                self.l_gamma_min, self.l_gamma_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackingErrors {
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub e_psi: f64,
    pub e_omega_psi: f64,
    pub delta_psi: f64,
}

/// `e_p = σ_r − p`, `e_v = v_d − v`.
pub fn position_errors(
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    sigma_r: &Vector3<f64>,
    v_d: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    (sigma_r - p, v_d - v)
}

/// `√2 − √(1 + cos δ_ψ)`.
pub fn heading_error(delta_psi: f64) -> f64 {
    SQRT_2 - (1.0 + delta_psi.cos()).max(0.0).sqrt()
}

fn tanh3(v: &Vector3<f64>) -> Vector3<f64> {
    v.map(f64::tanh)
}

pub fn desired_velocity(sigma_r_dot: &Vector3<f64>, e_p: &Vector3<f64>, kp: &Vector3<f64>) -> Vector3<f64> {
    sigma_r_dot + kp.component_mul(&tanh3(e_p))
}

/// `a_d = v̇_d + K_v K_p⁻¹ tanh(e_p) + K_v tanh(e_v)`.
pub fn desired_acceleration(
    v_d_dot: &Vector3<f64>,
    e_p: &Vector3<f64>,
    e_v: &Vector3<f64>,
    gains: &ControllerGains,
) -> Vector3<f64> {
    let kv = gains.kv_vec();
    v_d_dot + kv.component_div(&gains.kp_vec()).component_mul(&tanh3(e_p)) + kv.component_mul(&tanh3(e_v))
}

/// Exact derivative of `v_d` given the reference acceleration and the current velocity.
pub fn analytic_v_d_dot(
    sigma_r_ddot: &Vector3<f64>,
    sigma_r_dot: &Vector3<f64>,
    v: &Vector3<f64>,
    e_p: &Vector3<f64>,
    kp: &Vector3<f64>,
) -> Vector3<f64> {
    let sech2 = e_p.map(|e| 1.0 - e.tanh().powi(2));
    sigma_r_ddot + kp.component_mul(&sech2).component_mul(&(sigma_r_dot - v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `None` when the horizontal acceleration is below [`A_EPS`].
    pub psi_d: Option<f64>,
    pub f_flap: f64,
    pub gamma_xd: f64,
    pub gamma_zd: f64,
    pub vc_x: f64,
    pub vc_z: f64,
}

/// Splits the desired acceleration into azimuth, flapping frequency and the
/// longitudinal reduced-attitude components. `vv` is the vertical-frame velocity.
pub fn decompose(a_d: &Vector3<f64>, vv: &Vector3<f64>, params: &VerticalParams) -> Result<Decomposition, ControlError> {
    let vv_xd = a_d.x.hypot(a_d.y);
    let psi_d = (vv_xd > A_EPS).then(|| a_d.y.atan2(a_d.x));
    let vc_x = vv_xd + params.vk_d_x * signed_square(vv.x) / params.m;
    let vc_z = a_d.z + params.g;
    let norm = vc_x.hypot(vc_z);
    if !(norm > A_EPS) {
        return Err(ControlError::DegenerateDecomposition { norm });
    }
    Ok(Decomposition {
        psi_d,
        f_flap: (params.m * norm / params.k_tf).sqrt(),
        gamma_xd: -vc_x / norm,
        gamma_zd: vc_z / norm,
        vc_x,
        vc_z,
    })
}

/// Decomposition with the heading along the horizontal desired velocity `v_d`.
/// The forward rate is `a_d` projected on the current heading `psi`, so braking
/// pitches the vehicle back instead of turning it around.
pub fn decompose_velocity_aligned(
    a_d: &Vector3<f64>,
    v_d: &Vector3<f64>,
    psi: f64,
    vv: &Vector3<f64>,
    params: &VerticalParams,
) -> Result<Decomposition, ControlError> {
    let psi_d = (v_d.x.hypot(v_d.y) > crate::flatness::V_EPS).then(|| v_d.y.atan2(v_d.x));
    let (s, c) = psi.sin_cos();
    let vc_x = c * a_d.x + s * a_d.y + params.vk_d_x * signed_square(vv.x) / params.m;
    let vc_z = a_d.z + params.g;
    let norm = vc_x.hypot(vc_z);
    if !(norm > A_EPS) {
        return Err(ControlError::DegenerateDecomposition { norm });
    }
    Ok(Decomposition {
        psi_d,
        f_flap: (params.m * norm / params.k_tf).sqrt(),
        gamma_xd: -vc_x / norm,
        gamma_zd: vc_z / norm,
        vc_x,
        vc_z,
    })
}

/// `ω_ψd = sat(ψ̇_d) + k_ψ h √(1 − cos δ_ψ)`.
pub fn heading_rate_command(delta_psi: f64, psi_d_dot: f64, h_psi: f64, k_psi: f64, cap: f64) -> f64 {
    psi_d_dot.clamp(-cap, cap) + k_psi * h_psi * (1.0 - delta_psi.cos()).max(0.0).sqrt()
}

/// Hysteretic update of the rotation-direction logic variable.
pub fn hysteresis_update(h_psi: f64, delta_psi: f64, delta: f64) -> f64 {
    let (s, c) = delta_psi.sin_cos();
    let switch = (h_psi * s <= -delta && c <= 0.0) || c > 0.0;
    if switch && s != 0.0 {
        sgn(s)
    } else {
        h_psi
    }
}

/// Desired lateral reduced-attitude component of the heading loop.
pub fn gamma_y_command(
    e_omega_psi: f64,
    delta_psi: f64,
    h_psi: f64,
    omega_psi_d_dot: f64,
    gains: &ControllerGains,
) -> f64 {
    let k = gains.k_omega;
    let ff = 0.5 / gains.k_psi * h_psi * (1.0 - delta_psi.cos()).max(0.0).sqrt() + omega_psi_d_dot;
    -(k / gains.l_gamma_min - k / gains.l_gamma_max) * sgn(e_omega_psi) * ff.abs() - k / gains.l_gamma_max * ff
        - k * e_omega_psi
}

pub fn compose_reduced_attitude(gamma_xd: f64, gamma_yd: f64, gamma_zd: f64) -> Result<ReducedAttitude, ControlError> {
    ReducedAttitude::from_unnormalized(Vector3::new(gamma_xd, gamma_yd, gamma_zd))
        .map_err(|_| ControlError::InvalidInput(format!("cannot normalize ({gamma_xd}, {gamma_yd}, {gamma_zd})")))
}

/// Second-order low-pass `ẍ = ω_n²(u − x) − 2ζω_n ẋ` whose rate state serves
/// as the derivative estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandFilter {
    pub wn: f64,
    pub zeta: f64,
    value: f64,
    rate: f64,
    primed: bool,
}

impl CommandFilter {
    pub fn new(wn: f64, zeta: f64) -> Self {
        Self { wn, zeta, value: 0.0, rate: 0.0, primed: false }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    /// Snaps the state to `value` with the given rate.
    pub fn reset(&mut self, value: f64, rate: f64) {
        self.value = value;
        self.rate = rate;
        self.primed = true;
    }

    /// Advances by `dt` under a held input. An unprimed filter snaps to the input.
    pub fn update(&mut self, input: f64, dt: f64) -> (f64, f64) {
        if !self.primed {
            self.reset(input, 0.0);
            return (self.value, self.rate);
        }
        let (wn, z) = (self.wn, self.zeta);
        let f = |x: f64, r: f64| (r, wn * wn * (input - x) - 2.0 * z * wn * r);
        let (x, r) = (self.value, self.rate);
        let k1 = f(x, r);
        let k2 = f(x + 0.5 * dt * k1.0, r + 0.5 * dt * k1.1);
        let k3 = f(x + 0.5 * dt * k2.0, r + 0.5 * dt * k2.1);
        let k4 = f(x + dt * k3.0, r + dt * k3.1);
        self.value = x + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        self.rate = r + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        (self.value, self.rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InnerCommand {
    pub theta_rud: f64,
    pub theta_ele: f64,
}

/// Rudder and elevator laws driving `Γ` toward `Γ_p` with rate damping.
pub fn inner_attitude(
    gamma_p: &ReducedAttitude,
    gamma: &ReducedAttitude,
    omega: &Vector3<f64>,
    gains: &ControllerGains,
) -> InnerCommand {
    InnerCommand {
        theta_rud: gains.k_rud * (gamma_p.y() * gamma.z() - gamma_p.z() * gamma.y()) - gains.k_omega_x * omega.x,
        theta_ele: gains.k_ele * (gamma_p.z() * gamma.x() - gamma_p.x() * gamma.z()) - gains.k_omega_y * omega.y,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingMargin {
    /// Largest `|ω_ψ|` for which a hysteresis jump still decreases `V₂`.
    pub omega_bar_psi: f64,
    /// `ω̄_ψ² − ψ̇²_d,max − 2√2 k_ψ⁻¹ k_ω`; negative means no certified region.
    pub omega_max_squared: f64,
    /// Admissible initial heading rate, `None` when the margin is violated.
    pub omega_psi_max: Option<f64>,
}

impl HeadingMargin {
    pub fn violated(&self) -> bool {
        self.omega_psi_max.is_none()
    }
}

pub fn heading_stability_margin(gains: &ControllerGains) -> HeadingMargin {
    let root = (1.0 - gains.delta * gains.delta).sqrt();
    let cap = gains.psi_rate_ff_cap;
    let omega_bar_psi =
        gains.k_omega / (gains.k_psi * gains.k_psi) * (1.0 - root).sqrt() / (cap * (1.0 + root).sqrt());
    let omega_max_squared = omega_bar_psi.powi(2) - cap * cap - 2.0 * SQRT_2 * gains.k_omega / gains.k_psi;
    HeadingMargin {
        omega_bar_psi,
        omega_max_squared,
        omega_psi_max: (omega_max_squared > 0.0).then(|| omega_max_squared.sqrt()),
    }
}

/// `½ e_pᵀK_p⁻¹e_p + ½ e_vᵀK_v⁻¹e_v`.
pub fn lyapunov_v1(e_p: &Vector3<f64>, e_v: &Vector3<f64>, gains: &ControllerGains) -> f64 {
    0.5 * e_p.component_div(&gains.kp_vec()).dot(e_p) + 0.5 * e_v.component_div(&gains.kv_vec()).dot(e_v)
}

/// `−e_pᵀtanh(e_p) − e_vᵀtanh(e_v)`.
pub fn lyapunov_v1_dot_expected(e_p: &Vector3<f64>, e_v: &Vector3<f64>) -> f64 {
    -e_p.dot(&tanh3(e_p)) - e_v.dot(&tanh3(e_v))
}

/// Heading candidate with the hysteresis variable folded in.
pub fn lyapunov_v2(delta_psi: f64, h_psi: f64, e_omega_psi: f64, gains: &ControllerGains) -> f64 {
    let (s, c) = delta_psi.sin_cos();
    // At sin δ = 0 the cos term is either √2 (aligned) or zero (antipodal), so
    // the product is taken as +1 there.
    let alignment = if s == 0.0 { 1.0 } else { h_psi * sgn(s) };
    (SQRT_2 - alignment * (1.0 + c).max(0.0).sqrt()) / gains.k_psi + 0.5 * e_omega_psi * e_omega_psi / gains.k_omega
}

/// `−½(1 − cos δ_ψ)² − e_ωψ²`.
pub fn lyapunov_v2_flow_bound(delta_psi: f64, e_omega_psi: f64) -> f64 {
    -0.5 * (1.0 - delta_psi.cos()).powi(2) - e_omega_psi * e_omega_psi
}

/// Worst-case change of `V₂` across a hysteresis jump.
pub fn lyapunov_v2_jump_bound(gains: &ControllerGains, psi_d_dot: f64, omega_psi: f64) -> f64 {
    let root = (1.0 - gains.delta * gains.delta).sqrt();
    2.0 * gains.k_psi / gains.k_omega * (1.0 + root).sqrt() * psi_d_dot.abs() * omega_psi.abs()
        - 2.0 / gains.k_psi * (1.0 - root).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub v1: f64,
    pub v1_dot_expected: f64,
    pub v2: f64,
    pub flow_bound: f64,
    pub jump_delta: f64,
}

pub fn lyapunov_monitors(
    errors: &TrackingErrors,
    h_psi: f64,
    psi_d_dot: f64,
    omega_psi: f64,
    gains: &ControllerGains,
) -> LyapunovReport {
    LyapunovReport {
        v1: lyapunov_v1(&errors.e_p, &errors.e_v, gains),
        v1_dot_expected: lyapunov_v1_dot_expected(&errors.e_p, &errors.e_v),
        v2: lyapunov_v2(errors.delta_psi, h_psi, errors.e_omega_psi, gains),
        flow_bound: lyapunov_v2_flow_bound(errors.delta_psi, errors.e_omega_psi),
        jump_delta: lyapunov_v2_jump_bound(gains, psi_d_dot, omega_psi),
    }
}

/// Source of `v̇_d` in the acceleration law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VdDotSource {
    /// Rate state of the command filter fed with `v_d`.
    #[default]
    Filtered,
    /// `σ̈_r + K_p sech²(e_p)(σ̇_r − v)`.
    Analytic,
}

/// Reference position, velocity and acceleration at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Reference {
    pub sigma: Vector3<f64>,
    pub sigma_dot: Vector3<f64>,
    pub sigma_ddot: Vector3<f64>,
}

/// Feedback available to the controller. `v` is inertial, `omega_body` body-frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub psi: f64,
    pub omega_psi: f64,
    pub gamma: ReducedAttitude,
    pub omega_body: Vector3<f64>,
}

/// Heading-loop state: hysteresis variable, filters and event counters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingState {
    pub h_psi: f64,
    pub psi_d_filter: CommandFilter,
    pub omega_psi_d_filter: CommandFilter,
    /// Unwrapped desired azimuth from the previous tick.
    pub psi_d: Option<f64>,
    pub last_omega_psi_d: f64,
    pub flips: usize,
    pub h_changes: usize,
    pub saturated_ticks: usize,
    pub saturation_episodes: usize,
    was_saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadingOutput {
    /// Unwrapped desired azimuth.
    pub psi_d: f64,
    pub psi_d_dot: f64,
    pub delta_psi: f64,
    pub omega_psi_d: f64,
    pub omega_psi_d_dot: f64,
    pub e_omega_psi: f64,
    pub gamma_yd: f64,
    pub h_psi: f64,
    /// `h_ψ` changed on this tick.
    pub h_changed: bool,
    /// The change happened with `cos δ_ψ ≤ 0`, i.e. it is a hybrid jump.
    pub flipped: bool,
    pub saturated: bool,
    pub v2: f64,
    /// `V₂⁺ − V₂` evaluated on this tick's jump, if one occurred.
    pub v2_jump: Option<f64>,
}

/// Hybrid heading loop producing `Γ_yd` from a desired azimuth.
#[derive(Debug, Clone)]
pub struct HeadingLoop {
    pub gains: ControllerGains,
    pub dt: f64,
    state: HeadingState,
}

impl HeadingLoop {
    pub fn new(gains: ControllerGains, dt: f64) -> Result<Self, ControlError> {
        gains.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ControlError::InvalidInput(format!("controller period must be positive, got {dt}")));
        }
        let filter = CommandFilter::new(gains.filter_wn, gains.filter_zeta);
        let state = HeadingState {
            h_psi: 1.0,
            psi_d_filter: filter,
            omega_psi_d_filter: filter,
            psi_d: None,
            last_omega_psi_d: 0.0,
            flips: 0,
            h_changes: 0,
            saturated_ticks: 0,
            saturation_episodes: 0,
            was_saturated: false,
        };
        Ok(Self { gains, dt, state })
    }

    pub fn state(&self) -> &HeadingState {
        &self.state
    }

    /// One tick. `target` is the raw desired azimuth, `None` to hold the previous one.
    pub fn step(&mut self, target: Option<f64>, psi: f64, omega_psi: f64) -> HeadingOutput {
        let g = self.gains;
        let dt = self.dt;
        let st = &mut self.state;

        let target = target.or(st.psi_d).unwrap_or(psi);
        let psi_d = match st.psi_d {
            None => {
                st.psi_d_filter.reset(target, 0.0);
                target
            }
            Some(prev) => {
                let next = prev + wrap_angle(target - prev);
                st.psi_d_filter.update(next, dt);
                next
            }
        };
        st.psi_d = Some(psi_d);
        let raw_rate = st.psi_d_filter.rate();
        let saturated = raw_rate.abs() > g.psi_rate_ff_cap;
        if saturated {
            st.saturated_ticks += 1;
            if !st.was_saturated {
                st.saturation_episodes += 1;
            }
        }
        st.was_saturated = saturated;
        let psi_d_dot = raw_rate.clamp(-g.psi_rate_ff_cap, g.psi_rate_ff_cap);

        let delta_psi = wrap_angle(psi_d - psi);
        let h_prev = st.h_psi;
        let h = hysteresis_update(h_prev, delta_psi, g.delta);
        st.h_psi = h;
        st.h_changes += usize::from(h != h_prev);
        // Changes of h where cos δ > 0 leave ω_ψd unchanged and are not jumps.
        let flipped = h != h_prev && delta_psi.cos() <= 0.0;
        let omega_psi_d = heading_rate_command(delta_psi, psi_d_dot, h, g.k_psi, g.psi_rate_ff_cap);
        let v2_jump = if flipped {
            st.flips += 1;
            st.omega_psi_d_filter.reset(omega_psi_d, 0.0);
            let before = heading_rate_command(delta_psi, psi_d_dot, h_prev, g.k_psi, g.psi_rate_ff_cap);
            Some(
                lyapunov_v2(delta_psi, h, omega_psi_d - omega_psi, &g)
                    - lyapunov_v2(delta_psi, h_prev, before - omega_psi, &g),
            )
        } else {
            if st.omega_psi_d_filter.is_primed() {
                st.omega_psi_d_filter.update(omega_psi_d, dt);
            } else {
                st.omega_psi_d_filter.reset(omega_psi_d, 0.0);
            }
            None
        };
        st.last_omega_psi_d = omega_psi_d;
        let omega_psi_d_dot = st.omega_psi_d_filter.rate();
        let e_omega_psi = omega_psi_d - omega_psi;
        HeadingOutput {
            psi_d,
            psi_d_dot,
            delta_psi,
            omega_psi_d,
            omega_psi_d_dot,
            e_omega_psi,
            gamma_yd: gamma_y_command(e_omega_psi, delta_psi, h, omega_psi_d_dot, &g),
            h_psi: h,
            h_changed: h != h_prev,
            flipped,
            saturated,
            v2: lyapunov_v2(delta_psi, h, e_omega_psi, &g),
            v2_jump,
        }
    }
}

/// Everything computed in one controller tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub errors: TrackingErrors,
    pub v_d: Vector3<f64>,
    pub v_d_dot: Vector3<f64>,
    pub a_d: Vector3<f64>,
    pub heading: HeadingOutput,
    pub gamma_p: ReducedAttitude,
    pub f_flap: f64,
    pub inner: InnerCommand,
    pub degenerate: bool,
    pub v1: f64,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub gains: ControllerGains,
    pub params: VerticalParams,
    pub v_d_dot_source: VdDotSource,
    v_d_filters: [CommandFilter; 3],
    heading: HeadingLoop,
    /// Last non-degenerate decomposition.
    held: Option<Decomposition>,
    degenerate_ticks: usize,
}

impl Controller {
    pub fn new(gains: ControllerGains, params: VerticalParams, dt: f64) -> Result<Self, ControlError> {
        let heading = HeadingLoop::new(gains, dt)?;
        Ok(Self {
            gains,
            params,
            v_d_dot_source: VdDotSource::Filtered,
            v_d_filters: [CommandFilter::new(gains.filter_wn, gains.filter_zeta); 3],
            heading,
            held: None,
            degenerate_ticks: 0,
        })
    }

    pub fn with_v_d_dot_source(mut self, source: VdDotSource) -> Self {
        self.v_d_dot_source = source;
        self
    }

    pub fn dt(&self) -> f64 {
        self.heading.dt
    }

    pub fn heading_state(&self) -> &HeadingState {
        self.heading.state()
    }

    pub fn degenerate_ticks(&self) -> usize {
        self.degenerate_ticks
    }

    pub fn step(&mut self, reference: &Reference, meas: &Measurement) -> Result<ControlOutput, ControlError> {
        let g = self.gains;
        let dt = self.dt();
        let kp = g.kp_vec();

        let e_p = reference.sigma - meas.p;
        let v_d = desired_velocity(&reference.sigma_dot, &e_p, &kp);
        let e_v = v_d - meas.v;
        let v_d_dot = match self.v_d_dot_source {
            VdDotSource::Analytic => analytic_v_d_dot(&reference.sigma_ddot, &reference.sigma_dot, &meas.v, &e_p, &kp),
            VdDotSource::Filtered => {
                let mut out = Vector3::zeros();
                for (i, filter) in self.v_d_filters.iter_mut().enumerate() {
                    if filter.is_primed() {
                        filter.update(v_d[i], dt);
                    } else {
                        filter.reset(v_d[i], reference.sigma_ddot[i]);
                    }
                    out[i] = filter.rate();
                }
                out
            }
        };
        let a_d = desired_acceleration(&v_d_dot, &e_p, &e_v, &g);

        let vv = azimuth_rotation(meas.psi).transpose() * meas.v;
        let decomposed = match g.heading_reference {
            HeadingReference::Velocity => decompose_velocity_aligned(&a_d, &v_d, meas.psi, &vv, &self.params),
            HeadingReference::Acceleration => decompose(&a_d, &vv, &self.params),
        };
        let (dec, degenerate) = match decomposed {
            Ok(d) => {
                self.held = Some(d);
                (d, false)
            }
            Err(ControlError::DegenerateDecomposition { .. }) => {
                self.degenerate_ticks += 1;
                let hover = Decomposition {
                    psi_d: None,
                    f_flap: self.params.hover_frequency(),
                    gamma_xd: 0.0,
                    gamma_zd: 1.0,
                    vc_x: 0.0,
                    vc_z: self.params.g,
                };
                let mut d = self.held.unwrap_or(hover);
                d.psi_d = None;
                (d, true)
            }
            Err(e) => return Err(e),
        };

        let heading = self.heading.step(dec.psi_d, meas.psi, meas.omega_psi);
        let gamma_yd = heading.gamma_yd.clamp(-g.gamma_y_max, g.gamma_y_max);
        let gamma_p = compose_reduced_attitude(dec.gamma_xd, gamma_yd, dec.gamma_zd)?;
        let inner = inner_attitude(&gamma_p, &meas.gamma, &meas.omega_body, &g);
        let errors = TrackingErrors {
            e_p,
            e_v,
            e_psi: heading_error(heading.delta_psi),
            e_omega_psi: heading.e_omega_psi,
            delta_psi: heading.delta_psi,
        };
        Ok(ControlOutput {
            errors,
            v_d,
            v_d_dot,
            a_d,
            heading,
            gamma_p,
            f_flap: dec.f_flap,
            inner,
            degenerate,
            v1: lyapunov_v1(&e_p, &e_v, &g),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defaults;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn angle(s: f64, c: f64) -> f64 {
        s.atan2(c)
    }

    #[test]
    fn position_error_signs() {
        let (e_p, e_v) = position_errors(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), &Vector3::zeros(), &Vector3::zeros());
        assert_eq!(e_p, Vector3::new(-1.0, 0.0, 0.0));
        assert_eq!(e_v, Vector3::zeros());
        assert_relative_eq!(heading_error(PI), SQRT_2, epsilon = 1e-12);
        assert_eq!(heading_error(0.0), 0.0);
    }

    #[test]
    fn desired_velocity_saturates() {
        let kp = Vector3::repeat(0.5);
        let v_d = desired_velocity(&Vector3::zeros(), &Vector3::new(1e3, 0.0, 0.0), &kp);
        assert_relative_eq!(v_d, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        let s = Vector3::new(0.3, -0.2, 0.1);
        assert_eq!(desired_velocity(&s, &Vector3::zeros(), &kp), s);
    }

    #[test]
    fn desired_acceleration_examples() {
        let g = ControllerGains::nominal();
        let vd = Vector3::new(0.2, -0.1, 0.4);
        assert_eq!(desired_acceleration(&vd, &Vector3::zeros(), &Vector3::zeros(), &g), vd);
        let a = desired_acceleration(&vd, &Vector3::new(0.7, 0.0, 0.0), &Vector3::new(-0.3, 0.0, 0.0), &g);
        assert_eq!(a.y, vd.y);
        assert_eq!(a.z, vd.z);
    }

    #[test]
    fn decompose_hover_and_cruise() {
        let p = defaults::vertical_params();
        let d = decompose(&Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert_relative_eq!(d.f_flap, (p.m * p.g / p.k_tf).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(d.gamma_xd, 0.0);
        assert_relative_eq!(d.gamma_zd, 1.0);
        // Level cruise at speed V: thrust balances drag and weight.
        let v = 1.2;
        let d = decompose(&Vector3::zeros(), &Vector3::new(v, 0.0, 0.0), &p).unwrap();
        let drag = p.vk_d_x * v * v / p.m;
        let tilt = (-d.gamma_xd).atan2(d.gamma_zd);
        assert_relative_eq!(tilt, (drag / p.g).atan(), epsilon = 1e-12);
        assert_relative_eq!(p.k_tf * d.f_flap * d.f_flap / p.m, drag.hypot(p.g), epsilon = 1e-9);
    }

    #[test]
    fn decompose_rejects_free_fall() {
        let p = defaults::vertical_params();
        let err = decompose(&Vector3::new(0.0, 0.0, -p.g), &Vector3::zeros(), &p).unwrap_err();
        assert!(matches!(err, ControlError::DegenerateDecomposition { .. }));
    }

    #[test]
    fn heading_rate_examples() {
        assert_eq!(heading_rate_command(0.0, 0.3, 1.0, 1.0, 1.0), 0.3);
        assert_relative_eq!(heading_rate_command(PI, 0.0, 1.0, 1.0, 1.0), SQRT_2, epsilon = 1e-12);
        let up = heading_rate_command(1.0, 0.0, 1.0, 0.7, 1.0);
        let down = heading_rate_command(1.0, 0.0, -1.0, 0.7, 1.0);
        assert_relative_eq!(up, -down);
        assert_eq!(heading_rate_command(0.0, 5.0, 1.0, 1.0, 1.5), 1.5);
    }

    #[test]
    fn hysteresis_examples() {
        let c = -(1.0f64 - 0.01).sqrt();
        assert_eq!(hysteresis_update(1.0, angle(-0.1, c), 0.05), -1.0);
        assert_eq!(hysteresis_update(1.0, angle(-0.03, c), 0.05), 1.0);
        assert_eq!(hysteresis_update(-1.0, angle(0.2, 0.98), 0.05), 1.0);
        assert_eq!(hysteresis_update(-1.0, PI, 0.05), -1.0);
        assert_eq!(hysteresis_update(1.0, 0.0, 0.05), 1.0);
    }

    #[test]
    fn hysteresis_does_not_chatter_near_antipode() {
        use rand::{Rng, SeedableRng};
        let delta = 0.1;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut h = 1.0;
        let mut flips = 0;
        for _ in 0..10_000 {
            let noise: f64 = rng.random_range(-0.49 * delta..0.49 * delta);
            let next = hysteresis_update(h, PI + noise, delta);
            flips += usize::from(next != h);
            h = next;
        }
        assert!(flips <= 1, "{flips} flips");
    }

    #[test]
    fn gamma_y_examples() {
        let g = ControllerGains::nominal();
        assert_eq!(gamma_y_command(0.0, 0.0, 1.0, 0.0, &g), 0.0);
        assert!(gamma_y_command(0.4, 0.0, 1.0, 0.0, &g) < 0.0);
        let flat = ControllerGains { l_gamma_min: 10.0, l_gamma_max: 10.0, ..g };
        // Robust term vanishes: the law is linear in the inputs.
        let a = gamma_y_command(0.2, 0.5, 1.0, 0.3, &flat);
        let b = gamma_y_command(-0.2, 0.5, 1.0, 0.3, &flat);
        let mid = gamma_y_command(0.0, 0.5, 1.0, 0.3, &flat);
        assert_relative_eq!(a + b, 2.0 * mid, epsilon = 1e-12);
    }

    #[test]
    fn compose_examples() {
        assert_eq!(*compose_reduced_attitude(0.0, 0.0, 1.0).unwrap().vector(), Vector3::z());
        let g = compose_reduced_attitude(0.6, 0.0, 0.8).unwrap();
        assert_relative_eq!(*g.vector(), Vector3::new(0.6, 0.0, 0.8), epsilon = 1e-12);
        let g = compose_reduced_attitude(0.0, 0.1, 1.0).unwrap();
        assert!((g.y() - 0.0995).abs() < 1e-4 && (g.z() - 0.9950).abs() < 1e-4);
        assert!(compose_reduced_attitude(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn filter_tracks_constant_and_ramp() {
        let dt = 0.01;
        let mut f = CommandFilter::new(20.0, 1.0);
        f.reset(0.0, 0.0);
        for _ in 0..300 {
            f.update(2.0, dt);
        }
        assert_relative_eq!(f.value(), 2.0, epsilon = 1e-6);
        assert!(f.rate().abs() < 1e-6);
        let mut f = CommandFilter::new(20.0, 1.0);
        f.reset(0.0, 0.0);
        for k in 1..=300 {
            f.update(0.7 * k as f64 * dt, dt);
        }
        // The held staircase input biases the sampled rate slightly.
        assert_relative_eq!(f.rate(), 0.7, epsilon = 5e-3);
        f.reset(5.0, 0.0);
        assert_eq!(f.rate(), 0.0);
        assert_eq!(f.value(), 5.0);
    }

    #[test]
    fn inner_attitude_examples() {
        let g = ControllerGains::nominal();
        let level = ReducedAttitude::level();
        let zero = inner_attitude(&level, &level, &Vector3::zeros(), &g);
        assert_eq!(zero, InnerCommand::default());
        let a: f64 = 0.2;
        let gp = ReducedAttitude::new(Vector3::new(0.0, a.sin(), a.cos())).unwrap();
        let cmd = inner_attitude(&gp, &level, &Vector3::zeros(), &g);
        assert_relative_eq!(cmd.theta_rud, g.k_rud * a.sin(), epsilon = 1e-12);
        assert_relative_eq!(cmd.theta_ele, 0.0);
        let damp = inner_attitude(&level, &level, &Vector3::new(0.3, 0.0, 0.0), &g);
        assert!(damp.theta_rud < 0.0);
    }

    #[test]
    fn margin_properties() {
        let g = ControllerGains::certified();
        let m = heading_stability_margin(&g);
        let w = m.omega_psi_max.unwrap();
        // Plugging back into the initial-condition balance.
        let lhs = 0.5 / g.k_omega * w * w + 0.5 / g.k_omega * g.psi_rate_ff_cap.powi(2) + SQRT_2 / g.k_psi;
        assert!((lhs - 0.5 / g.k_omega * m.omega_bar_psi.powi(2)).abs() < 1e-12);
        let stiffer = heading_stability_margin(&ControllerGains { k_omega: 1.5, ..g });
        assert!(stiffer.omega_psi_max.unwrap() > w);
        let thin = heading_stability_margin(&ControllerGains { delta: 1e-9, ..g });
        assert!(thin.omega_bar_psi < 1e-5 && thin.violated());
    }

    #[test]
    fn lyapunov_zero_at_equilibrium() {
        let g = ControllerGains::nominal();
        assert_eq!(lyapunov_v1(&Vector3::zeros(), &Vector3::zeros(), &g), 0.0);
        assert_eq!(lyapunov_v2(0.0, 1.0, 0.0, &g), 0.0);
        assert_eq!(lyapunov_v2(0.0, -1.0, 0.0, &g), 0.0);
        // A committed jump at |sin δ| = δ lowers the heading term.
        let d = PI - g.delta.asin();
        assert!(lyapunov_v2(-d, -1.0, 0.0, &g) < lyapunov_v2(-d, 1.0, 0.0, &g));
    }

    #[test]
    fn controller_holds_hover() {
        let p = defaults::vertical_params();
        let mut c = Controller::new(ControllerGains::nominal(), p, 0.01).unwrap();
        let r = Reference { sigma: Vector3::new(0.0, 0.0, 1.0), ..Default::default() };
        let m = Measurement {
            p: r.sigma,
            v: Vector3::zeros(),
            psi: 0.3,
            omega_psi: 0.0,
            gamma: ReducedAttitude::level(),
            omega_body: Vector3::zeros(),
        };
        for _ in 0..50 {
            let out = c.step(&r, &m).unwrap();
            assert_eq!(out.errors.e_p, Vector3::zeros());
            assert_relative_eq!(out.f_flap, p.hover_frequency(), epsilon = 1e-12);
            assert_relative_eq!(*out.gamma_p.vector(), Vector3::z(), epsilon = 1e-12);
            assert_eq!(out.inner, InnerCommand::default());
            assert!(!out.heading.flipped);
        }
    }

    proptest! {
        #[test]
        fn saturation_bounds(
            e in prop::array::uniform3(-50.0f64..50.0),
            ev in prop::array::uniform3(-50.0f64..50.0),
            s in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let g = ControllerGains::nominal();
            let (e, ev, s) = (Vector3::from(e), Vector3::from(ev), Vector3::from(s));
            let v_d = desired_velocity(&s, &e, &g.kp_vec());
            prop_assert!((v_d - s).amax() <= 1.5 + 1e-12);
            let a = desired_acceleration(&s, &e, &ev, &g);
            prop_assert!((a - s).amax() <= 2.0 + 3.0 + 1e-12);
        }

        #[test]
        fn decomposition_is_unit(a in prop::array::uniform3(-5.0f64..5.0), vx in -2.0f64..2.0) {
            let p = defaults::vertical_params();
            if let Ok(d) = decompose(&Vector3::from(a), &Vector3::new(vx, 0.0, 0.1), &p) {
                prop_assert!((d.gamma_xd.hypot(d.gamma_zd) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn composition_is_unit_and_close(x in -1.0f64..1.0, y in -0.1f64..0.1) {
            let z = (1.0 - x * x).sqrt();
            let g = compose_reduced_attitude(x, y, z).unwrap();
            prop_assert!((g.vector().norm() - 1.0).abs() < 1e-12);
            prop_assert!(((g.x() - x).powi(2) + (g.z() - z).powi(2)).sqrt() <= 0.01);
        }

        #[test]
        fn l_gamma_scaling_keeps_sign(e in -2.0f64..2.0, d in -3.0f64..3.0, w in -2.0f64..2.0, k in 0.1f64..10.0) {
            let g = ControllerGains::nominal();
            let scaled = ControllerGains { l_gamma_min: g.l_gamma_min * k, l_gamma_max: g.l_gamma_max * k, ..g };
            // Only the robust and feedforward parts rescale, by 1/k.
            let lin = -g.k_omega * e;
            let a = gamma_y_command(e, d, 1.0, w, &g) - lin;
            let b = gamma_y_command(e, d, 1.0, w, &scaled) - lin;
            prop_assert!((a / k - b).abs() < 1e-9);
            prop_assert!(a.signum() == b.signum() || a.abs() < 1e-12);
        }

        #[test]
        fn v1_positive_definite(e in prop::array::uniform3(-3.0f64..3.0), ev in prop::array::uniform3(-3.0f64..3.0)) {
            let (e, ev) = (Vector3::from(e), Vector3::from(ev));
            let v = lyapunov_v1(&e, &ev, &ControllerGains::nominal());
            prop_assert!(v >= 0.0);
            prop_assert!((v == 0.0) == (e.norm() + ev.norm() == 0.0));
        }
    }
}
