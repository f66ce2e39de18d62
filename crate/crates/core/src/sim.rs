//! Closed-loop simulation of planner output against the controller, tracking
//! metrics and drag identification.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    analytic_v_d_dot, desired_acceleration, desired_velocity, lyapunov_v1, lyapunov_v1_dot_expected, ControlError,
    Controller, ControllerGains, HeadingLoop, Measurement, Reference, VdDotSource, A_EPS,
};
use crate::dynamics::{
    full_rhs, signed_square, rk4_step, vertical_rhs, DynamicsError, FwavCommand, FwavParams, FwavState, OdeState, RudderMode,
    VerticalInput, VerticalParams, VerticalState,
};
use crate::flatness::V_EPS;
use crate::planner::{PiecewiseTrajectory, PlannerError};
use crate::se3::{azimuth_rotation, recover_attitude, reduced_attitude, ReducedAttitude, UnitQuaternion};

/// Position norm (m) beyond which a run is declared divergent.
pub const DIVERGENCE_RADIUS: f64 = 100.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("run diverged at t = {t:.3} s (|p| = {norm:.3e} m)")]
    Diverged { t: f64, norm: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty log")]
    EmptyLog,
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Vertical-frame model with the attitude loop assumed ideal (`Γ = Γ_p`).
    #[default]
    Vertical,
    /// Full rigid-body model driven through the rudder and elevator laws.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelKind,
    /// Dynamics step (s).
    pub dt: f64,
    /// Controller period (s); a whole multiple of `dt`.
    pub control_dt: f64,
    /// Simulated time past the end of the trajectory (s).
    pub extra_time: f64,
    pub gains: ControllerGains,
    pub v_d_dot_source: VdDotSource,
    pub position_offset: Vector3<f64>,
    pub velocity_offset: Vector3<f64>,
    pub omega_psi0: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Vertical,
            dt: 1e-3,
            control_dt: 1e-2,
            extra_time: 0.0,
            gains: ControllerGains::nominal(),
            v_d_dot_source: VdDotSource::Filtered,
            position_offset: Vector3::zeros(),
            velocity_offset: Vector3::zeros(),
            omega_psi0: 0.0,
        }
    }
}

impl SimConfig {
    /// Dynamics steps per controller tick.
    pub fn substeps(&self) -> Result<usize, SimError> {
        if !(self.dt > 0.0 && self.control_dt > 0.0) {
            return Err(SimError::InvalidConfig("dt and control_dt must be positive".into()));
        }
        let ratio = self.control_dt / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio {
            return Err(SimError::InvalidConfig(format!(
                "dt = {} does not divide the controller period {}",
                self.dt, self.control_dt
            )));
        }
        Ok(n as usize)
    }
}

/// Reference at `t`, continued at constant velocity past the end of the trajectory.
pub fn reference_at(traj: &PiecewiseTrajectory, t: f64) -> Result<Reference, PlannerError> {
    let end = traj.duration();
    if t <= end {
        let k = traj.derivatives(t.max(0.0), 3)?;
        return Ok(Reference { sigma: k[0], sigma_dot: k[1], sigma_ddot: k[2] });
    }
    let k = traj.derivatives(end, 2)?;
    Ok(Reference { sigma: k[0] + k[1] * (t - end), sigma_dot: k[1], sigma_ddot: Vector3::zeros() })
}

/// Initial azimuth: along the initial horizontal velocity, else along the
/// first sizable horizontal reference acceleration, else zero.
pub fn initial_heading(traj: &PiecewiseTrajectory, v0: &Vector3<f64>) -> Result<f64, PlannerError> {
    if v0.x.hypot(v0.y) > V_EPS {
        return Ok(v0.y.atan2(v0.x));
    }
    let end = traj.duration();
    let steps = (end / 0.01).ceil() as usize;
    for k in 0..=steps {
        let a = traj.eval((k as f64 * 0.01).min(end), 2)?;
        if a.x.hypot(a.y) > A_EPS {
            return Ok(a.y.atan2(a.x));
        }
    }
    Ok(0.0)
}

/// One logged state sample in the full-model layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRow {
    pub t: f64,
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion,
    pub omega: Vector3<f64>,
    pub f_flap: f64,
    pub theta_rud: f64,
    pub theta_ele: f64,
}

/// One controller tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlRow {
    pub t: f64,
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub delta_psi: f64,
    pub h_psi: f64,
    pub omega_psi_d: f64,
    pub gamma_yd: f64,
    pub f_flap_cmd: f64,
    pub theta_rud_cmd: f64,
    pub theta_ele_cmd: f64,
    pub v1: f64,
    pub v2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimEvents {
    /// Times at which `h_ψ` changed.
    pub h_change_times: Vec<f64>,
    /// Times of hybrid jumps (`h_ψ` changes with `cos δ_ψ ≤ 0`).
    pub jump_times: Vec<f64>,
    /// `V₂⁺ − V₂` at each jump.
    pub v2_jumps: Vec<f64>,
    pub saturation_episodes: usize,
    pub saturated_ticks: usize,
    /// Start times of heading-rate saturation episodes.
    pub saturation_times: Vec<f64>,
    pub degenerate_ticks: usize,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub states: Vec<StateRow>,
    pub controls: Vec<ControlRow>,
    pub events: SimEvents,
}

impl SimEvents {
    /// Number of groups of events separated by more than `gap` seconds.
    pub fn episodes(times: &[f64], gap: f64) -> usize {
        times.windows(2).filter(|w| w[1] - w[0] > gap).count() + usize::from(!times.is_empty())
    }
}

impl SimRun {
    pub fn positions(&self) -> Vec<(f64, Vector3<f64>)> {
        self.states.iter().map(|r| (r.t, r.p)).collect()
    }
}

enum Plant {
    Vertical { state: VerticalState, params: VerticalParams, gamma: ReducedAttitude, f_flap: f64 },
    Full { state: FwavState, params: FwavParams, command: FwavCommand },
}

impl Plant {
    fn measurement(&self) -> Measurement {
        match self {
            Plant::Vertical { state, gamma, .. } => Measurement {
                p: state.p,
                v: state.inertial_velocity(),
                psi: state.psi,
                omega_psi: state.omega_psi,
                gamma: *gamma,
                omega_body: Vector3::zeros(),
            },
            Plant::Full { state, .. } => {
                let r = state.q.to_rotation();
                Measurement {
                    p: state.p,
                    v: state.v,
                    psi: r.azimuth(),
                    omega_psi: (r.matrix() * state.omega).z,
                    gamma: reduced_attitude(&state.q),
                    omega_body: state.omega,
                }
            }
        }
    }

    fn row(&self, t: f64) -> StateRow {
        match self {
            Plant::Vertical { state, gamma, f_flap, .. } => {
                let q = recover_attitude(gamma, state.psi, 1.0)
                    .map(|r| r.to_quaternion())
                    .unwrap_or_else(|_| UnitQuaternion::from_yaw(state.psi));
                StateRow {
                    t,
                    p: state.p,
                    v: state.inertial_velocity(),
                    q,
                    omega: Vector3::new(0.0, 0.0, state.omega_psi),
                    f_flap: *f_flap,
                    theta_rud: 0.0,
                    theta_ele: 0.0,
                }
            }
            Plant::Full { state, .. } => StateRow {
                t,
                p: state.p,
                v: state.v,
                q: state.q,
                omega: state.omega,
                f_flap: state.f_flap,
                theta_rud: state.theta_rud,
                theta_ele: state.theta_ele,
            },
        }
    }

    fn advance(&mut self, t: f64, dt: f64) -> Result<(), DynamicsError> {
        match self {
            Plant::Vertical { state, params, gamma, f_flap } => {
                let input = VerticalInput { gamma: *gamma, f_flap: *f_flap, rudder: RudderMode::GammaProxy };
                let p = *params;
                *state = rk4_step(state, t, dt, &mut |_, s: &VerticalState| {
                    Ok(vertical_rhs(s, &input, &p)?.to_vector())
                })?;
                check_state(&state.to_vector(), t + dt)
            }
            Plant::Full { state, params, command } => {
                let (cmd, p) = (*command, *params);
                *state = rk4_step(state, t, dt, &mut |_, s: &FwavState| Ok(full_rhs(s, &cmd, &p)?.to_vector()))?;
                check_state(&state.to_vector(), t + dt)
            }
        }
    }

    fn position(&self) -> Vector3<f64> {
        match self {
            Plant::Vertical { state, .. } => state.p,
            Plant::Full { state, .. } => state.p,
        }
    }
}

fn check_state(x: &DVector<f64>, t: f64) -> Result<(), DynamicsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFinite { step: 0, t })
    }
}

/// Runs the controller at its own rate against the chosen model, holding
/// commands between ticks.
pub fn run_closed_loop(
    traj: &PiecewiseTrajectory,
    vparams: &VerticalParams,
    fparams: &FwavParams,
    config: &SimConfig,
) -> Result<SimRun, SimError> {
    let substeps = config.substeps()?;
    let start = reference_at(traj, 0.0)?;
    let p0 = start.sigma + config.position_offset;
    let v0 = start.sigma_dot + config.velocity_offset;
    let psi0 = initial_heading(traj, &v0)?;
    let hover = vparams.hover_frequency();
    let mut plant = match config.model {
        ModelKind::Vertical => {
            // The lateral vertical-frame velocity is held at zero by the model,
            // so any sideways part of the initial velocity is dropped.
            let vv = azimuth_rotation(psi0).transpose() * v0;
            Plant::Vertical {
                state: VerticalState { p: p0, vv: Vector3::new(vv.x, 0.0, vv.z), psi: psi0, omega_psi: config.omega_psi0 },
                params: *vparams,
                gamma: ReducedAttitude::level(),
                f_flap: hover,
            }
        }
        ModelKind::Full => {
            let q = recover_attitude(&ReducedAttitude::level(), psi0, 1.0)
                .map_err(DynamicsError::from)?
                .to_quaternion();
            let state = FwavState {
                p: p0,
                v: v0,
                q,
                omega: Vector3::new(0.0, 0.0, config.omega_psi0),
                f_flap: fparams.hover_frequency(),
                theta_rud: 0.0,
                theta_ele: 0.0,
            };
            Plant::Full {
                state,
                params: *fparams,
                command: FwavCommand { f_flap: state.f_flap, theta_rud: 0.0, theta_ele: 0.0 },
            }
        }
    };

    let mut controller =
        Controller::new(config.gains, *vparams, config.control_dt)?.with_v_d_dot_source(config.v_d_dot_source);
    let duration = traj.duration() + config.extra_time.max(0.0);
    let ticks = (duration / config.control_dt).round() as usize;
    let mut run = SimRun { states: Vec::with_capacity(ticks + 1), controls: Vec::with_capacity(ticks), events: SimEvents::default() };
    let mut was_saturated = false;

    for tick in 0..=ticks {
        let t = tick as f64 * config.control_dt;
        run.states.push(plant.row(t));
        if tick == ticks {
            break;
        }
        let out = controller.step(&reference_at(traj, t)?, &plant.measurement())?;
        let h = out.heading;
        if h.h_changed {
            run.events.h_change_times.push(t);
        }
        if h.flipped {
            run.events.jump_times.push(t);
            run.events.v2_jumps.extend(h.v2_jump);
        }
        if h.saturated && !was_saturated {
            run.events.saturation_times.push(t);
        }
        was_saturated = h.saturated;
        run.controls.push(ControlRow {
            t,
            e_p: out.errors.e_p,
            e_v: out.errors.e_v,
            delta_psi: h.delta_psi,
            h_psi: h.h_psi,
            omega_psi_d: h.omega_psi_d,
            gamma_yd: h.gamma_yd,
            f_flap_cmd: out.f_flap,
            theta_rud_cmd: out.inner.theta_rud,
            theta_ele_cmd: out.inner.theta_ele,
            v1: out.v1,
            v2: h.v2,
        });
        match &mut plant {
            Plant::Vertical { gamma, f_flap, .. } => {
                *gamma = out.gamma_p;
                *f_flap = out.f_flap;
            }
            Plant::Full { command, .. } => {
                *command = FwavCommand {
                    f_flap: out.f_flap,
                    theta_rud: out.inner.theta_rud,
                    theta_ele: out.inner.theta_ele,
                };
            }
        }
        for k in 0..substeps {
            let ts = t + k as f64 * config.dt;
            plant.advance(ts, config.dt)?;
            let norm = plant.position().norm();
            if !(norm <= DIVERGENCE_RADIUS) {
                return Err(SimError::Diverged { t: ts + config.dt, norm });
            }
        }
    }
    let hs = controller.heading_state();
    run.events.saturation_episodes = hs.saturation_episodes;
    run.events.saturated_ticks = hs.saturated_ticks;
    run.events.degenerate_ticks = controller.degenerate_ticks();
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub max: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub along_track: ChannelStats,
    pub cross_track: ChannelStats,
    pub altitude: ChannelStats,
    pub samples: usize,
}

impl MetricsReport {
    pub fn channels(&self) -> [(&'static str, ChannelStats); 3] {
        [("along_track", self.along_track), ("cross_track", self.cross_track), ("altitude", self.altitude)]
    }
}

/// Splits `e = σ_r − p` into along-track, cross-track and altitude parts
/// relative to the reference horizontal velocity.
pub fn error_components(e: &Vector3<f64>, sigma_dot: &Vector3<f64>) -> [f64; 3] {
    let speed = sigma_dot.x.hypot(sigma_dot.y);
    let (c, s) = if speed < V_EPS { (1.0, 0.0) } else { (sigma_dot.x / speed, sigma_dot.y / speed) };
    [c * e.x + s * e.y, -s * e.x + c * e.y, e.z]
}

/// MAX and RMS of each error channel over samples inside the trajectory window.
pub fn compute_metrics(positions: &[(f64, Vector3<f64>)], traj: &PiecewiseTrajectory) -> Result<MetricsReport, SimError> {
    let end = traj.duration();
    let mut max = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for (t, p) in positions {
        if *t < 0.0 || *t > end + 1e-9 {
            continue;
        }
        let k = traj.derivatives(t.min(end), 2)?;
        let parts = error_components(&(k[0] - p), &k[1]);
        for i in 0..3 {
            max[i] = max[i].max(parts[i].abs());
            sq[i] += parts[i] * parts[i];
        }
        n += 1;
    }
    if n == 0 {
        return Err(SimError::EmptyLog);
    }
    let stats = |i: usize| ChannelStats { max: max[i], rms: (sq[i] / n as f64).sqrt() };
    Ok(MetricsReport { along_track: stats(0), cross_track: stats(1), altitude: stats(2), samples: n })
}

/// Translational state of the point-mass plant `v̇ = a_d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMass {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl OdeState for PointMass {
    fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(6, self.p.iter().chain(self.v.iter()).copied())
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self { p: Vector3::new(v[0], v[1], v[2]), v: Vector3::new(v[3], v[4], v[5]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdealSample {
    pub t: f64,
    pub e_p: Vector3<f64>,
    pub e_v: Vector3<f64>,
    pub v1: f64,
    pub v1_dot_expected: f64,
}

fn ideal_errors(traj: &PiecewiseTrajectory, gains: &ControllerGains, t: f64, s: &PointMass) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>), PlannerError> {
    let r = reference_at(traj, t)?;
    let kp = gains.kp_vec();
    let e_p = r.sigma - s.p;
    let v_d = desired_velocity(&r.sigma_dot, &e_p, &kp);
    let e_v = v_d - s.v;
    let v_d_dot = analytic_v_d_dot(&r.sigma_ddot, &r.sigma_dot, &s.v, &e_p, &kp);
    Ok((e_p, e_v, desired_acceleration(&v_d_dot, &e_p, &e_v, gains)))
}

/// Position loop with the acceleration expectation met exactly, evaluated
/// continuously inside the integrator.
pub fn run_ideal_translational(
    traj: &PiecewiseTrajectory,
    gains: &ControllerGains,
    p0: Vector3<f64>,
    v0: Vector3<f64>,
    dt: f64,
    duration: f64,
) -> Result<Vec<IdealSample>, SimError> {
    let steps = (duration / dt).round() as usize;
    let mut state = PointMass { p: p0, v: v0 };
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (e_p, e_v, _) = ideal_errors(traj, gains, t, &state)?;
        out.push(IdealSample {
            t,
            e_p,
            e_v,
            v1: lyapunov_v1(&e_p, &e_v, gains),
            v1_dot_expected: lyapunov_v1_dot_expected(&e_p, &e_v),
        });
        if k == steps {
            break;
        }
        state = rk4_step(&state, t, dt, &mut |t, s: &PointMass| {
            let (_, _, a_d) = ideal_errors(traj, gains, t, s)
                .map_err(|e| DynamicsError::InvalidInput(e.to_string()))?;
            Ok(PointMass { p: s.v, v: a_d }.to_vector())
        })?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadingSample {
    pub t: f64,
    pub psi: f64,
    pub omega_psi: f64,
    pub psi_d: f64,
    pub delta_psi: f64,
    pub h_psi: f64,
    pub gamma_yd: f64,
    pub v2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HeadingRun {
    pub samples: Vec<HeadingSample>,
    pub jump_times: Vec<f64>,
    pub v2_jumps: Vec<f64>,
    pub h_changes: usize,
}

/// Heading subsystem alone: `ψ̇ = ω_ψ`, `ω̇_ψ = −L Γ_yd` with the heading loop
/// ticking every `control_dt`.
#[allow(clippy::too_many_arguments)]
pub fn run_heading_subsystem(
    gains: &ControllerGains,
    yaw_gain: f64,
    psi0: f64,
    omega_psi0: f64,
    psi_d: impl Fn(f64) -> f64,
    dt: f64,
    control_dt: f64,
    duration: f64,
) -> Result<HeadingRun, SimError> {
    let substeps = SimConfig { dt, control_dt, ..SimConfig::default() }.substeps()?;
    let mut heading = HeadingLoop::new(*gains, control_dt)?;
    let ticks = (duration / control_dt).round() as usize;
    let (mut psi, mut w) = (psi0, omega_psi0);
    let mut run = HeadingRun::default();
    for tick in 0..ticks {
        let t = tick as f64 * control_dt;
        let out = heading.step(Some(psi_d(t)), psi, w);
        if out.flipped {
            run.jump_times.push(t);
            run.v2_jumps.extend(out.v2_jump);
        }
        run.h_changes += usize::from(out.h_changed);
        run.samples.push(HeadingSample {
            t,
            psi,
            omega_psi: w,
            psi_d: out.psi_d,
            delta_psi: out.delta_psi,
            h_psi: out.h_psi,
            gamma_yd: out.gamma_yd,
            v2: out.v2,
        });
        let accel = -yaw_gain * out.gamma_yd;
        // The yaw acceleration is constant between ticks, so the update is exact.
        for _ in 0..substeps {
            psi += w * dt + 0.5 * accel * dt * dt;
            w += accel * dt;
        }
    }
    Ok(run)
}

/// One regression sample for drag identification. `thrust_x` is the
/// thrust specific force along the vertical-frame X axis, `−k_tf f² Γ_x / m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragSample {
    pub vv_x: f64,
    pub vv_x_dot: f64,
    pub thrust_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragEstimate {
    pub k_d_over_m: f64,
    pub residual_norm: f64,
    pub samples_used: usize,
    /// `Σφ²` of the regressor; small values mean poor excitation.
    pub excitation: f64,
}

/// Forward speed (m/s) below which samples are ignored.
pub const DRAG_MIN_SPEED: f64 = 0.2;

/// Least-squares fit of `ᵛv̇_x − thrust_x = (k_d/m)·(−sgn(ᵛv_x) ᵛv_x²)`.
pub fn identify_drag(samples: &[DragSample]) -> Result<DragEstimate, SimError> {
    let used: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.vv_x.abs() > DRAG_MIN_SPEED)
        .map(|s| (-signed_square(s.vv_x), s.vv_x_dot - s.thrust_x))
        .collect();
    let excitation: f64 = used.iter().map(|(phi, _)| phi * phi).sum();
    if used.len() < 10 || excitation < 1e-6 {
        return Err(SimError::InsufficientExcitation(format!(
            "{} samples above {DRAG_MIN_SPEED} m/s, regressor energy {excitation:.3e}",
            used.len()
        )));
    }
    let k = used.iter().map(|(phi, y)| phi * y).sum::<f64>() / excitation;
    let residual_norm = used.iter().map(|(phi, y)| (y - k * phi).powi(2)).sum::<f64>().sqrt();
    Ok(DragEstimate { k_d_over_m: k, residual_norm, samples_used: used.len(), excitation })
}

/// Regression samples from a state log, with accelerations by central differences.
pub fn drag_samples_from_states(rows: &[StateRow], params: &VerticalParams) -> Vec<DragSample> {
    let forward = |r: &StateRow| {
        let rot = r.q.to_rotation();
        let psi = rot.azimuth();
        (psi.cos() * r.v.x + psi.sin() * r.v.y, rot.reduced_attitude())
    };
    rows.windows(3)
        .filter(|w| w[2].t > w[0].t)
        .map(|w| {
            let (v0, _) = forward(&w[0]);
            let (v1, gamma) = forward(&w[1]);
            let (v2, _) = forward(&w[2]);
            DragSample {
                vv_x: v1,
                vv_x_dot: (v2 - v0) / (w[2].t - w[0].t),
                thrust_x: -params.k_tf * w[1].f_flap * w[1].f_flap * gamma.x() / params.m,
            }
        })
        .collect()
}
