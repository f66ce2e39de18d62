//! Boundary, waypoint, continuity, kinodynamic and obstacle constraints.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::trajectory::{PiecewiseTrajectory, PolySegment};
use super::PlannerError;

/// Regularization (m/s) of the horizontal speed in the heading-rate expression.
pub const HEADING_RATE_EPS: f64 = 1e-3;

/// Highest derivative order kept continuous across junctions.
pub const CONTINUITY_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryState {
    pub position: Vector3<f64>,
    #[serde(default)]
    pub velocity: Vector3<f64>,
    #[serde(default)]
    pub acceleration: Vector3<f64>,
}

impl BoundaryState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self { position, ..Default::default() }
    }
}

/// Position pinned at a local time of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub segment: usize,
    pub local_time: f64,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleShape {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Unbounded cylinder along inertial X.
    CylinderX { center_yz: Vector2<f64>, radius: f64 },
}

impl ObstacleShape {
    pub fn radius(&self) -> f64 {
        match self {
            Self::Sphere { radius, .. } | Self::CylinderX { radius, .. } => *radius,
        }
    }

    /// Distance from the obstacle's center set, with its gradient in position.
    ///
    /// With `sphere_from_origin` set, sphere distances are measured from the
    /// inertial origin instead of the sphere center.
    pub fn center_distance(&self, p: &Vector3<f64>, sphere_from_origin: bool) -> (f64, Vector3<f64>) {
        let d = match self {
            Self::Sphere { center, .. } => {
                if sphere_from_origin {
                    *p
                } else {
                    p - center
                }
            }
            Self::CylinderX { center_yz, .. } => Vector3::new(0.0, p.y - center_yz.x, p.z - center_yz.y),
        };
        let n = d.norm();
        let grad = if n > 0.0 { d / n } else { Vector3::zeros() };
        (n, grad)
    }

    /// `radius − distance`; positive inside.
    pub fn penetration(&self, p: &Vector3<f64>, sphere_from_origin: bool) -> f64 {
        self.radius() - self.center_distance(p, sphere_from_origin).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub start: BoundaryState,
    pub end: BoundaryState,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    pub v_h_max: f64,
    pub v_v_max: f64,
    /// May be `inf` to disable the heading-rate limit.
    pub psi_rate_max: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleShape>,
    pub sample_interval: f64,
    #[serde(default)]
    pub sphere_from_origin: bool,
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), PlannerError> {
        for (name, v) in [
            ("v_h_max", self.v_h_max),
            ("v_v_max", self.v_v_max),
            ("psi_rate_max", self.psi_rate_max),
            ("sample_interval", self.sample_interval),
        ] {
            if !(v > 0.0) {
                return Err(PlannerError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.sample_interval.is_finite() {
            return Err(PlannerError::InvalidConfig("sample_interval must be finite".into()));
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if !(ob.radius() > 0.0) {
                return Err(PlannerError::InvalidConfig(format!("obstacle {i} radius must be > 0")));
            }
        }
        Ok(())
    }

    /// Same constraints with every obstacle radius grown by `margin`.
    pub fn inflated(&self, margin: f64) -> Self {
        let mut out = self.clone();
        for ob in &mut out.obstacles {
            match ob {
                ObstacleShape::Sphere { radius, .. } | ObstacleShape::CylinderX { radius, .. } => *radius += margin,
            }
        }
        out
    }

    /// Kinodynamic limits scaled by `factor` (obstacles untouched).
    pub fn tightened(&self, factor: f64) -> Self {
        Self {
            v_h_max: self.v_h_max * factor,
            v_v_max: self.v_v_max * factor,
            psi_rate_max: self.psi_rate_max * factor,
            ..self.clone()
        }
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        out.start.position += offset;
        out.end.position += offset;
        for w in &mut out.waypoints {
            w.position += offset;
        }
        for ob in &mut out.obstacles {
            match ob {
                ObstacleShape::Sphere { center, .. } => *center += offset,
                ObstacleShape::CylinderX { center_yz, .. } => *center_yz += Vector2::new(offset.y, offset.z),
            }
        }
        out
    }
}

/// Interior sample times `τ_i = i·interval` strictly inside `(0, duration)`.
pub fn sample_times(duration: f64, interval: f64) -> Vec<f64> {
    let count = ((duration / interval) - 1e-9).floor() as usize;
    (1..=count).map(|i| i as f64 * interval).filter(|&t| t < duration - 1e-9).collect()
}

/// Heading rate `(ẋÿ − ẏẍ)/(ẋ² + ẏ² + ε²)`.
pub fn heading_rate(v: &Vector3<f64>, a: &Vector3<f64>) -> f64 {
    (v.x * a.y - v.y * a.x) / (v.x * v.x + v.y * v.y + HEADING_RATE_EPS * HEADING_RATE_EPS)
}

/// `max(x, 0)`.
pub fn rec(x: f64) -> f64 {
    x.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub name: String,
    pub value: f64,
    pub time: Option<f64>,
}

/// Residuals of every constraint family on a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintResiduals {
    /// Signed equality residuals (boundary, waypoints, continuity).
    pub equality: Vec<(String, f64)>,
    pub horizontal_speed: f64,
    pub vertical_speed: f64,
    pub heading_rate: f64,
    /// One summed penetration per obstacle.
    pub obstacles: Vec<f64>,
    /// Largest single violation, equality or sampled.
    pub worst: Option<Violation>,
}

impl ConstraintResiduals {
    pub fn max_equality(&self) -> f64 {
        self.equality.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max)
    }

    pub fn max_inequality(&self) -> f64 {
        self.obstacles
            .iter()
            .copied()
            .chain([self.horizontal_speed, self.vertical_speed, self.heading_rate])
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, eq_tol: f64, ineq_tol: f64) -> bool {
        self.max_equality() <= eq_tol && self.max_inequality() <= ineq_tol
    }
}

const AXES: [char; 3] = ['x', 'y', 'z'];

fn equality_residuals(traj: &PiecewiseTrajectory, cons: &ConstraintSet) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let first = &traj.segments[0];
    let last = traj.segments.last().unwrap();
    let ends = [
        ("start", first.eval_local(0.0, 0) - cons.start.position, 0),
        ("start", first.eval_local(0.0, 1) - cons.start.velocity, 1),
        ("start", first.eval_local(0.0, 2) - cons.start.acceleration, 2),
        ("end", last.eval_local(last.duration, 0) - cons.end.position, 0),
        ("end", last.eval_local(last.duration, 1) - cons.end.velocity, 1),
        ("end", last.eval_local(last.duration, 2) - cons.end.acceleration, 2),
    ];
    for (which, r, k) in ends {
        for j in 0..3 {
            out.push((format!("{which}.d{k}.{}", AXES[j]), r[j]));
        }
    }
    for (w_idx, w) in cons.waypoints.iter().enumerate() {
        if let Some(seg) = traj.segments.get(w.segment) {
            let r = seg.eval_local(w.local_time, 0) - w.position;
            for j in 0..3 {
                out.push((format!("waypoint[{w_idx}].{}", AXES[j]), r[j]));
            }
        } else {
            out.push((format!("waypoint[{w_idx}].segment"), f64::INFINITY));
        }
    }
    for (s, pair) in traj.segments.windows(2).enumerate() {
        for k in 0..=CONTINUITY_ORDER {
            let r = pair[0].eval_local(pair[0].duration, k) - pair[1].eval_local(0.0, k);
            for j in 0..3 {
                out.push((format!("continuity[{s}].d{k}.{}", AXES[j]), r[j]));
            }
        }
    }
    out
}

/// Per-sample inequality values at time `t` (positive means violated).
pub(crate) fn sample_violations(
    cons: &ConstraintSet,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    a: &Vector3<f64>,
) -> (f64, f64, f64, Vec<f64>) {
    let vh = (v.x * v.x + v.y * v.y).sqrt() - cons.v_h_max;
    let vv = v.z.abs() - cons.v_v_max;
    let hr = heading_rate(v, a).abs() - cons.psi_rate_max;
    let obs = cons
        .obstacles
        .iter()
        .map(|o| o.penetration(p, cons.sphere_from_origin))
        .collect();
    (vh, vv, hr, obs)
}

/// Residuals at the given sample times. Sampled families are `Σ Rec(excess)`.
pub fn constraint_residuals_at(
    traj: &PiecewiseTrajectory,
    cons: &ConstraintSet,
    times: &[f64],
) -> Result<ConstraintResiduals, PlannerError> {
    let equality = equality_residuals(traj, cons);
    let mut worst: Option<Violation> = None;
    let mut consider = |name: &str, value: f64, time: Option<f64>| {
        if value > 0.0 && worst.as_ref().is_none_or(|w| value > w.value) {
            worst = Some(Violation { name: name.to_string(), value, time });
        }
    };
    for (name, r) in &equality {
        consider(name, r.abs(), None);
    }
    let mut hs = 0.0;
    let mut vs = 0.0;
    let mut hr = 0.0;
    let mut obs = vec![0.0; cons.obstacles.len()];
    for &t in times {
        let d = traj.derivatives(t, 3)?;
        let (a, b, c, o) = sample_violations(cons, &d[0], &d[1], &d[2]);
        hs += rec(a);
        vs += rec(b);
        hr += rec(c);
        consider("horizontal_speed", a, Some(t));
        consider("vertical_speed", b, Some(t));
        consider("heading_rate", c, Some(t));
        for (i, x) in o.into_iter().enumerate() {
            obs[i] += rec(x);
            consider(&format!("obstacle[{i}]"), x, Some(t));
        }
    }
    Ok(ConstraintResiduals {
        equality,
        horizontal_speed: hs,
        vertical_speed: vs,
        heading_rate: hr,
        obstacles: obs,
        worst,
    })
}

/// Residuals at the constraint set's own sample grid.
pub fn constraint_residuals(
    traj: &PiecewiseTrajectory,
    cons: &ConstraintSet,
) -> Result<ConstraintResiduals, PlannerError> {
    constraint_residuals_at(traj, cons, &sample_times(traj.duration(), cons.sample_interval))
}

/// Maps a flat coefficient vector to segments.
///
/// Coefficients are stored in normalized time: `zᵢ = cᵢ Tⁱ`, so that
/// `σ(τT) = Σ zᵢ τⁱ` for `τ ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientLayout {
    pub order: usize,
    pub durations: Vec<f64>,
}

impl CoefficientLayout {
    pub fn new(segments: usize, order: usize, duration: f64) -> Self {
        Self { order, durations: vec![duration; segments] }
    }

    pub fn segments(&self) -> usize {
        self.durations.len()
    }

    pub fn per_axis(&self) -> usize {
        self.order + 1
    }

    pub fn len(&self) -> usize {
        3 * self.segments() * self.per_axis()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, segment: usize, axis: usize, i: usize) -> usize {
        (segment * 3 + axis) * self.per_axis() + i
    }

    /// Row weights giving the k-th physical-time derivative at normalized time τ.
    pub fn basis(&self, segment: usize, tau: f64, k: usize) -> Vec<f64> {
        let t = self.durations[segment];
        (0..self.per_axis())
            .map(|i| {
                if i < k {
                    0.0
                } else {
                    let ff: f64 = ((i - k + 1)..=i).map(|x| x as f64).product();
                    ff * tau.powi((i - k) as i32) / t.powi(k as i32)
                }
            })
            .collect()
    }

    pub fn to_trajectory(&self, z: &DVector<f64>) -> PiecewiseTrajectory {
        let segments = (0..self.segments())
            .map(|s| {
                let t = self.durations[s];
                let axis = |j: usize| -> Vec<f64> {
                    (0..self.per_axis()).map(|i| z[self.index(s, j, i)] / t.powi(i as i32)).collect()
                };
                PolySegment { coeffs: [axis(0), axis(1), axis(2)], duration: t }
            })
            .collect();
        PiecewiseTrajectory { segments }
    }

    pub fn from_trajectory(&self, traj: &PiecewiseTrajectory) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for (s, seg) in traj.segments.iter().enumerate() {
            for j in 0..3 {
                for i in 0..self.per_axis() {
                    z[self.index(s, j, i)] = seg.coeffs[j][i] * seg.duration.powi(i as i32);
                }
            }
        }
        z
    }

    /// Snap Hessian `H` with `∫Σ‖σ⁽⁴⁾‖² dt = zᵀ H z`.
    pub fn snap_hessian(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut h = DMatrix::zeros(n, n);
        let ff = |i: usize| -> f64 { ((i - 3)..=i).map(|x| x as f64).product() };
        for s in 0..self.segments() {
            let scale = self.durations[s].powi(-7);
            for j in 0..3 {
                for a in 4..self.per_axis() {
                    for b in 4..self.per_axis() {
                        h[(self.index(s, j, a), self.index(s, j, b))] =
                            scale * ff(a) * ff(b) / (a + b - 7) as f64;
                    }
                }
            }
        }
        h
    }
}

/// Linear equality system `A z = b` with one name per row.
#[derive(Debug, Clone)]
pub struct EqualityRows {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub names: Vec<String>,
}

pub fn equality_rows(cons: &ConstraintSet, layout: &CoefficientLayout) -> Result<EqualityRows, PlannerError> {
    let mut rows: Vec<(Vec<(usize, f64)>, f64, String)> = Vec::new();
    let m = layout.segments();
    let mut push_point = |seg: usize, tau: f64, k: usize, target: &Vector3<f64>, label: &str| {
        let basis = layout.basis(seg, tau, k);
        for j in 0..3 {
            let entries = basis.iter().enumerate().map(|(i, w)| (layout.index(seg, j, i), *w)).collect();
            rows.push((entries, target[j], format!("{label}.{}", AXES[j])));
        }
    };
    push_point(0, 0.0, 0, &cons.start.position, "start.d0");
    push_point(0, 0.0, 1, &cons.start.velocity, "start.d1");
    push_point(0, 0.0, 2, &cons.start.acceleration, "start.d2");
    push_point(m - 1, 1.0, 0, &cons.end.position, "end.d0");
    push_point(m - 1, 1.0, 1, &cons.end.velocity, "end.d1");
    push_point(m - 1, 1.0, 2, &cons.end.acceleration, "end.d2");
    for (w_idx, w) in cons.waypoints.iter().enumerate() {
        if w.segment >= m {
            return Err(PlannerError::InvalidConfig(format!(
                "waypoint {w_idx} references segment {} of {m}",
                w.segment
            )));
        }
        let t = layout.durations[w.segment];
        if !(0.0..=t).contains(&w.local_time) {
            return Err(PlannerError::InvalidConfig(format!("waypoint {w_idx} local time outside [0, {t}]")));
        }
        push_point(w.segment, w.local_time / t, 0, &w.position, &format!("waypoint[{w_idx}]"));
    }
    for s in 0..m.saturating_sub(1) {
        for k in 0..=CONTINUITY_ORDER {
            let left = layout.basis(s, 1.0, k);
            let right = layout.basis(s + 1, 0.0, k);
            for j in 0..3 {
                let mut entries: Vec<(usize, f64)> =
                    left.iter().enumerate().map(|(i, w)| (layout.index(s, j, i), *w)).collect();
                entries.extend(right.iter().enumerate().map(|(i, w)| (layout.index(s + 1, j, i), -w)));
                rows.push((entries, 0.0, format!("continuity[{s}].d{k}.{}", AXES[j])));
            }
        }
    }
    let mut a = DMatrix::zeros(rows.len(), layout.len());
    let mut b = DVector::zeros(rows.len());
    let mut names = Vec::with_capacity(rows.len());
    for (r, (entries, target, name)) in rows.into_iter().enumerate() {
        for (c, w) in entries {
            a[(r, c)] += w;
        }
        b[r] = target;
        names.push(name);
    }
    Ok(EqualityRows { a, b, names })
}
