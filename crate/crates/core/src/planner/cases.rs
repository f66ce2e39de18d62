//! Built-in planning scenarios.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::constraints::{BoundaryState, ConstraintSet, ObstacleShape, Waypoint};
use super::optimize::PlanOptions;
use super::trajectory::ObjectiveWeights;
use super::PlannerError;

/// A complete planning problem, as stored in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    pub options: PlanOptions,
}

/// Names accepted by [`case_library`].
pub const CASE_NAMES: [&str; 4] = ["a", "b", "c", "line"];

/// Default kinodynamic limits (not taken from flight data).
pub const DEFAULT_V_H_MAX: f64 = 1.5;
pub const DEFAULT_V_V_MAX: f64 = 1.0;
pub const DEFAULT_PSI_RATE_MAX: f64 = 1.5;
pub const DEFAULT_SAMPLE_INTERVAL: f64 = 0.15;
pub const DEFAULT_SEGMENT_DURATION: f64 = 3.0;

fn base(start: Vector3<f64>, end: Vector3<f64>) -> ConstraintSet {
    ConstraintSet {
        start: BoundaryState::at_rest(start),
        end: BoundaryState::at_rest(end),
        waypoints: vec![],
        v_h_max: DEFAULT_V_H_MAX,
        v_v_max: DEFAULT_V_V_MAX,
        psi_rate_max: DEFAULT_PSI_RATE_MAX,
        obstacles: vec![],
        sample_interval: DEFAULT_SAMPLE_INTERVAL,
        sphere_from_origin: false,
    }
}

fn options(segments: usize) -> PlanOptions {
    PlanOptions { segments, segment_duration: DEFAULT_SEGMENT_DURATION, ..PlanOptions::default() }
}

fn polar(r: f64, angle: f64) -> Vector3<f64> {
    Vector3::new(r * angle.cos(), r * angle.sin(), 0.0)
}

pub fn case_library(name: &str) -> Result<Scenario, PlannerError> {
    let t = DEFAULT_SEGMENT_DURATION;
    let (constraints, options) = match name {
        "a" => {
            let mut c = base(Vector3::zeros(), Vector3::repeat(1.0));
            c.obstacles.push(ObstacleShape::Sphere { center: Vector3::repeat(0.5), radius: 0.5 });
            (c, options(1))
        }
        "b" => {
            let mut c = base(Vector3::zeros(), Vector3::new(0.0, 2.0, 0.0));
            c.obstacles.push(ObstacleShape::CylinderX { center_yz: Vector2::new(0.5, -0.2), radius: 0.3 });
            c.obstacles.push(ObstacleShape::CylinderX { center_yz: Vector2::new(1.5, 0.1), radius: 0.3 });
            (c, options(2))
        }
        "c" => {
            let home = Vector3::new(1.5, 0.0, 0.0);
            let mut c = base(home, home);
            // Even-numbered waypoints sit at segment midpoints, the others at junctions.
            c.waypoints = vec![
                Waypoint { segment: 0, local_time: t / 2.0, position: polar(0.3, PI / 3.0) },
                Waypoint { segment: 0, local_time: t, position: polar(1.5, 2.0 * PI / 3.0) },
                Waypoint { segment: 1, local_time: t / 2.0, position: Vector3::new(-0.3, 0.0, 0.0) },
                Waypoint { segment: 1, local_time: t, position: polar(1.5, 4.0 * PI / 3.0) },
                Waypoint { segment: 2, local_time: t / 2.0, position: polar(0.3, 5.0 * PI / 3.0) },
            ];
            // Heading-rate limit off: sharp turns at the junction waypoints are the point of this case.
            c.psi_rate_max = f64::INFINITY;
            (c, options(3))
        }
        "line" => {
            let speed = Vector3::new(0.5, 0.0, 0.0);
            let mut c = base(Vector3::zeros(), Vector3::new(0.5 * 2.0 * t, 0.0, 0.0));
            c.start.velocity = speed;
            c.end.velocity = speed;
            (c, options(2))
        }
        other => return Err(PlannerError::UnknownCase(other.to_string())),
    };
    Ok(Scenario { name: name.to_string(), constraints, weights: ObjectiveWeights::default(), options })
}
