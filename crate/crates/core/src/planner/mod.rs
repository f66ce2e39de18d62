//! Minimum-snap multi-segment trajectory planning.

pub mod cases;
pub mod constraints;
pub mod optimize;
pub mod qp;
pub mod trajectory;

use thiserror::Error;

pub use constraints::{
    constraint_residuals, constraint_residuals_at, rec, sample_times, BoundaryState, ConstraintResiduals,
    ConstraintSet, ObstacleShape, Waypoint,
};
pub use cases::{case_library, Scenario, CASE_NAMES};
pub use optimize::{plan, PlanOptions, PlanReport, PlanResult};
pub use qp::solve_qp_equality;
pub use trajectory::{snap_objective, ObjectiveWeights, PiecewiseTrajectory, PolySegment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("time {t} outside trajectory domain [0, {duration}]")]
    Domain { t: f64, duration: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("equality constraints are rank deficient; dependent rows: {rows:?}")]
    RankDeficient { rows: Vec<String> },
    #[error("quadratic objective is not positive definite on the constraint null space ({free} free directions)")]
    Underdetermined { free: usize },
    #[error("no restart reached feasibility; worst residual {name} = {value:.3e}{}", time.map(|t| format!(" at t = {t:.3} s")).unwrap_or_default())]
    Infeasible { name: String, value: f64, time: Option<f64> },
    #[error("unknown case {0:?}; expected one of a, b, c, line")]
    UnknownCase(String),
}
