use std::time::Instant;

use fwav_core::planner::constraints::sample_times;
use fwav_core::planner::optimize::min_center_distance;
use fwav_core::planner::{case_library, plan, ObstacleShape};

fn plan_case(name: &str) -> fwav_core::planner::PlanResult {
    let sc = case_library(name).unwrap();
    let start = Instant::now();
    let result = plan(&sc.constraints, &sc.weights, &sc.options).unwrap();
    eprintln!(
        "case {name}: objective {:.4}, feasible restarts {}/{}, {:.2?}",
        result.report.objective,
        result.report.feasible_restarts,
        sc.options.restarts,
        start.elapsed()
    );
    result
}

#[test]
fn case_a_clears_sphere() {
    let result = plan_case("a");
    let traj = &result.trajectory;
    let sphere = ObstacleShape::Sphere { center: nalgebra::Vector3::repeat(0.5), radius: 0.5 };
    assert!(min_center_distance(traj, &sphere, &sample_times(3.0, 0.15)) >= 0.5);
    assert!(min_center_distance(traj, &sphere, &sample_times(3.0, 0.015)) >= 0.45);
    assert!(result.report.residuals.max_equality() < 1e-8);
}

#[test]
fn case_b_clears_cylinders() {
    let result = plan_case("b");
    assert!(result.trajectory.continuity_mismatch(3) < 1e-6);
    assert_eq!(result.report.residuals.max_inequality(), 0.0);
}

#[test]
fn case_c_meets_waypoints() {
    let result = plan_case("c");
    assert!(result.report.residuals.max_equality() < 1e-8);
}

#[test]
fn line_is_straight() {
    let result = plan_case("line");
    for k in 0..=60 {
        let t = k as f64 * 0.1;
        let p = result.trajectory.eval(t, 0).unwrap();
        assert!((p - nalgebra::Vector3::new(0.5 * t, 0.0, 0.0)).norm() < 1e-6, "t = {t}: {p:?}");
    }
}
