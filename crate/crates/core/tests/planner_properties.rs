use fwav_core::planner::constraints::{BoundaryState, ConstraintSet};
use fwav_core::planner::{case_library, plan, snap_objective, solve_qp_equality, ObjectiveWeights, PlanOptions};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

#[test]
fn nonlinear_planner_matches_qp_oracle_without_obstacles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights = ObjectiveWeights { mu_p: 1.0, mu_v: 0.0 };
    for trial in 0..20 {
        let segments = 1 + trial % 3;
        let cons = ConstraintSet {
            start: BoundaryState {
                position: random_vec(&mut rng, 2.0),
                velocity: random_vec(&mut rng, 0.5),
                acceleration: random_vec(&mut rng, 0.2),
            },
            end: BoundaryState {
                position: random_vec(&mut rng, 2.0),
                velocity: random_vec(&mut rng, 0.5),
                acceleration: random_vec(&mut rng, 0.2),
            },
            waypoints: vec![],
            v_h_max: f64::INFINITY,
            v_v_max: f64::INFINITY,
            psi_rate_max: f64::INFINITY,
            obstacles: vec![],
            sample_interval: 0.15,
            sphere_from_origin: false,
        };
        let opts = PlanOptions { segments, restarts: 2, seed: trial as u64, ..PlanOptions::default() };
        let planned = plan(&cons, &weights, &opts).unwrap();
        let (qp_traj, qp) = solve_qp_equality(&cons, &opts.layout()).unwrap();
        let rel = (planned.report.objective - qp.objective).abs() / qp.objective.max(1e-12);
        assert!(rel <= 1e-6, "trial {trial}: planner {} vs oracle {} (rel {rel:e})", planned.report.objective, qp.objective);
        assert!((snap_objective(&qp_traj, &weights) - qp.objective).abs() <= 1e-9 * qp.objective.max(1.0));
    }
}

#[test]
fn planning_is_deterministic() {
    let sc = case_library("b").unwrap();
    let a = plan(&sc.constraints, &sc.weights, &sc.options).unwrap();
    let b = plan(&sc.constraints, &sc.weights, &sc.options).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.report.best_restart, b.report.best_restart);
}

#[test]
fn solution_translates_with_the_data() {
    let sc = case_library("a").unwrap();
    let offset = Vector3::new(2.0, -1.0, 0.5);
    let moved = sc.constraints.translated(&offset);
    let base = plan(&sc.constraints, &sc.weights, &sc.options).unwrap();
    let shifted = plan(&moved, &sc.weights, &sc.options).unwrap();
    assert!((base.report.objective - shifted.report.objective).abs() <= 1e-6 * base.report.objective);
    for k in 0..=30 {
        let t = k as f64 * 0.1;
        let p = base.trajectory.eval(t, 0).unwrap() + offset;
        let q = shifted.trajectory.eval(t, 0).unwrap();
        assert!((p - q).norm() < 1e-4, "t = {t}: {p:?} vs {q:?}");
    }
}

#[test]
fn infeasible_configuration_reports_worst_residual() {
    let mut sc = case_library("a").unwrap();
    sc.constraints.v_h_max = 0.05;
    sc.options.restarts = 2;
    let err = plan(&sc.constraints, &sc.weights, &sc.options).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("worst residual"), "{msg}");
}
