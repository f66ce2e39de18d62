//! Multi-start augmented-Lagrangian planner.
//!
//! Equalities are eliminated exactly by parametrizing the coefficient vector
//! on the affine equality manifold. The sampled inequalities enter through a
//! PHR augmented Lagrangian whose inner problems are solved with L-BFGS.

use std::cell::{Cell, RefCell};

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::constraints::{
    constraint_residuals, constraint_residuals_at, equality_rows, sample_times, CoefficientLayout,
    ConstraintResiduals, ConstraintSet, ObstacleShape, HEADING_RATE_EPS,
};
use super::qp::EqualityManifold;
use super::trajectory::{gauss_legendre, snap_objective, ObjectiveWeights, PiecewiseTrajectory, VELOCITY_QUADRATURE_NODES};
use super::PlannerError;

/// Smoothing (m/s) of `|σ̇_j|` inside the optimizer.
const VELOCITY_SMOOTHING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub segments: usize,
    pub order: usize,
    pub segment_duration: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Added to obstacle radii while optimizing (m).
    #[serde(default = "default_obstacle_margin")]
    pub obstacle_margin: f64,
    /// Kinodynamic limits are multiplied by this while optimizing.
    #[serde(default = "default_limit_factor")]
    pub limit_factor: f64,
    /// Acceptance threshold on each sampled aggregate.
    #[serde(default = "default_inequality_tol")]
    pub inequality_tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_max_inner")]
    pub max_inner: u64,
    /// Densification of the verification grid relative to the sample grid.
    #[serde(default = "default_verify_factor")]
    pub verify_factor: usize,
}

fn default_obstacle_margin() -> f64 {
    0.05
}
fn default_limit_factor() -> f64 {
    0.98
}
fn default_inequality_tol() -> f64 {
    1e-6
}
fn default_max_outer() -> usize {
    30
}
fn default_max_inner() -> u64 {
    300
}
fn default_verify_factor() -> usize {
    10
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            segments: 1,
            order: 6,
            segment_duration: 3.0,
            restarts: 16,
            seed: 0,
            obstacle_margin: default_obstacle_margin(),
            limit_factor: default_limit_factor(),
            inequality_tol: default_inequality_tol(),
            max_outer: default_max_outer(),
            max_inner: default_max_inner(),
            verify_factor: default_verify_factor(),
        }
    }
}

impl PlanOptions {
    pub fn layout(&self) -> CoefficientLayout {
        CoefficientLayout::new(self.segments, self.order, self.segment_duration)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.segments == 0 || self.order < 4 || self.restarts == 0 {
            return Err(PlannerError::InvalidConfig(
                "need segments >= 1, order >= 4 and restarts >= 1".into(),
            ));
        }
        if !(self.segment_duration > 0.0) || !(self.limit_factor > 0.0 && self.limit_factor <= 1.0) {
            return Err(PlannerError::InvalidConfig("need segment_duration > 0 and limit_factor in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartOutcome {
    pub index: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub feasible: bool,
    pub outer_iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanReport {
    pub objective: f64,
    pub best_restart: usize,
    pub feasible_restarts: usize,
    /// Nominal-limit residuals at the sample grid.
    pub residuals: ConstraintResiduals,
    /// Nominal-limit residuals on the denser verification grid.
    pub verification: ConstraintResiduals,
    pub restarts: Vec<RestartOutcome>,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: PiecewiseTrajectory,
    pub report: PlanReport,
}

/// Derivative weights at one time point.
struct PointBasis {
    segment: usize,
    rows: [Vec<f64>; 3],
}

impl PointBasis {
    fn new(layout: &CoefficientLayout, segment: usize, tau: f64) -> Self {
        Self {
            segment,
            rows: [layout.basis(segment, tau, 0), layout.basis(segment, tau, 1), layout.basis(segment, tau, 2)],
        }
    }

    fn eval(&self, layout: &CoefficientLayout, z: &DVector<f64>, k: usize) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for j in 0..3 {
            let base = layout.index(self.segment, j, 0);
            out[j] = self.rows[k].iter().enumerate().map(|(i, w)| w * z[base + i]).sum();
        }
        out
    }

    fn scatter(&self, layout: &CoefficientLayout, grad: &mut DVector<f64>, k: usize, g: &Vector3<f64>) {
        for j in 0..3 {
            if g[j] == 0.0 {
                continue;
            }
            let base = layout.index(self.segment, j, 0);
            for (i, w) in self.rows[k].iter().enumerate() {
                grad[base + i] += w * g[j];
            }
        }
    }
}

/// Smooth inequality `g ≤ 0` with gradients in position, velocity and acceleration.
struct Inequality {
    value: f64,
    dp: Vector3<f64>,
    dv: Vector3<f64>,
    da: Vector3<f64>,
}

fn sample_inequalities(cons: &ConstraintSet, p: &Vector3<f64>, v: &Vector3<f64>, a: &Vector3<f64>, out: &mut Vec<Inequality>) {
    let zero = Vector3::zeros();
    let eps2 = HEADING_RATE_EPS * HEADING_RATE_EPS;
    let sh = (v.x * v.x + v.y * v.y + eps2).sqrt();
    out.push(Inequality { value: sh - cons.v_h_max, dp: zero, dv: Vector3::new(v.x / sh, v.y / sh, 0.0), da: zero });
    out.push(Inequality { value: v.z - cons.v_v_max, dp: zero, dv: Vector3::z(), da: zero });
    out.push(Inequality { value: -v.z - cons.v_v_max, dp: zero, dv: -Vector3::z(), da: zero });
    if cons.psi_rate_max.is_finite() {
        let d = v.x * v.x + v.y * v.y + eps2;
        let rate = (v.x * a.y - v.y * a.x) / d;
        let dv = Vector3::new(a.y / d - rate * 2.0 * v.x / d, -a.x / d - rate * 2.0 * v.y / d, 0.0);
        let da = Vector3::new(-v.y / d, v.x / d, 0.0);
        out.push(Inequality { value: rate - cons.psi_rate_max, dp: zero, dv, da });
        out.push(Inequality { value: -rate - cons.psi_rate_max, dp: zero, dv: -dv, da: -da });
    }
    for ob in &cons.obstacles {
        let (dist, n) = ob.center_distance(p, cons.sphere_from_origin);
        out.push(Inequality { value: ob.radius() - dist, dp: -n, dv: zero, da: zero });
    }
}

/// Everything needed to evaluate the augmented Lagrangian in reduced coordinates.
struct Problem {
    layout: CoefficientLayout,
    manifold: EqualityManifold,
    hessian: DMatrix<f64>,
    samples: Vec<PointBasis>,
    quadrature: Vec<(PointBasis, f64)>,
    cons: ConstraintSet,
    weights: ObjectiveWeights,
    /// Objective normalization.
    scale: f64,
}

impl Problem {
    fn objective_and_gradient(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let hz = &self.hessian * z;
        let mut value = self.weights.mu_p * z.dot(&hz);
        let mut grad = hz * (2.0 * self.weights.mu_p);
        if self.weights.mu_v > 0.0 {
            let e2 = VELOCITY_SMOOTHING * VELOCITY_SMOOTHING;
            for (basis, w) in &self.quadrature {
                let v = basis.eval(&self.layout, z, 1);
                let mut g = Vector3::zeros();
                for j in 0..3 {
                    let s = (v[j] * v[j] + e2).sqrt();
                    value += self.weights.mu_v * w * s;
                    g[j] = self.weights.mu_v * w * v[j] / s;
                }
                basis.scatter(&self.layout, &mut grad, 1, &g);
            }
        }
        (value / self.scale, grad / self.scale)
    }

    fn inequalities(&self, z: &DVector<f64>) -> Vec<(usize, Inequality)> {
        let mut out = Vec::new();
        let mut buf = Vec::new();
        for (s, basis) in self.samples.iter().enumerate() {
            let p = basis.eval(&self.layout, z, 0);
            let v = basis.eval(&self.layout, z, 1);
            let a = basis.eval(&self.layout, z, 2);
            buf.clear();
            sample_inequalities(&self.cons, &p, &v, &a, &mut buf);
            out.extend(buf.drain(..).map(|g| (s, g)));
        }
        out
    }

    /// PHR augmented Lagrangian and its gradient in reduced coordinates.
    fn augmented(&self, y: &DVector<f64>, lambda: &[f64], rho: f64) -> (f64, DVector<f64>) {
        let z = self.manifold.point(y);
        let (mut value, mut grad) = self.objective_and_gradient(&z);
        for (idx, (s, g)) in self.inequalities(&z).into_iter().enumerate() {
            let shifted = (g.value + lambda[idx] / rho).max(0.0);
            if shifted > 0.0 {
                value += 0.5 * rho * shifted * shifted;
                let c = rho * shifted;
                let basis = &self.samples[s];
                basis.scatter(&self.layout, &mut grad, 0, &(g.dp * c));
                basis.scatter(&self.layout, &mut grad, 1, &(g.dv * c));
                basis.scatter(&self.layout, &mut grad, 2, &(g.da * c));
            }
        }
        (value, self.manifold.null_basis.transpose() * grad)
    }
}

/// Inner-loop budget in objective evaluations; guards against line searches
/// that fail to terminate on the piecewise-quadratic penalty.
const MAX_INNER_EVALUATIONS: usize = 20_000;

struct InnerProblem<'a> {
    problem: &'a Problem,
    lambda: &'a [f64],
    rho: f64,
    evaluations: &'a Cell<usize>,
    best: &'a RefCell<(f64, DVector<f64>)>,
}

impl InnerProblem<'_> {
    fn evaluate(&self, y: &DVector<f64>) -> Result<(f64, DVector<f64>), argmin::core::Error> {
        let n = self.evaluations.get() + 1;
        self.evaluations.set(n);
        if n > MAX_INNER_EVALUATIONS {
            return Err(argmin::core::Error::msg("inner evaluation budget exhausted"));
        }
        let (value, grad) = self.problem.augmented(y, self.lambda, self.rho);
        if !value.is_finite() {
            return Err(argmin::core::Error::msg("non-finite augmented Lagrangian"));
        }
        let mut best = self.best.borrow_mut();
        if value < best.0 {
            *best = (value, y.clone());
        }
        Ok((value, grad))
    }
}

impl CostFunction for InnerProblem<'_> {
    type Param = DVector<f64>;
    type Output = f64;

    fn cost(&self, y: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.evaluate(y)?.0)
    }
}

impl Gradient for InnerProblem<'_> {
    type Param = DVector<f64>;
    type Gradient = DVector<f64>;

    fn gradient(&self, y: &Self::Param) -> Result<DVector<f64>, argmin::core::Error> {
        Ok(self.evaluate(y)?.1)
    }
}

fn minimize_inner(problem: &Problem, y0: DVector<f64>, lambda: &[f64], rho: f64, max_iters: u64) -> DVector<f64> {
    if y0.is_empty() {
        return y0;
    }
    let start_cost = problem.augmented(&y0, lambda, rho).0;
    let evaluations = Cell::new(0);
    let best = RefCell::new((start_cost, y0.clone()));
    let inner = InnerProblem { problem, lambda, rho, evaluations: &evaluations, best: &best };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 12)
        .with_tolerance_grad(1e-10)
        .and_then(|s| s.with_tolerance_cost(1e-14));
    let Ok(solver) = solver else {
        return y0;
    };
    if let Err(e) = Executor::new(inner, solver).configure(|state| state.param(y0).max_iters(max_iters)).run() {
        log::debug!("inner solve stopped early after {} evaluations: {e}", evaluations.get());
    }
    best.into_inner().1
}

struct Solve {
    z: DVector<f64>,
    outer_iterations: usize,
    kkt_residual: f64,
    max_violation: f64,
}

fn solve_from(problem: &Problem, y0: DVector<f64>, opts: &PlanOptions) -> Solve {
    let count = problem.inequalities(&problem.manifold.point(&y0)).len();
    let mut lambda = vec![0.0; count];
    let mut rho = 10.0;
    let mut y = y0;
    let mut prev_violation = f64::INFINITY;
    let mut prev_value = f64::INFINITY;
    let mut outer = 0;
    let mut violation = f64::INFINITY;
    while outer < opts.max_outer {
        outer += 1;
        y = minimize_inner(problem, y, &lambda, rho, opts.max_inner);
        let z = problem.manifold.point(&y);
        let ineq = problem.inequalities(&z);
        violation = ineq.iter().map(|(_, g)| g.value.max(0.0)).fold(0.0, f64::max);
        let complementarity = ineq
            .iter()
            .zip(&lambda)
            .map(|((_, g), l)| (g.value.max(-l / rho)).abs())
            .fold(0.0, f64::max);
        for ((_, g), l) in ineq.iter().zip(lambda.iter_mut()) {
            *l = (*l + rho * g.value).max(0.0);
        }
        let value = problem.objective_and_gradient(&z).0;
        let settled = (value - prev_value).abs() <= 1e-9 * value.abs().max(1.0);
        if violation <= 0.1 * opts.inequality_tol && complementarity <= 1e-6 && settled {
            break;
        }
        if violation > 0.25 * prev_violation {
            rho = (rho * 10.0).min(1e10);
        }
        prev_violation = violation;
        prev_value = value;
    }
    // Stationarity of the Lagrangian with the updated multipliers.
    let z = problem.manifold.point(&y);
    let (_, mut grad) = problem.objective_and_gradient(&z);
    for ((s, g), l) in problem.inequalities(&z).into_iter().zip(&lambda) {
        if *l > 0.0 {
            let basis = &problem.samples[s];
            basis.scatter(&problem.layout, &mut grad, 0, &(g.dp * *l));
            basis.scatter(&problem.layout, &mut grad, 1, &(g.dv * *l));
            basis.scatter(&problem.layout, &mut grad, 2, &(g.da * *l));
        }
    }
    let kkt_residual = (problem.manifold.null_basis.transpose() * grad).amax();
    Solve { z, outer_iterations: outer, kkt_residual, max_violation: violation }
}

/// Characteristic length of the positional data, for sizing random guesses.
fn position_span(cons: &ConstraintSet) -> f64 {
    let mut pts = vec![cons.start.position, cons.end.position];
    pts.extend(cons.waypoints.iter().map(|w| w.position));
    let mut span: f64 = 0.0;
    for a in &pts {
        for b in &pts {
            span = span.max((a - b).amax());
        }
    }
    span.max(1.0)
}

fn build_problem(cons: &ConstraintSet, weights: &ObjectiveWeights, opts: &PlanOptions) -> Result<Problem, PlannerError> {
    let layout = opts.layout();
    let rows = equality_rows(cons, &layout)?;
    let manifold = EqualityManifold::from_rows(&rows)?;
    let hessian = layout.snap_hessian();
    let duration = opts.segment_duration * opts.segments as f64;
    let samples = sample_times(duration, cons.sample_interval)
        .into_iter()
        .map(|t| {
            let seg = ((t / opts.segment_duration).floor() as usize).min(opts.segments - 1);
            PointBasis::new(&layout, seg, t / opts.segment_duration - seg as f64)
        })
        .collect();
    let (nodes, gl_weights) = gauss_legendre(VELOCITY_QUADRATURE_NODES);
    let mut quadrature = Vec::new();
    for seg in 0..opts.segments {
        for (x, w) in nodes.iter().zip(&gl_weights) {
            quadrature.push((PointBasis::new(&layout, seg, *x), w * opts.segment_duration));
        }
    }
    let planning = cons.inflated(opts.obstacle_margin).tightened(opts.limit_factor);
    let mut problem = Problem {
        layout,
        manifold,
        hessian,
        samples,
        quadrature,
        cons: planning,
        weights: *weights,
        scale: 1.0,
    };
    // Normalize by the unconstrained-inequality optimum so multipliers are O(1).
    let z_p = problem.manifold.particular.clone();
    let reduced = problem.manifold.null_basis.transpose() * &problem.hessian * &problem.manifold.null_basis;
    let rhs = -(problem.manifold.null_basis.transpose() * &problem.hessian * &z_p);
    let y_qp = reduced.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(problem.manifold.dim()));
    problem.scale = problem.objective_and_gradient(&problem.manifold.point(&y_qp)).0.max(1.0);
    Ok(problem)
}

fn random_start(problem: &Problem, span: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    // Uniform in a box of half-width span/Tⁱ per physical coefficient, i.e.
    // `span` in normalized coefficients, offset by the particular solution.
    let z = DVector::from_fn(problem.layout.len(), |_, _| rng.random_range(-span..span));
    problem.manifold.coordinates(&(&problem.manifold.particular + z))
}

/// Plans a trajectory meeting `cons`, returning the best feasible restart.
pub fn plan(cons: &ConstraintSet, weights: &ObjectiveWeights, opts: &PlanOptions) -> Result<PlanResult, PlannerError> {
    cons.validate()?;
    weights.validate()?;
    opts.validate()?;
    let problem = build_problem(cons, weights, opts)?;
    let span = position_span(cons);
    let layout = &problem.layout;
    let duration = opts.segment_duration * opts.segments as f64;
    let verify_times = sample_times(duration, cons.sample_interval / opts.verify_factor.max(1) as f64);

    let outcomes: Vec<(Solve, ConstraintResiduals, f64)> = (0..opts.restarts)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(idx as u64);
            let y0 = random_start(&problem, span, &mut rng);
            let solve = solve_from(&problem, y0, opts);
            let traj = layout.to_trajectory(&solve.z);
            let residuals = constraint_residuals(&traj, cons).expect("samples inside domain");
            let objective = snap_objective(&traj, weights);
            (solve, residuals, objective)
        })
        .collect();

    let mut best: Option<usize> = None;
    let mut summaries = Vec::with_capacity(outcomes.len());
    for (idx, (solve, residuals, objective)) in outcomes.iter().enumerate() {
        let feasible = residuals.is_feasible(1e-8, opts.inequality_tol) && objective.is_finite();
        summaries.push(RestartOutcome {
            index: idx,
            objective: *objective,
            max_violation: residuals.max_inequality().max(residuals.max_equality()),
            feasible,
            outer_iterations: solve.outer_iterations,
            kkt_residual: solve.kkt_residual,
        });
        log::debug!(
            "restart {idx}: objective {objective:.6e}, planning violation {:.2e}, feasible {feasible}",
            solve.max_violation
        );
        if feasible && best.is_none_or(|b| *objective < outcomes[b].2) {
            best = Some(idx);
        }
    }

    let Some(best) = best else {
        let (_, residuals, _) = outcomes
            .iter()
            .min_by(|a, b| {
                let va = a.1.max_inequality().max(a.1.max_equality());
                let vb = b.1.max_inequality().max(b.1.max_equality());
                va.total_cmp(&vb)
            })
            .expect("at least one restart");
        let worst = residuals.worst.clone().expect("infeasible restart has a violation");
        return Err(PlannerError::Infeasible { name: worst.name, value: worst.value, time: worst.time });
    };
    let (solve, residuals, objective) = &outcomes[best];
    let trajectory = layout.to_trajectory(&solve.z);
    let verification = constraint_residuals_at(&trajectory, cons, &verify_times)?;
    let feasible_restarts = summaries.iter().filter(|s| s.feasible).count();
    Ok(PlanResult {
        trajectory,
        report: PlanReport {
            objective: *objective,
            best_restart: best,
            feasible_restarts,
            residuals: residuals.clone(),
            verification,
            restarts: summaries,
        },
    })
}

/// Smallest distance from any obstacle surface's center set over `times`.
pub fn min_center_distance(traj: &PiecewiseTrajectory, obstacle: &ObstacleShape, times: &[f64]) -> f64 {
    times
        .iter()
        .map(|&t| obstacle.center_distance(&traj.eval(t, 0).expect("time in domain"), false).0)
        .fold(f64::INFINITY, f64::min)
}
