//! Piecewise polynomial flat-output trajectories.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::PlannerError;

/// Tolerance used when resolving a query time onto the trajectory domain.
const TIME_SLACK: f64 = 1e-9;

/// One polynomial segment, `σ_j(t) = Σ_i c_{j,i} tⁱ` for local `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySegment {
    pub coeffs: [Vec<f64>; 3],
    pub duration: f64,
}

fn falling_factorial(i: usize, k: usize) -> f64 {
    if k > i {
        0.0
    } else {
        ((i - k + 1)..=i).map(|x| x as f64).product()
    }
}

/// k-th derivative of `Σ cᵢ tⁱ`, Horner form.
pub fn poly_derivative(coeffs: &[f64], t: f64, k: usize) -> f64 {
    let mut acc = 0.0;
    for i in (k..coeffs.len()).rev() {
        acc = acc * t + coeffs[i] * falling_factorial(i, k);
    }
    acc
}

impl PolySegment {
    pub fn new(coeffs: [Vec<f64>; 3], duration: f64) -> Result<Self, PlannerError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(PlannerError::InvalidConfig(format!("segment duration must be > 0, got {duration}")));
        }
        let n = coeffs[0].len();
        if n == 0 || coeffs.iter().any(|c| c.len() != n) {
            return Err(PlannerError::InvalidConfig("segment axes must share a nonzero coefficient count".into()));
        }
        Ok(Self { coeffs, duration })
    }

    /// Polynomial order N (coefficient count minus one).
    pub fn order(&self) -> usize {
        self.coeffs[0].len() - 1
    }

    pub fn eval_local(&self, t: f64, k: usize) -> Vector3<f64> {
        Vector3::new(
            poly_derivative(&self.coeffs[0], t, k),
            poly_derivative(&self.coeffs[1], t, k),
            poly_derivative(&self.coeffs[2], t, k),
        )
    }

    /// Closed-form `∫₀ᵀ Σ_j (σ_j⁽⁴⁾)² dt`.
    pub fn snap_integral(&self) -> f64 {
        let t = self.duration;
        let mut total = 0.0;
        for c in &self.coeffs {
            for i in 4..c.len() {
                for j in 4..c.len() {
                    let p = (i + j - 7) as i32;
                    total += c[i] * c[j] * falling_factorial(i, 4) * falling_factorial(j, 4) * t.powi(p) / p as f64;
                }
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseTrajectory {
    pub segments: Vec<PolySegment>,
}

/// Weights of the snap and path-velocity terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub mu_p: f64,
    pub mu_v: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { mu_p: 1.0, mu_v: 0.1 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(self.mu_p > 0.0) || !(self.mu_v >= 0.0) {
            return Err(PlannerError::InvalidConfig(format!(
                "need mu_p > 0 and mu_v >= 0, got {} and {}",
                self.mu_p, self.mu_v
            )));
        }
        Ok(())
    }
}

impl PiecewiseTrajectory {
    pub fn new(segments: Vec<PolySegment>) -> Result<Self, PlannerError> {
        let Some(first) = segments.first() else {
            return Err(PlannerError::InvalidConfig("trajectory needs at least one segment".into()));
        };
        let n = first.order();
        if segments.iter().any(|s| s.order() != n) {
            return Err(PlannerError::InvalidConfig("segments must share one polynomial order".into()));
        }
        Ok(Self { segments })
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Start time of each segment.
    pub fn segment_starts(&self) -> Vec<f64> {
        let mut t = 0.0;
        self.segments
            .iter()
            .map(|s| {
                let start = t;
                t += s.duration;
                start
            })
            .collect()
    }

    /// Maps a global time to `(segment, local time)`; junctions go to the later segment.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), PlannerError> {
        let total = self.duration();
        if !(t >= -TIME_SLACK && t <= total + TIME_SLACK) {
            return Err(PlannerError::Domain { t, duration: total });
        }
        let mut start = 0.0;
        let last = self.segments.len() - 1;
        for (idx, seg) in self.segments.iter().enumerate() {
            if idx == last || t < start + seg.duration {
                return Ok((idx, (t - start).clamp(0.0, seg.duration)));
            }
            start += seg.duration;
        }
        unreachable!("last segment always matches")
    }

    /// `order`-th derivative of σ at global time `t`.
    pub fn eval(&self, t: f64, order: usize) -> Result<Vector3<f64>, PlannerError> {
        let (idx, local) = self.locate(t)?;
        Ok(self.segments[idx].eval_local(local, order))
    }

    /// Derivatives `0..count` at `t`.
    pub fn derivatives(&self, t: f64, count: usize) -> Result<Vec<Vector3<f64>>, PlannerError> {
        let (idx, local) = self.locate(t)?;
        Ok((0..count).map(|k| self.segments[idx].eval_local(local, k)).collect())
    }

    /// Largest derivative mismatch of orders `0..=max_order` over all junctions.
    pub fn continuity_mismatch(&self, max_order: usize) -> f64 {
        self.segments
            .windows(2)
            .flat_map(|w| {
                (0..=max_order).map(move |k| (w[0].eval_local(w[0].duration, k) - w[1].eval_local(0.0, k)).amax())
            })
            .fold(0.0, f64::max)
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        for seg in &mut out.segments {
            for axis in 0..3 {
                seg.coeffs[axis][0] += offset[axis];
            }
        }
        out
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Quadrature order for the path-velocity term.
pub const VELOCITY_QUADRATURE_NODES: usize = 32;

/// `∫ Σ_j |σ̇_j| dt` by fixed-order Gauss–Legendre per segment.
pub fn velocity_integral(traj: &PiecewiseTrajectory) -> f64 {
    let (nodes, weights) = gauss_legendre(VELOCITY_QUADRATURE_NODES);
    traj.segments
        .iter()
        .map(|seg| {
            nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * seg.eval_local(x * seg.duration, 1).abs().sum())
                .sum::<f64>()
                * seg.duration
        })
        .sum()
}

/// `μ_p ∫ Σ‖σ⁽⁴⁾‖² dt + μ_v ∫ Σ|σ̇| dt`.
pub fn snap_objective(traj: &PiecewiseTrajectory, weights: &ObjectiveWeights) -> f64 {
    let snap: f64 = traj.segments.iter().map(PolySegment::snap_integral).sum();
    let velocity = if weights.mu_v > 0.0 { velocity_integral(traj) } else { 0.0 };
    weights.mu_p * snap + weights.mu_v * velocity
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(axis_x: Vec<f64>, duration: f64) -> PiecewiseTrajectory {
        let n = axis_x.len();
        PiecewiseTrajectory::new(vec![PolySegment::new([axis_x, vec![0.0; n], vec![0.0; n]], duration).unwrap()]).unwrap()
    }

    #[test]
    fn eval_examples() {
        let c = single(vec![1.0, 0.0, 0.0, 0.0], 2.0);
        assert_eq!(c.eval(0.7, 0).unwrap().x, 1.0);
        let cubic = single(vec![0.0, 0.0, 0.0, 1.0], 3.0);
        assert_relative_eq!(cubic.eval(2.0, 3).unwrap().x, 6.0);
        assert_eq!(cubic.eval(2.0, 4).unwrap().x, 0.0);
        assert_relative_eq!(cubic.eval(2.0, 1).unwrap().x, 12.0);
        assert!(cubic.eval(3.5, 0).is_err());
        assert!(cubic.eval(-0.1, 0).is_err());
    }

    #[test]
    fn junction_resolves_to_later_segment() {
        let a = PolySegment::new([vec![0.0, 1.0], vec![0.0; 2], vec![0.0; 2]], 1.0).unwrap();
        let b = PolySegment::new([vec![5.0, 0.0], vec![0.0; 2], vec![0.0; 2]], 1.0).unwrap();
        let traj = PiecewiseTrajectory::new(vec![a, b]).unwrap();
        assert_eq!(traj.locate(1.0).unwrap(), (1, 0.0));
        assert_eq!(traj.eval(1.0, 0).unwrap().x, 5.0);
        assert_eq!(traj.locate(2.0).unwrap(), (1, 1.0));
        assert_relative_eq!(traj.continuity_mismatch(0), 4.0);
    }

    #[test]
    fn snap_objective_examples() {
        let w = ObjectiveWeights { mu_p: 1.0, mu_v: 0.0 };
        assert_eq!(snap_objective(&single(vec![1.0, -2.0, 3.0, 4.0], 2.0), &w), 0.0);
        let quartic = single(vec![0.0, 0.0, 0.0, 0.0, 1.0 / 24.0], 1.0);
        assert_relative_eq!(snap_objective(&quartic, &w), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(15)).sum();
        assert_relative_eq!(integral, 1.0 / 16.0, epsilon = 1e-14);
    }

    #[test]
    fn velocity_integral_of_line_is_path_length() {
        let line = single(vec![0.0, 0.5], 6.0);
        let w = ObjectiveWeights { mu_p: 1.0, mu_v: 1.0 };
        assert_relative_eq!(snap_objective(&line, &w), 3.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn closed_form_snap_matches_quadrature(
            c in proptest::collection::vec(-2.0..2.0f64, 7),
            duration in 0.5..4.0f64,
        ) {
            // Oracle: composite Simpson rule on 10⁴ intervals.
            let traj = single(c.clone(), duration);
            let w = ObjectiveWeights { mu_p: 1.0, mu_v: 0.0 };
            let n = 10_000;
            let h = duration / n as f64;
            let f = |t: f64| poly_derivative(&c, t, 4).powi(2);
            let mut acc = f(0.0) + f(duration);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
            }
            let simpson = acc * h / 3.0;
            let closed = snap_objective(&traj, &w);
            prop_assert!((closed - simpson).abs() <= 1e-8 * simpson.max(1.0));
        }
    }
}
