//! Exact equality-constrained minimum-snap solve and the affine parametrization
//! of the equality manifold used by the nonlinear planner.

use nalgebra::{DMatrix, DVector};

use super::constraints::{equality_rows, CoefficientLayout, ConstraintSet, EqualityRows};
use super::trajectory::PiecewiseTrajectory;
use super::PlannerError;

/// Relative tolerance for detecting dependent constraint rows.
const RANK_TOL: f64 = 1e-10;

/// Names of rows that are linear combinations of earlier rows.
///
/// Modified Gram–Schmidt with one re-orthogonalization pass.
pub fn dependent_rows(rows: &EqualityRows) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (r, name) in rows.names.iter().enumerate() {
        let original = rows.a.row(r).transpose();
        let scale = original.norm();
        let mut v = original.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let n = v.norm();
        if scale == 0.0 || n <= RANK_TOL.sqrt() * scale {
            dependent.push(name.clone());
        } else {
            basis.push(v / n);
        }
    }
    dependent
}

/// `{z : A z = b} = {z_p + Z y}` with orthonormal `Z`.
#[derive(Debug, Clone)]
pub struct EqualityManifold {
    pub particular: DVector<f64>,
    pub null_basis: DMatrix<f64>,
}

impl EqualityManifold {
    pub fn from_rows(rows: &EqualityRows) -> Result<Self, PlannerError> {
        let dependent = dependent_rows(rows);
        if !dependent.is_empty() {
            return Err(PlannerError::RankDeficient { rows: dependent });
        }
        let (m, n) = (rows.a.nrows(), rows.a.ncols());
        // Pad to square so the SVD returns a complete right basis.
        let mut padded = DMatrix::zeros(n, n);
        padded.rows_mut(0, m).copy_from(&rows.a);
        let svd = padded.svd(true, true);
        let v_t = svd.v_t.expect("requested");
        let u = svd.u.expect("requested");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
        let range = &order[..m];
        let null = &order[m..];

        let mut particular = DVector::zeros(n);
        let mut b_padded = DVector::zeros(n);
        b_padded.rows_mut(0, m).copy_from(&rows.b);
        for &k in range {
            let coeff = u.column(k).dot(&b_padded) / svd.singular_values[k];
            particular += v_t.row(k).transpose() * coeff;
        }
        let mut null_basis = DMatrix::zeros(n, null.len());
        for (c, &k) in null.iter().enumerate() {
            null_basis.set_column(c, &v_t.row(k).transpose());
        }
        Ok(Self { particular, null_basis })
    }

    pub fn dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn point(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.particular + &self.null_basis * y
    }

    /// Orthogonal projection of `z` onto reduced coordinates.
    pub fn coordinates(&self, z: &DVector<f64>) -> DVector<f64> {
        self.null_basis.transpose() * (z - &self.particular)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Coefficients in normalized time, see [`CoefficientLayout`].
    pub coefficients: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Value of `zᵀ H z`.
    pub objective: f64,
    /// Infinity norm of the KKT residual.
    pub kkt_residual: f64,
}

/// Minimizes `zᵀ H z` subject to `A z = b` through the KKT system.
pub fn solve_equality_qp(hessian: &DMatrix<f64>, rows: &EqualityRows) -> Result<QpSolution, PlannerError> {
    let manifold = EqualityManifold::from_rows(rows)?;
    let reduced = manifold.null_basis.transpose() * hessian * &manifold.null_basis;
    let scale = hessian.amax().max(1.0);
    if manifold.dim() > 0 {
        let eig = reduced.symmetric_eigenvalues();
        let min = eig.min();
        if min <= 1e-12 * scale {
            let free = eig.iter().filter(|&&e| e <= 1e-12 * scale).count();
            return Err(PlannerError::Underdetermined { free });
        }
    }
    let (m, n) = (rows.a.nrows(), rows.a.ncols());
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(hessian * 2.0));
    kkt.view_mut((0, n), (n, m)).copy_from(&rows.a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&rows.a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(n, m).copy_from(&rows.b);
    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(PlannerError::Underdetermined { free: 0 })?;
    let kkt_residual = (&kkt * &sol - &rhs).amax();
    let coefficients = sol.rows(0, n).into_owned();
    let objective = (coefficients.transpose() * hessian * &coefficients)[0];
    Ok(QpSolution {
        coefficients,
        multipliers: sol.rows(n, m).into_owned(),
        objective,
        kkt_residual,
    })
}

/// Minimum-snap trajectory meeting only the equality constraints of `cons`.
///
/// Kinodynamic limits and obstacles are ignored, and so is the path-velocity
/// term of the objective.
pub fn solve_qp_equality(
    cons: &ConstraintSet,
    layout: &CoefficientLayout,
) -> Result<(PiecewiseTrajectory, QpSolution), PlannerError> {
    let rows = equality_rows(cons, layout)?;
    let sol = solve_equality_qp(&layout.snap_hessian(), &rows)?;
    Ok((layout.to_trajectory(&sol.coefficients), sol))
}
