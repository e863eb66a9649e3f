//! Quadratic-program layer between the dispatch solvers and a numerical
//! backend.
//!
//! Solvers assemble a [`QpProblem`] — convex quadratic objective, linear
//! equalities/inequalities, and variable bounds — and hand it to a
//! [`QpBackend`]. The backend contract: return a point whose objective is
//! accurate to about 1e-8 relative, or signal infeasibility/unboundedness.
//! The bundled [`ClarabelBackend`] wraps the pure-Rust Clarabel
//! interior-point solver with tolerances tightened well past that contract.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("malformed problem: {0}")]
    BadProblem(String),
    #[error("backend failed: {0}")]
    Numerical(String),
}

/// A sparse linear row `coeffs · x (= or ≤) rhs`.
pub type LinearRow = (Vec<(usize, f64)>, f64);

/// `minimize ½ xᵀPx + qᵀx + constant` subject to equalities, inequalities
/// (`row · x ≤ rhs`), and box bounds. `P` is stored as upper-triangle
/// triplets; use the `add_*` helpers to keep the convention straight.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n: usize,
    /// Upper-triangle entries of `P` (row ≤ col).
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<f64>,
    pub constant: f64,
    pub eq: Vec<LinearRow>,
    pub ineq: Vec<LinearRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn new(n: usize) -> QpProblem {
        QpProblem {
            n,
            quad: Vec::new(),
            lin: vec![0.0; n],
            constant: 0.0,
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// Add `c · x_i²` to the objective.
    pub fn add_square_cost(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.quad.push((i, i, 2.0 * c));
        }
    }

    /// Add `c · x_i x_j` (i ≠ j) to the objective.
    pub fn add_cross_cost(&mut self, i: usize, j: usize, c: f64) {
        if c != 0.0 {
            let (lo, hi) = (i.min(j), i.max(j));
            self.quad.push((lo, hi, c));
        }
    }

    pub fn add_linear_cost(&mut self, i: usize, c: f64) {
        self.lin[i] += c;
    }

    pub fn set_bounds(&mut self, i: usize, lower: f64, upper: f64) {
        self.lower[i] = lower;
        self.upper[i] = upper;
    }

    pub fn add_eq(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push((row, rhs));
    }

    /// `row · x ≤ rhs`
    pub fn add_ineq(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.ineq.push((row, rhs));
    }

    /// Evaluate the objective at a point.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut val = self.constant;
        for (c, xi) in self.lin.iter().zip(x) {
            val += c * xi;
        }
        for &(i, j, v) in &self.quad {
            if i == j {
                val += 0.5 * v * x[i] * x[i];
            } else {
                val += v * x[i] * x[j];
            }
        }
        val
    }

    fn check(&self) -> Result<(), QpError> {
        let bad = |msg: String| Err(QpError::BadProblem(msg));
        if self.lin.len() != self.n || self.lower.len() != self.n || self.upper.len() != self.n {
            return bad("cost/bound vectors disagree with variable count".into());
        }
        for &(i, j, _) in &self.quad {
            if i > j || j >= self.n {
                return bad(format!("quadratic entry ({i},{j}) out of range"));
            }
        }
        for (row, _) in self.eq.iter().chain(&self.ineq) {
            if let Some(&(i, _)) = row.iter().find(|&&(i, _)| i >= self.n) {
                return bad(format!("constraint references variable {i} of {}", self.n));
            }
        }
        for i in 0..self.n {
            if self.lower[i] > self.upper[i] {
                return bad(format!(
                    "variable {i} has crossing bounds [{}, {}]",
                    self.lower[i], self.upper[i]
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Recomputed from `x` (not trusted from the backend).
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub enum QpOutcome {
    Optimal(QpSolution),
    Infeasible,
    Unbounded,
}

pub trait QpBackend {
    fn name(&self) -> &str;
    fn solve(&self, problem: &QpProblem) -> Result<QpOutcome, QpError>;
}

/// Interior-point backend (Clarabel). Zero and nonnegative cones only; the
/// conic structure of the dispatch problem is handled by the cutting-plane
/// loop upstream, never delegated here.
#[derive(Debug, Clone, Default)]
pub struct ClarabelBackend;

pub fn default_backend() -> ClarabelBackend {
    ClarabelBackend
}

/// Sorted-and-merged CSC from (row, col, value) triplets.
fn to_csc(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    triplets.sort_by_key(|&(r, c, _)| (c, r));
    let mut counts = vec![0usize; cols];
    let mut rowval: Vec<usize> = Vec::with_capacity(triplets.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in triplets {
        if last == Some((c, r)) {
            *nzval.last_mut().unwrap() += v;
        } else {
            rowval.push(r);
            nzval.push(v);
            counts[c] += 1;
            last = Some((c, r));
        }
    }
    let mut colptr = vec![0usize; cols + 1];
    for c in 0..cols {
        colptr[c + 1] = colptr[c] + counts[c];
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

impl QpBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, problem: &QpProblem) -> Result<QpOutcome, QpError> {
        problem.check()?;
        let n = problem.n;

        let p_triplets: Vec<(usize, usize, f64)> = problem
            .quad
            .iter()
            .map(|&(i, j, v)| (i, j, v))
            .collect();
        let p = to_csc(n, n, p_triplets);

        // rows: equalities, then inequalities, then bounds as rows
        let mut a_triplets = Vec::new();
        let mut b = Vec::new();
        let mut row_idx = 0usize;
        for (row, rhs) in &problem.eq {
            for &(j, v) in row {
                a_triplets.push((row_idx, j, v));
            }
            b.push(*rhs);
            row_idx += 1;
        }
        let n_eq = row_idx;
        for (row, rhs) in &problem.ineq {
            for &(j, v) in row {
                a_triplets.push((row_idx, j, v));
            }
            b.push(*rhs);
            row_idx += 1;
        }
        for j in 0..n {
            if problem.upper[j].is_finite() {
                a_triplets.push((row_idx, j, 1.0));
                b.push(problem.upper[j]);
                row_idx += 1;
            }
            if problem.lower[j].is_finite() {
                a_triplets.push((row_idx, j, -1.0));
                b.push(-problem.lower[j]);
                row_idx += 1;
            }
        }
        let n_ineq = row_idx - n_eq;
        let a = to_csc(row_idx, n, a_triplets);

        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if n_eq > 0 {
            cones.push(ZeroConeT(n_eq));
        }
        if n_ineq > 0 {
            cones.push(NonnegativeConeT(n_ineq));
        }

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-12)
            .tol_gap_rel(1e-12)
            .tol_feas(1e-12)
            .tol_ktratio(1e-7)
            .max_iter(500)
            .build()
            .map_err(|e| QpError::Numerical(format!("settings: {e}")))?;
        let mut solver = DefaultSolver::new(&p, &problem.lin, &a, &b, &cones, settings)
            .map_err(|e| QpError::Numerical(format!("setup: {e:?}")))?;
        solver.solve();

        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                let x = solver.solution.x.clone();
                let objective = problem.objective_at(&x);
                Ok(QpOutcome::Optimal(QpSolution { x, objective }))
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Ok(QpOutcome::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Ok(QpOutcome::Unbounded)
            }
            other => Err(QpError::Numerical(format!("solver stopped: {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn expect_optimal(outcome: QpOutcome) -> QpSolution {
        match outcome {
            QpOutcome::Optimal(sol) => sol,
            other => panic!("expected an optimum, got {other:?}"),
        }
    }

    #[test]
    fn separable_qp_with_sum_constraint_matches_closed_form() {
        // minimize Σ d_i (x_i - a_i)²  s.t. Σ x_i = s
        // stationarity: x_i = a_i - λ/(2 d_i), λ from the sum constraint.
        let mut rng = StdRng::seed_from_u64(7);
        let backend = default_backend();
        for _ in 0..20 {
            let n = rng.random_range(2..8);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: f64 = rng.random_range(-3.0..3.0);

            let mut qp = QpProblem::new(n);
            for i in 0..n {
                qp.add_square_cost(i, d[i]);
                qp.add_linear_cost(i, -2.0 * d[i] * a[i]);
                qp.constant += d[i] * a[i] * a[i];
            }
            qp.add_eq((0..n).map(|i| (i, 1.0)).collect(), s);
            let sol = expect_optimal(backend.solve(&qp).unwrap());

            let lambda = (a.iter().sum::<f64>() - s)
                / d.iter().map(|di| 1.0 / (2.0 * di)).sum::<f64>();
            let mut expected_obj = 0.0;
            for i in 0..n {
                let xi = a[i] - lambda / (2.0 * d[i]);
                assert_relative_eq!(sol.x[i], xi, max_relative = 1e-7, epsilon = 1e-8);
                expected_obj += d[i] * (xi - a[i]).powi(2);
            }
            assert_relative_eq!(sol.objective, expected_obj, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn box_constraints_clamp_the_unconstrained_minimizer() {
        let backend = default_backend();
        for &(b, want) in &[(0.4, 0.4), (-0.7, 0.0), (1.9, 1.0)] {
            // minimize (x - b)² on [0, 1]
            let mut qp = QpProblem::new(1);
            qp.add_square_cost(0, 1.0);
            qp.add_linear_cost(0, -2.0 * b);
            qp.constant = b * b;
            qp.set_bounds(0, 0.0, 1.0);
            let sol = expect_optimal(backend.solve(&qp).unwrap());
            assert_relative_eq!(sol.x[0], want, epsilon = 1e-7);
        }
    }

    #[test]
    fn cross_terms_enter_with_the_right_weight() {
        // minimize x² + y² + xy - 3y: gradient (2x + y, 2y + x - 3) = 0
        // gives x = -1, y = 2.
        let backend = default_backend();
        let mut qp = QpProblem::new(2);
        qp.add_square_cost(0, 1.0);
        qp.add_square_cost(1, 1.0);
        qp.add_cross_cost(0, 1, 1.0);
        qp.add_linear_cost(1, -3.0);
        let sol = expect_optimal(backend.solve(&qp).unwrap());
        assert_relative_eq!(sol.x[0], -1.0, epsilon = 1e-7);
        assert_relative_eq!(sol.x[1], 2.0, epsilon = 1e-7);
        assert_relative_eq!(sol.objective, -3.0, max_relative = 1e-9);
    }

    #[test]
    fn infeasible_rows_are_reported_not_errored() {
        let backend = default_backend();
        let mut qp = QpProblem::new(1);
        qp.add_square_cost(0, 1.0);
        qp.add_ineq(vec![(0, 1.0)], 0.0); // x ≤ 0
        qp.add_ineq(vec![(0, -1.0)], -1.0); // x ≥ 1
        assert!(matches!(backend.solve(&qp).unwrap(), QpOutcome::Infeasible));
    }

    #[test]
    fn unbounded_lp_is_reported() {
        let backend = default_backend();
        let mut qp = QpProblem::new(1);
        qp.add_linear_cost(0, -1.0);
        qp.set_bounds(0, 0.0, f64::INFINITY);
        assert!(matches!(backend.solve(&qp).unwrap(), QpOutcome::Unbounded));
    }

    #[test]
    fn pure_lp_reaches_the_vertex() {
        // minimize -x s.t. 0 ≤ x ≤ 3
        let backend = default_backend();
        let mut qp = QpProblem::new(1);
        qp.add_linear_cost(0, -1.0);
        qp.set_bounds(0, 0.0, 3.0);
        let sol = expect_optimal(backend.solve(&qp).unwrap());
        assert_relative_eq!(sol.x[0], 3.0, epsilon = 1e-7);
        assert_relative_eq!(sol.objective, -3.0, max_relative = 1e-9);
    }

    #[test]
    fn duplicate_triplets_accumulate() {
        // two add_square_cost calls on the same variable must sum
        let backend = default_backend();
        let mut qp = QpProblem::new(1);
        qp.add_square_cost(0, 1.0);
        qp.add_square_cost(0, 1.0); // objective 2x²
        qp.add_linear_cost(0, -4.0);
        let sol = expect_optimal(backend.solve(&qp).unwrap());
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-7); // min at 4/(2·2)
    }

    #[test]
    fn malformed_problems_rejected_before_the_solver() {
        let backend = default_backend();
        let mut qp = QpProblem::new(2);
        qp.add_eq(vec![(5, 1.0)], 0.0);
        assert!(matches!(backend.solve(&qp), Err(QpError::BadProblem(_))));

        let mut qp = QpProblem::new(1);
        qp.set_bounds(0, 2.0, 1.0);
        assert!(matches!(backend.solve(&qp), Err(QpError::BadProblem(_))));
    }
}
