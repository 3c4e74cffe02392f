//! Dense quadratic programming with elementwise box constraints.
//!
//! Minimizes `½ uᵀH u + gᵀu` subject to `lower ≤ u ≤ upper`. The solver is a
//! primal active-set method: variables pinned at a bound are eliminated, the
//! free block is solved by Cholesky, and bounds are added or released until
//! the KKT conditions hold. Problems here are small (tens of variables) and
//! strictly convex except for deliberate degenerate cases, which fall back to
//! a minimum-norm solution when no finite bounds are present.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Elementwise input bounds; entries may be `±∞` for one-sided or free
/// variables, and `lower == upper` pins a variable.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxBounds {
    /// Bounds that leave every variable free.
    pub fn unbounded(n: usize) -> Self {
        BoxBounds {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    /// `−limit ≤ u_i ≤ limit` for every variable.
    pub fn symmetric(n: usize, limit: f64) -> Self {
        BoxBounds {
            lower: DVector::from_element(n, -limit),
            upper: DVector::from_element(n, limit),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True when no bound is finite.
    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY)
            && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension(format!(
                "bounds of length {}/{} for {} variables",
                self.lower.len(),
                self.upper.len(),
                n
            )));
        }
        for i in 0..n {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::InvalidConfig(format!("bound {i} is not orderable")));
            }
            if lo > hi {
                return Err(Error::Infeasible(format!(
                    "lower bound {lo} exceeds upper bound {hi} at index {i}"
                )));
            }
        }
        Ok(())
    }

    fn clamp(&self, u: &mut DVector<f64>) {
        for i in 0..u.len() {
            u[i] = u[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Result of a QP solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// `½ uᵀH u + gᵀu` at the solution.
    pub value: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Pin {
    Free,
    Lower,
    Upper,
}

const FEAS_TOL: f64 = 1e-12;
const DUAL_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-11;

/// Solves `min ½ uᵀH u + gᵀu` over the box.
///
/// `h` only needs to be symmetric up to round-off; it is symmetrized
/// internally. A singular `h` is accepted only without finite bounds, in
/// which case the minimum-norm stationary point is returned (an objective
/// unbounded below is reported as [`Error::Degenerate`]).
pub fn solve_qp(h: &DMatrix<f64>, g: &DVector<f64>, bounds: &BoxBounds) -> Result<QpSolution> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::Dimension(format!(
            "H is {}×{} for {} variables",
            h.nrows(),
            h.ncols(),
            n
        )));
    }
    bounds.validate(n)?;
    if n == 0 {
        return Ok(QpSolution { u: DVector::zeros(0), value: 0.0, iterations: 0 });
    }
    let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));

    let chol = h.clone().cholesky();
    let Some(chol) = chol else {
        return solve_singular(&h, g, bounds);
    };

    // Start from the clamped unconstrained minimizer; variables that land on
    // a bound form the initial working set.
    let mut u = chol.solve(&(-g));
    bounds.clamp(&mut u);
    let mut pins: Vec<Pin> = (0..n)
        .map(|i| {
            if bounds.lower[i] == bounds.upper[i] || u[i] == bounds.lower[i] {
                Pin::Lower
            } else if u[i] == bounds.upper[i] {
                Pin::Upper
            } else {
                Pin::Free
            }
        })
        .collect();

    let scale = 1.0 + g.amax() + h.amax() * (1.0 + u.amax());
    let max_iter = 100 * n + 10;
    for iter in 1..=max_iter {
        let free: Vec<usize> = (0..n).filter(|&i| pins[i] == Pin::Free).collect();

        // Minimize over the free block with pinned variables held fixed.
        let mut step = DVector::zeros(n);
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let mut rhs = DVector::from_fn(free.len(), |a, _| -g[free[a]]);
            for (a, &i) in free.iter().enumerate() {
                for j in 0..n {
                    if pins[j] != Pin::Free {
                        rhs[a] -= h[(i, j)] * u[j];
                    }
                }
            }
            let target = hff
                .cholesky()
                .ok_or_else(|| {
                    Error::Degenerate("free block of H lost positive definiteness".into())
                })?
                .solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                step[i] = target[a] - u[i];
            }
        }

        if step.amax() <= STEP_TOL * (1.0 + u.amax()) {
            // Stationary on the working set: release the worst mispinned bound
            // or declare optimality.
            let grad = &h * &u + g;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                if bounds.lower[i] == bounds.upper[i] {
                    continue;
                }
                let violation = match pins[i] {
                    Pin::Lower => -grad[i],
                    Pin::Upper => grad[i],
                    Pin::Free => continue,
                };
                if violation > DUAL_TOL * scale && worst.map_or(true, |(_, v)| violation > v) {
                    worst = Some((i, violation));
                }
            }
            match worst {
                Some((i, _)) => {
                    pins[i] = Pin::Free;
                    continue;
                }
                None => {
                    let value = 0.5 * u.dot(&(&h * &u)) + g.dot(&u);
                    return Ok(QpSolution { u, value, iterations: iter });
                }
            }
        }

        // Longest feasible step along the free-block direction.
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Pin)> = None;
        for &i in &free {
            if step[i] > 0.0 && bounds.upper[i].is_finite() {
                let a = (bounds.upper[i] - u[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Pin::Upper));
                }
            } else if step[i] < 0.0 && bounds.lower[i].is_finite() {
                let a = (bounds.lower[i] - u[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Pin::Lower));
                }
            }
        }
        u += step * alpha;
        if let Some((i, side)) = blocking {
            u[i] = match side {
                Pin::Lower => bounds.lower[i],
                Pin::Upper => bounds.upper[i],
                Pin::Free => unreachable!(),
            };
            pins[i] = side;
        }
        bounds.clamp(&mut u);
    }
    Err(Error::MaxIterations(format!("QP active set did not settle within {max_iter} iterations")))
}

/// Solves `min ½ uᵀH u + gᵀu` subject to general inequalities `A u ≤ b`.
///
/// Used for constraints that are not elementwise boxes (e.g. bounds on an
/// affine image of `u`). `H` must be positive definite. The dual
/// `min_{λ≥0} ½ λᵀ(A H⁻¹Aᵀ)λ + (A H⁻¹g + b)ᵀλ` is solved by projected cyclic
/// coordinate descent (Hildreth's procedure), which tolerates redundant rows.
pub fn solve_qp_linear(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n || a.ncols() != n || a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "H {}×{}, A {}×{}, b {} for {} variables",
            h.nrows(),
            h.ncols(),
            a.nrows(),
            a.ncols(),
            b.len(),
            n
        )));
    }
    let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
    let chol = h.clone().cholesky().ok_or_else(|| {
        Error::Degenerate("inequality-constrained QP needs positive definite H".into())
    })?;
    let n_c = a.nrows();
    // Rows with a zero gradient are pure feasibility statements.
    for r in 0..n_c {
        if a.row(r).amax() == 0.0 && b[r] < -FEAS_TOL {
            return Err(Error::Infeasible(format!("constraint {r} reads 0 ≤ {}", b[r])));
        }
    }
    let h_inv_at = chol.solve(&a.transpose());
    let m = a * &h_inv_at;
    let q = a * chol.solve(g) + b;
    let scale = 1.0 + b.amax().max(g.amax());

    let mut lambda = DVector::zeros(n_c);
    let max_sweeps = 200 * (n_c + n) + 2000;
    for sweep in 1..=max_sweeps {
        for r in 0..n_c {
            if m[(r, r)] <= 0.0 {
                continue;
            }
            let mut s = q[r];
            for j in 0..n_c {
                if j != r {
                    s += m[(r, j)] * lambda[j];
                }
            }
            lambda[r] = (-s / m[(r, r)]).max(0.0);
        }
        if sweep % 25 == 0 || sweep == max_sweeps {
            let u = chol.solve(&(-(g + a.transpose() * &lambda)));
            let slack = a * &u - b;
            let violation = slack.max().max(0.0);
            let gap = (0..n_c).map(|r| (lambda[r] * slack[r]).abs()).fold(0.0, f64::max);
            if violation <= 1e-9 * scale && gap <= 1e-9 * scale * scale {
                let value = 0.5 * u.dot(&(&h * &u)) + g.dot(&u);
                return Ok(QpSolution { u, value, iterations: sweep });
            }
        }
    }
    if lambda.amax() > 1e10 * scale {
        return Err(Error::Infeasible("no point satisfies the linear constraints".into()));
    }
    Err(Error::MaxIterations(format!(
        "dual coordinate descent did not converge within {max_sweeps} sweeps"
    )))
}

/// Minimum-norm stationary point for singular `H`; only valid without bounds.
fn solve_singular(h: &DMatrix<f64>, g: &DVector<f64>, bounds: &BoxBounds) -> Result<QpSolution> {
    if !bounds.is_unbounded() {
        return Err(Error::Degenerate(
            "H is singular; bounded problems need strictly convex curvature".into(),
        ));
    }
    let svd = h.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    if svd.singular_values.iter().any(|&s| s < -tol) {
        return Err(Error::Degenerate("H is indefinite".into()));
    }
    let u =
        svd.solve(&(-g), tol).map_err(|e| Error::Degenerate(format!("SVD solve failed: {e}")))?;
    let residual = (h * &u + g).amax();
    if residual > 1e-8 * (1.0 + g.amax()) {
        return Err(Error::Degenerate(
            "objective is unbounded below (gradient outside the range of H)".into(),
        ));
    }
    let value = 0.5 * u.dot(&(h * &u)) + g.dot(&u);
    Ok(QpSolution { u, value, iterations: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Checks first-order optimality of a candidate directly.
    fn assert_kkt(h: &DMatrix<f64>, g: &DVector<f64>, b: &BoxBounds, u: &DVector<f64>, tol: f64) {
        let grad = h * u + g;
        for i in 0..u.len() {
            assert!(u[i] >= b.lower[i] - 1e-12 && u[i] <= b.upper[i] + 1e-12, "infeasible at {i}");
            let at_lo = (u[i] - b.lower[i]).abs() <= 1e-9;
            let at_hi = (b.upper[i] - u[i]).abs() <= 1e-9;
            if at_lo && at_hi {
                continue;
            } else if at_lo {
                assert!(grad[i] >= -tol, "lower-bound multiplier sign at {i}: {}", grad[i]);
            } else if at_hi {
                assert!(grad[i] <= tol, "upper-bound multiplier sign at {i}: {}", grad[i]);
            } else {
                assert!(grad[i].abs() <= tol, "free gradient at {i}: {}", grad[i]);
            }
        }
    }

    /// Projected cyclic coordinate descent; converges for strictly convex
    /// box-constrained quadratics and serves as an independent optimum.
    fn coordinate_descent(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        b: &BoxBounds,
        sweeps: usize,
    ) -> DVector<f64> {
        let n = g.len();
        let mut u: DVector<f64> = DVector::zeros(n);
        for i in 0..n {
            u[i] = u[i].clamp(b.lower[i], b.upper[i]);
        }
        for _ in 0..sweeps {
            for i in 0..n {
                let mut s = g[i];
                for j in 0..n {
                    if j != i {
                        s += h[(i, j)] * u[j];
                    }
                }
                u[i] = (-s / h[(i, i)]).clamp(b.lower[i], b.upper[i]);
            }
        }
        u
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let g = DVector::from_column_slice(&[-2.0, -4.0]);
        let sol = solve_qp(&h, &g, &BoxBounds::unbounded(2)).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-12);
        assert!((sol.u[1] - 2.0).abs() < 1e-12);
        assert!((sol.value - (-5.0)).abs() < 1e-12);
    }

    #[test]
    fn scalar_upper_bound_becomes_active() {
        let h = DMatrix::from_element(1, 1, 1.0);
        let g = DVector::from_element(1, -3.0);
        let mut b = BoxBounds::unbounded(1);
        b.upper[0] = 2.0;
        let sol = solve_qp(&h, &g, &b).unwrap();
        assert_eq!(sol.u[0], 2.0);
        assert_kkt(&h, &g, &b, &sol.u, 1e-9);
    }

    #[test]
    fn coupled_bound_shifts_the_free_variable() {
        // min ½uᵀHu + gᵀu, H = [[2,1],[1,2]], g = [−3,−3]: unconstrained
        // optimum is (1,1); capping u₀ at 0.5 moves u₁ to (3 − 0.5)/2.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let g = DVector::from_column_slice(&[-3.0, -3.0]);
        let mut b = BoxBounds::unbounded(2);
        b.upper[0] = 0.5;
        let sol = solve_qp(&h, &g, &b).unwrap();
        assert!((sol.u[0] - 0.5).abs() < 1e-12);
        assert!((sol.u[1] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn equal_bounds_pin_a_variable() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let g = DVector::from_column_slice(&[1.0, -2.0]);
        let b = BoxBounds {
            lower: DVector::from_column_slice(&[0.7, f64::NEG_INFINITY]),
            upper: DVector::from_column_slice(&[0.7, f64::INFINITY]),
        };
        let sol = solve_qp(&h, &g, &b).unwrap();
        assert_eq!(sol.u[0], 0.7);
        assert!((sol.u[1] - (2.0 - 0.7) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn crossed_bounds_are_infeasible() {
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let b = BoxBounds {
            lower: DVector::from_element(1, 1.0),
            upper: DVector::from_element(1, -1.0),
        };
        assert!(matches!(solve_qp(&h, &g, &b), Err(Error::Infeasible(_))));
    }

    #[test]
    fn linear_inequalities_match_the_box_solver_on_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n = rng.gen_range(2..6);
            let h = random_spd(n, &mut rng);
            let g = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let limit = rng.gen_range(0.1..0.8);
            let b = BoxBounds::symmetric(n, limit);
            // Encode the box as 2n one-sided rows.
            let mut a_mat = DMatrix::zeros(2 * n, n);
            let mut b_vec = DVector::zeros(2 * n);
            for i in 0..n {
                a_mat[(i, i)] = 1.0;
                b_vec[i] = limit;
                a_mat[(n + i, i)] = -1.0;
                b_vec[n + i] = limit;
            }
            let via_box = solve_qp(&h, &g, &b).unwrap();
            let via_rows = solve_qp_linear(&h, &g, &a_mat, &b_vec).unwrap();
            assert!(
                (&via_box.u - &via_rows.u).amax() < 1e-6,
                "diff {}",
                (&via_box.u - &via_rows.u).amax()
            );
        }
    }

    #[test]
    fn contradictory_linear_rows_are_infeasible() {
        // u ≤ −1 and −u ≤ −1 cannot both hold.
        let h = DMatrix::identity(1, 1);
        let g = DVector::zeros(1);
        let a = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_element(2, -1.0);
        let r = solve_qp_linear(&h, &g, &a, &b);
        assert!(matches!(r, Err(Error::Infeasible(_)) | Err(Error::MaxIterations(_))), "got {r:?}");
    }

    #[test]
    fn singular_unbounded_objective_is_reported() {
        let h = DMatrix::zeros(1, 1);
        let g = DVector::from_element(1, 1.0);
        assert!(matches!(solve_qp(&h, &g, &BoxBounds::unbounded(1)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn singular_consistent_problem_returns_min_norm_point() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let g = DVector::from_column_slice(&[-1.0, 0.0]);
        let sol = solve_qp(&h, &g, &BoxBounds::unbounded(2)).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-10);
        assert!(sol.u[1].abs() < 1e-10);
    }

    #[test]
    fn singular_with_finite_bounds_is_degenerate() {
        let h = DMatrix::zeros(2, 2);
        let g = DVector::zeros(2);
        let b = BoxBounds::symmetric(2, 1.0);
        assert!(matches!(solve_qp(&h, &g, &b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn matches_coordinate_descent_on_tight_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let n = rng.gen_range(2..8);
            let h = random_spd(n, &mut rng);
            let g = DVector::from_fn(n, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
            let b = BoxBounds::symmetric(n, rng.gen_range(0.1..1.0));
            let sol = solve_qp(&h, &g, &b).unwrap();
            let oracle = coordinate_descent(&h, &g, &b, 4000);
            assert!((&sol.u - &oracle).amax() < 1e-6, "diff {}", (&sol.u - &oracle).amax());
            assert_kkt(&h, &g, &b, &sol.u, 1e-7 * (1.0 + g.amax()));
        }
    }

    #[test]
    fn twenty_variable_problems_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let n = 20;
            let h = random_spd(n, &mut rng);
            let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut b = BoxBounds::unbounded(n);
            for i in 0..n {
                if rng.gen_bool(0.5) {
                    b.lower[i] = -rng.gen_range(0.01..0.5);
                }
                if rng.gen_bool(0.5) {
                    b.upper[i] = rng.gen_range(0.01..0.5);
                }
            }
            let sol = solve_qp(&h, &g, &b).unwrap();
            assert_kkt(&h, &g, &b, &sol.u, 1e-6 * (1.0 + g.amax()));
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            // The returned point never beats coordinate descent and never
            // leaves the box.
            #[test]
            fn solution_is_feasible_and_at_least_as_good_as_the_oracle(seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.gen_range(1..6);
                let h = random_spd(n, &mut rng);
                let g = DVector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
                let b = BoxBounds::symmetric(n, rng.gen_range(0.05..2.0));
                let sol = solve_qp(&h, &g, &b).unwrap();
                for i in 0..n {
                    prop_assert!(sol.u[i] >= b.lower[i] - 1e-12);
                    prop_assert!(sol.u[i] <= b.upper[i] + 1e-12);
                }
                let oracle = coordinate_descent(&h, &g, &b, 2000);
                let f_oracle = 0.5 * oracle.dot(&(&h * &oracle)) + g.dot(&oracle);
                prop_assert!(sol.value <= f_oracle + 1e-8 * (1.0 + f_oracle.abs()));
            }
        }
    }
}
