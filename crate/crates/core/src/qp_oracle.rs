//! Reference solvers and a KKT checker for [`QpProblem`].
//!
//! Independent of the neural-dynamics solver: dense factorizations and
//! textbook active-set logic only.

use nalgebra::{Cholesky, DMatrix, DVector, LU, SVD};

use crate::error::{Error, Result};
use crate::qp::QpProblem;

/// Solves either the penalized problem
/// `min 1/2 z'Sz + G'z + xi/2 |max(Hz - w, 0)|^2` or the exact constrained QP.
pub fn solve_reference(problem: &QpProblem, penalized: bool, xi: f64) -> Result<DVector<f64>> {
    if penalized {
        solve_penalized(problem, xi)
    } else {
        solve_exact(problem).map(|s| s.z)
    }
}

fn check_convex(problem: &QpProblem) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(problem.s.clone())
        .ok_or_else(|| Error::parameter("problem.S", "quadratic term must be positive definite"))
}

/// Minimizes the slack-lifted objective over `(z, phi >= 0)`.
///
/// Alternates the exact slack projection `phi = max(w - Hz, 0)` with a
/// Newton step in `z` for the resulting engaged-row set, under an Armijo
/// line search, until the iterate is a fixed point.
pub fn solve_penalized(problem: &QpProblem, xi: f64) -> Result<DVector<f64>> {
    if !(xi > 0.0) {
        return Err(Error::parameter("xi", "penalty factor must be positive"));
    }
    let chol = check_convex(problem)?;
    let mut z = chol.solve(&(-&problem.g));
    let rows = problem.n_constraints();
    for _ in 0..500 {
        let g = problem.constraint_residual(&z);
        let engaged: Vec<usize> = (0..rows).filter(|&i| g[i] > 0.0).collect();
        let mut k = problem.s.clone();
        let mut rhs = -&problem.g;
        for &i in &engaged {
            let row = problem.h.row(i);
            k += row.transpose() * row * xi;
            rhs += row.transpose() * (xi * problem.w[i]);
        }
        let target = Cholesky::new(k)
            .ok_or_else(|| Error::parameter("problem.S", "quadratic term must be positive definite"))?
            .solve(&rhs);
        let d = &target - &z;
        let scale = 1.0 + z.amax();
        if d.amax() <= 1e-14 * scale {
            return Ok(target);
        }
        let f0 = problem.penalized_objective(&z, xi);
        let slope = problem.penalized_gradient(&z, xi).dot(&d);
        let mut alpha = 1.0;
        while alpha > 1e-12 {
            let trial = &z + &d * alpha;
            if problem.penalized_objective(&trial, xi) <= f0 + 1e-4 * alpha * slope {
                break;
            }
            alpha *= 0.5;
        }
        let step = &d * alpha;
        z += &step;
        if step.amax() <= 1e-12 * scale {
            return Ok(z);
        }
    }
    Err(Error::NonConvergence("penalized reference solver did not reach a fixed point".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactSolution {
    pub z: DVector<f64>,
    /// One multiplier per row of `H`; zero off the working set.
    pub multipliers: DVector<f64>,
    pub working_set: Vec<usize>,
    pub iterations: usize,
}

/// Solves `[S A'; A 0][x; y] = rhs`, falling back to a least-squares
/// solution when the working rows are linearly dependent.
fn solve_kkt(s: &DMatrix<f64>, a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = s.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(s);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(a);
    if let Some(x) = LU::new(k.clone()).solve(rhs) {
        if x.iter().all(|v| v.is_finite()) && (&k * &x - rhs).amax() <= 1e-9 * (1.0 + rhs.amax()) {
            return x;
        }
    }
    SVD::new(k, true, true)
        .solve(rhs, 1e-12)
        .expect("SVD with both factors always solves")
}

/// Phase 1: `min eps/2 (|z|^2 + s^2) + s` subject to `Hz - s <= w`, `s >= 0`.
fn feasible_point(problem: &QpProblem) -> Result<DVector<f64>> {
    let n = problem.dim();
    let rows = problem.n_constraints();
    if rows == 0 {
        return Ok(DVector::zeros(n));
    }
    if problem.w.min() >= 0.0 {
        return Ok(DVector::zeros(n));
    }
    let eps = 1e-8;
    let mut s = DMatrix::identity(n + 1, n + 1) * eps;
    s[(n, n)] = eps;
    let mut g = DVector::zeros(n + 1);
    g[n] = 1.0;
    let mut h = DMatrix::zeros(rows + 1, n + 1);
    h.view_mut((0, 0), (rows, n)).copy_from(&problem.h);
    for i in 0..rows {
        h[(i, n)] = -1.0;
    }
    h[(rows, n)] = -1.0;
    let mut w = DVector::zeros(rows + 1);
    w.rows_mut(0, rows).copy_from(&problem.w);
    let phase1 = QpProblem::new(s, g, h, w)?;
    let mut start = DVector::zeros(n + 1);
    start[n] = (-problem.w.min()).max(0.0) + 1.0;
    let sol = active_set(&phase1, start)?;
    let z = sol.z.rows(0, n).into_owned();
    let residual = problem.constraint_residual(&z);
    let (row, violation) = residual
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let tol = 1e-9 * (1.0 + problem.w.amax());
    if violation > tol {
        return Err(Error::Infeasible { row, violation });
    }
    Ok(z)
}

/// Primal active-set iteration from a feasible `z0`.
fn active_set(problem: &QpProblem, z0: DVector<f64>) -> Result<ExactSolution> {
    let n = problem.dim();
    let rows = problem.n_constraints();
    let mut z = z0;
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 50 * (n + rows) + 100;
    for iter in 0..max_iter {
        let a = DMatrix::from_fn(working.len(), n, |r, c| problem.h[(working[r], c)]);
        let grad = problem.gradient(&z);
        let mut rhs = DVector::zeros(n + working.len());
        rhs.rows_mut(0, n).copy_from(&(-&grad));
        let sol = solve_kkt(&problem.s, &a, &rhs);
        let p = sol.rows(0, n).into_owned();
        let scale = 1.0 + z.amax();
        if p.amax() <= 1e-13 * scale {
            let lambda = sol.rows(n, working.len()).into_owned();
            let (imin, lmin) = lambda
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0), |best, (i, &l)| if l < best.1 { (i, l) } else { best });
            if lmin >= -1e-12 * (1.0 + grad.amax()) {
                let mut multipliers = DVector::zeros(rows);
                for (k, &row) in working.iter().enumerate() {
                    multipliers[row] = lambda[k].max(0.0);
                }
                return Ok(ExactSolution {
                    z,
                    multipliers,
                    working_set: working,
                    iterations: iter,
                });
            }
            working.remove(imin);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..rows {
            if working.contains(&i) {
                continue;
            }
            let ap = problem.h.row(i).dot(&p.transpose());
            if ap > 1e-14 * (1.0 + p.amax()) {
                let slack = problem.w[i] - problem.h.row(i).dot(&z.transpose());
                let ai = (slack / ap).max(0.0);
                if ai < alpha {
                    alpha = ai;
                    blocking = Some(i);
                }
            }
        }
        z += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(Error::NonConvergence("active-set iteration limit reached".into()))
}

/// Exact constrained QP by the primal active-set method with a phase-1
/// feasibility solve. Infeasible problems report the most violated row at the
/// phase-1 optimum.
pub fn solve_exact(problem: &QpProblem) -> Result<ExactSolution> {
    check_convex(problem)?;
    let z0 = feasible_point(problem)?;
    active_set(problem, z0)
}

/// Exhaustive enumeration of working sets; limited to 12 constraints.
pub fn solve_enumeration(problem: &QpProblem) -> Result<DVector<f64>> {
    check_convex(problem)?;
    let n = problem.dim();
    let rows = problem.n_constraints();
    if rows > 12 {
        return Err(Error::parameter("problem", "enumeration is limited to 12 constraints"));
    }
    let tol = 1e-9 * (1.0 + problem.w.amax() + problem.g.amax());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << rows) {
        let set: Vec<usize> = (0..rows).filter(|&i| mask & (1 << i) != 0).collect();
        if set.len() > n {
            continue;
        }
        let a = DMatrix::from_fn(set.len(), n, |r, c| problem.h[(set[r], c)]);
        if set.len() > 0 && SVD::new(a.clone(), false, false).rank(1e-10) < set.len() {
            continue;
        }
        let mut rhs = DVector::zeros(n + set.len());
        rhs.rows_mut(0, n).copy_from(&(-&problem.g));
        for (k, &i) in set.iter().enumerate() {
            rhs[n + k] = problem.w[i];
        }
        let x = solve_kkt(&problem.s, &a, &rhs);
        let z = x.rows(0, n).into_owned();
        // S z + G + A' lambda = 0 with lambda = x[n..]
        let feasible = problem.max_violation(&z) <= tol;
        let dual_ok = x.rows(n, set.len()).iter().all(|&v| v >= -tol);
        if feasible && dual_ok {
            let f = problem.objective(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.map(|(_, z)| z).ok_or_else(|| {
        let viol = problem.max_violation(&DVector::zeros(n));
        Error::Infeasible { row: 0, violation: viol }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktReport {
    pub stationarity_residual: f64,
    pub primal_violation: f64,
    pub complementarity_residual: f64,
    pub pass: bool,
}

/// First-order conditions of the constrained QP at `z`.
///
/// Multipliers come from non-negative least squares over the rows within
/// `sqrt(tol)` of their bound; complementarity is `max lambda_i |g_i|`.
pub fn check_kkt(problem: &QpProblem, z: &DVector<f64>, tol: f64) -> KktReport {
    let g = problem.constraint_residual(z);
    let primal_violation = g.iter().fold(0.0_f64, |m, &v| m.max(v));
    let near = tol.sqrt();
    let candidates: Vec<usize> = (0..g.len()).filter(|&i| g[i] >= -near).collect();
    let grad = problem.gradient(z);
    let (stationarity_residual, complementarity_residual) = if candidates.is_empty() {
        (grad.amax(), 0.0)
    } else {
        // grad + A' lambda = 0  ->  min |A' lambda + grad|, lambda >= 0
        let at = DMatrix::from_fn(z.len(), candidates.len(), |r, c| problem.h[(candidates[c], r)]);
        let lambda = nnls(&at, &(-&grad));
        let stat = (&at * &lambda + &grad).amax();
        let comp = candidates
            .iter()
            .zip(lambda.iter())
            .fold(0.0_f64, |m, (&i, &l)| m.max(l * g[i].abs()));
        (stat, comp)
    };
    KktReport {
        stationarity_residual,
        primal_violation,
        complementarity_residual,
        pass: stationarity_residual <= tol && primal_violation <= tol && complementarity_residual <= tol,
    }
}

/// Max-norm of the gradient of the penalized objective.
pub fn penalized_stationarity(problem: &QpProblem, z: &DVector<f64>, xi: f64) -> f64 {
    problem.penalized_gradient(z, xi).amax()
}

/// Lawson-Hanson non-negative least squares: `min |Ax - b|, x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + a.amax() * b.amax());
    for _outer in 0..(3 * n + 10) {
        let w = a.tr_mul(&(b - a * &x));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        for _inner in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let ap = a.select_columns(&idx);
            let sp = SVD::new(ap, true, true)
                .solve(b, 1e-14)
                .expect("SVD with both factors always solves");
            if sp.iter().all(|&v| v > 0.0) {
                for (k, &col) in idx.iter().enumerate() {
                    x[col] = sp[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &col) in idx.iter().enumerate() {
                if sp[k] <= 0.0 {
                    alpha = alpha.min(x[col] / (x[col] - sp[k]));
                }
            }
            for (k, &col) in idx.iter().enumerate() {
                x[col] += alpha * (sp[k] - x[col]);
            }
            for &col in &idx {
                if x[col] <= tol {
                    x[col] = 0.0;
                    passive[col] = false;
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(s: f64, g: f64, h: f64, w: f64) -> QpProblem {
        QpProblem::new(
            DMatrix::from_element(1, 1, s),
            DVector::from_element(1, g),
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, w),
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_clipping() {
        let p = scalar(2.0, -4.0, 1.0, 1.0);
        let z = solve_reference(&p, false, 0.0).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-12);
        // grid scan over the feasible half-line
        let best = (0..=2000)
            .map(|k| -3.0 + 4.0 * k as f64 / 2000.0)
            .filter(|&x| x <= 1.0)
            .min_by(|a, b| (a * a - 4.0 * a).total_cmp(&(b * b - 4.0 * b)))
            .unwrap();
        assert_relative_eq!(best, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn penalized_scalar_closed_form() {
        // (s + xi) z = -g + xi w when engaged
        let p = scalar(2.0, -4.0, 1.0, 1.0);
        let z = solve_penalized(&p, 5.0).unwrap();
        assert_relative_eq!(z[0], (4.0 + 5.0) / 7.0, epsilon = 1e-14);
    }

    #[test]
    fn inactive_rows_give_unconstrained_minimizer() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = DVector::from_vec(vec![1.0, -2.0]);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let p = QpProblem::new(s.clone(), g.clone(), h, DVector::from_element(2, 1e9)).unwrap();
        let expect = s.lu().solve(&(-g)).unwrap();
        assert_relative_eq!(solve_exact(&p).unwrap().z, expect, epsilon = 1e-12);
        assert_relative_eq!(solve_penalized(&p, 5.0).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn agrees_with_enumeration_on_small_instance() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = DVector::from_vec(vec![-3.0, -4.0]);
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 2.0, 1.0, -1.0]);
        let w = DVector::from_vec(vec![2.0, 2.0, 3.0]);
        let p = QpProblem::new(s, g, h, w).unwrap();
        let a = solve_exact(&p).unwrap().z;
        let b = solve_enumeration(&p).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-10);
        assert!(check_kkt(&p, &a, 1e-8).pass);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        // z <= -1 and -z <= -1
        let h = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            h,
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        match solve_exact(&p) {
            Err(Error::Infeasible { violation, .. }) => assert!(violation > 0.5),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn kkt_detects_perturbation_and_violation() {
        let p = scalar(2.0, -4.0, 1.0, 1.0);
        let z = solve_exact(&p).unwrap().z;
        assert!(check_kkt(&p, &z, 1e-8).pass);
        // moving inward leaves the bound: the gradient -2 + ... is unbalanced
        let inward = &z - DVector::from_element(1, 1e-2);
        assert!(check_kkt(&p, &inward, 1e-8).stationarity_residual > 1e-3);
        let outside = &z + DVector::from_element(1, 0.1);
        assert!(check_kkt(&p, &outside, 1e-8).primal_violation >= 0.1 - 1e-15);
    }

    #[test]
    fn nnls_matches_hand_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, -1.0, 1.0]);
        let x = nnls(&a, &b);
        // second coordinate clamps at zero; first solves min (x-2)^2 + (x-1)^2
        assert_relative_eq!(x, DVector::from_vec(vec![1.5, 0.0]), epsilon = 1e-12);
    }
}
