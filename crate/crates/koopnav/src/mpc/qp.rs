//! Dense strictly convex quadratic programming by a dual active-set
//! method (Goldfarb–Idnani scheme with full refactorization per step —
//! problems here are a few hundred variables at most).
//!
//! Solves `min ½ xᵀH x + gᵀx  s.t.  G x ≥ b` for positive definite `H`.
//! Starting from the unconstrained minimizer, the most violated
//! constraint is activated; partial steps drop active constraints whose
//! multipliers would turn negative. The dual objective increases
//! strictly, so the method terminates; an iteration cap guards against
//! numerical stalling.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Iteration cap reached; the best iterate so far is returned.
    MaxIterations,
    /// No feasible point exists.
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Active constraint rows and their (nonnegative) multipliers.
    pub active_set: Vec<usize>,
    pub duals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub status: QpStatus,
}

/// Solve `min ½ xᵀH x + gᵀx` subject to `G x ≥ b`.
pub fn solve(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    constraints: &DMatrix<f64>,
    rhs: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    let n = hessian.nrows();
    if hessian.ncols() != n || gradient.len() != n {
        return Err(Error::shape("Hessian and gradient dimensions disagree"));
    }
    let m = constraints.nrows();
    if m > 0 && constraints.ncols() != n {
        return Err(Error::shape(format!(
            "constraint matrix has {} columns, expected {n}",
            constraints.ncols()
        )));
    }
    if rhs.len() != m {
        return Err(Error::shape("constraint rhs length mismatch"));
    }
    let chol = nalgebra::Cholesky::new(hessian.clone())
        .ok_or_else(|| Error::Numerical("QP Hessian is not positive definite".into()))?;

    let mut x = chol.solve(&(-gradient));
    let mut active: Vec<usize> = Vec::new();
    let mut duals: Vec<f64> = Vec::new();
    let mut iterations = 0;

    'outer: loop {
        // Most violated constraint at the current iterate.
        let mut worst = None;
        let mut worst_slack = -tol;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let slack = constraints.row(i).transpose().dot(&x) - rhs[i];
            if slack < worst_slack {
                worst_slack = slack;
                worst = Some(i);
            }
        }
        let Some(p) = worst else {
            break;
        };
        let n_p = constraints.row(p).transpose();
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(
                    x,
                    active,
                    duals,
                    hessian,
                    gradient,
                    constraints,
                    rhs,
                    iterations,
                    QpStatus::MaxIterations,
                ));
            }

            // Primal direction z and dual direction r for activating p.
            let hinv_np = chol.solve(&n_p);
            let (z, r) = if active.is_empty() {
                (hinv_np.clone(), DVector::zeros(0))
            } else {
                let k = active.len();
                let mut normals = DMatrix::zeros(n, k);
                for (col, &idx) in active.iter().enumerate() {
                    normals.set_column(col, &constraints.row(idx).transpose());
                }
                let hinv_n = chol.solve(&normals);
                let s = normals.transpose() * &hinv_n;
                let rhs_r = normals.transpose() * &hinv_np;
                let r = solve_spd_or_lu(&s, &rhs_r)?;
                let z = &hinv_np - &hinv_n * &r;
                (z, r)
            };

            let dir = n_p.dot(&z);
            let slack_p = n_p.dot(&x) - rhs[p];

            // Full step length to make constraint p tight.
            let t_full = if dir > tol { -slack_p / dir } else { f64::INFINITY };
            // Partial step length before an active multiplier hits zero.
            let mut t_part = f64::INFINITY;
            let mut blocking = None;
            for (idx, &ri) in r.iter().enumerate() {
                if ri > tol {
                    let step = duals[idx] / ri;
                    if step < t_part {
                        t_part = step;
                        blocking = Some(idx);
                    }
                }
            }

            let t = t_full.min(t_part);
            if !t.is_finite() {
                return Ok(finish(
                    x,
                    active,
                    duals,
                    hessian,
                    gradient,
                    constraints,
                    rhs,
                    iterations,
                    QpStatus::Infeasible,
                ));
            }

            x += t * &z;
            for (idx, ri) in r.iter().enumerate() {
                duals[idx] -= t * ri;
            }
            u_p += t;

            if t_full <= t_part {
                active.push(p);
                duals.push(u_p);
                continue 'outer;
            }
            // Drop the blocking constraint and retry with the smaller
            // active set.
            let drop_idx = blocking.expect("partial step implies a blocking index");
            active.remove(drop_idx);
            duals.remove(drop_idx);
        }
    }

    Ok(finish(x, active, duals, hessian, gradient, constraints, rhs, iterations, QpStatus::Optimal))
}

fn solve_spd_or_lu(s: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(s.clone()) {
        return Ok(chol.solve(rhs));
    }
    s.clone()
        .full_piv_lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical("active-set system is singular".into()))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    x: DVector<f64>,
    active: Vec<usize>,
    duals: Vec<f64>,
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    constraints: &DMatrix<f64>,
    rhs: &DVector<f64>,
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let objective = 0.5 * (hessian * &x).dot(&x) + gradient.dot(&x);
    let kkt_residual = kkt_residual(&x, &active, &duals, hessian, gradient, constraints, rhs);
    QpSolution { x, active_set: active, duals, objective, iterations, kkt_residual, status }
}

/// Max-norm KKT residual over stationarity, primal feasibility, dual
/// feasibility, and complementarity.
pub fn kkt_residual(
    x: &DVector<f64>,
    active: &[usize],
    duals: &[f64],
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    constraints: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> f64 {
    let mut stationarity = hessian * x + gradient;
    for (&i, &u) in active.iter().zip(duals.iter()) {
        stationarity -= u * constraints.row(i).transpose();
    }
    let mut worst = stationarity.amax();
    for i in 0..constraints.nrows() {
        let slack = constraints.row(i).transpose().dot(x) - rhs[i];
        worst = worst.max(-slack); // primal violation
    }
    for (&i, &u) in active.iter().zip(duals.iter()) {
        worst = worst.max(-u); // dual violation
        let slack = constraints.row(i).transpose().dot(x) - rhs[i];
        worst = worst.max((u * slack).abs()); // complementarity
    }
    worst
}
