//! Receding-horizon tracking controller with time-varying half-space
//! obstacle constraints.
//!
//! States are condensed out: with `x_{t+h|t} = A^h x_t + Σ A^{h−1−j} B u_j`
//! the decision vector stacks the `H` inputs (plus one slack per
//! obstacle constraint), giving a dense strictly convex QP solved by
//! [`qp`]. Obstacle facets enter as `Ω·z_{t+h|t} ≥ ϱ + ε` rows for
//! `h ≥ 1`; the initial output is fixed by the measured state, so an
//! infringing `h = 0` facet is only reported, never enforced. Slack
//! variables keep the QP feasible when forecast polytopes swallow the
//! robot; zero-slack solutions coincide with the hard problem.

pub mod qp;

use nalgebra::{DMatrix, DVector, Matrix2, Point2, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{most_active_facet, ActiveConstraint, ObstaclePolytope};
use crate::vehicle::{discrete_model, DiscreteModel, LinearState};

/// Absolute slack (meters) below which a soft solution counts as
/// satisfying the hard constraints.
const SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: Matrix2<f64>,
    pub r: Matrix2<f64>,
    pub goal: Point2<f64>,
    /// Safety margin ε; must cover the robot radius.
    pub margin: f64,
    pub robot_radius: f64,
    /// Symmetric box bound on each input component, when present.
    pub input_bound: Option<f64>,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Slack penalty is this factor times the largest eigenvalue of Q.
    pub slack_weight_factor: f64,
    /// Controller sampling interval.
    pub tau: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 14,
            q: Matrix2::identity(),
            r: Matrix2::identity() * 0.1,
            goal: Point2::new(15.0, 15.0),
            margin: 0.5,
            robot_radius: 0.3,
            input_bound: None,
            solver_tol: 1e-9,
            solver_max_iter: 500,
            slack_weight_factor: 1e6,
            tau: 0.1,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("sampling interval must be positive".into()));
        }
        if self.margin < self.robot_radius {
            return Err(Error::Config(format!(
                "safety margin {} must cover the robot radius {}",
                self.margin, self.robot_radius
            )));
        }
        for (name, m) in [("Q", &self.q), ("R", &self.r)] {
            if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            let eig = nalgebra::SymmetricEigen::new(*m);
            if eig.eigenvalues.min() <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive definite")));
            }
        }
        if let Some(bound) = self.input_bound {
            if bound <= 0.0 {
                return Err(Error::Config("input bound must be positive".into()));
            }
        }
        if self.slack_weight_factor <= 0.0 {
            return Err(Error::Config("slack weight must be positive".into()));
        }
        Ok(())
    }

    fn slack_weight(&self) -> f64 {
        let eig = nalgebra::SymmetricEigen::new(self.q);
        self.slack_weight_factor * eig.eigenvalues.max()
    }
}

/// One receding-horizon problem instance.
#[derive(Debug)]
pub struct MpcProblem<'a> {
    pub initial_state: Vector4<f64>,
    pub model: &'a DiscreteModel,
    pub constraints: &'a [ActiveConstraint],
    pub config: &'a MpcConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcStatus {
    /// All hard constraints met within tolerance (slack below 1e-6 m).
    Optimal,
    /// Solved, but some obstacle rows needed slack.
    SoftFeasible,
    Failed,
}

impl MpcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MpcStatus::Optimal => "optimal",
            MpcStatus::SoftFeasible => "soft-feasible",
            MpcStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Optimal input sequence `u_{t..t+H-1|t}`.
    pub inputs: Vec<Vector2<f64>>,
    /// Predicted outputs `z_{t..t+H-1|t}`.
    pub outputs: Vec<Point2<f64>>,
    /// Tracking-plus-effort objective at the solution (no slack term).
    pub objective: f64,
    pub status: MpcStatus,
    /// Slack used per obstacle constraint, in constraint order.
    pub slacks: Vec<f64>,
    pub max_slack: f64,
    pub solver_iterations: usize,
    pub kkt_residual: f64,
    /// An `h = 0` facet was violated by the measured output.
    pub h0_violation: bool,
}

/// Pick the most active facet of every polytope at the matching
/// reference point. Polytope `horizon_step` indexes into `ref_traj`.
pub fn generate_constraints(
    polytopes: &[ObstaclePolytope],
    ref_traj: &[Point2<f64>],
) -> Result<Vec<ActiveConstraint>> {
    let mut out = Vec::with_capacity(polytopes.len());
    for poly in polytopes {
        let xi = ref_traj.get(poly.horizon_step).ok_or_else(|| {
            Error::invalid_input(format!(
                "no reference point for horizon slot {} (trajectory has {})",
                poly.horizon_step,
                ref_traj.len()
            ))
        })?;
        out.push(most_active_facet(poly, xi));
    }
    Ok(out)
}

/// Condensed QP with bookkeeping to map the solution back to horizon
/// quantities.
#[derive(Debug)]
pub struct CondensedQp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constraint_matrix: DMatrix<f64>,
    pub constraint_rhs: DVector<f64>,
    pub n_inputs: usize,
    pub n_slacks: usize,
    /// Constant term of the objective (from the fixed initial state).
    pub constant: f64,
    /// Output prediction `Z = phi x + gamma u`.
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// Indices into the original constraint list that were enforced
    /// (h ≥ 1), in row order.
    pub enforced: Vec<usize>,
    /// Indices of h = 0 constraints, checked against the fixed output.
    pub initial_step: Vec<usize>,
}

/// Eliminate the states and assemble the dense QP over `[ū; s]`.
pub fn build_qp(problem: &MpcProblem) -> Result<CondensedQp> {
    let cfg = problem.config;
    cfg.validate()?;
    let h = cfg.horizon;
    let model = problem.model;
    let nu = 2 * h;

    // Prediction matrices for outputs h = 0..H-1.
    let mut phi = DMatrix::zeros(nu, 4);
    let mut gamma = DMatrix::zeros(nu, nu);
    let mut a_pow = nalgebra::Matrix4::<f64>::identity(); // A^h while filling row block h
    for step in 0..h {
        phi.view_mut((2 * step, 0), (2, 4)).copy_from(&(model.c * a_pow));
        // gamma block (step, j) = C A^{step-1-j} B for j < step.
        let mut power = nalgebra::Matrix4::<f64>::identity();
        for j in (0..step).rev() {
            gamma.view_mut((2 * step, 2 * j), (2, 2)).copy_from(&(model.c * power * model.b));
            power *= model.a;
        }
        a_pow *= model.a;
    }

    let q_bar = kron_identity(&cfg.q, h);
    let r_bar = kron_identity(&cfg.r, h);
    let mut goal_stack = DVector::zeros(nu);
    for step in 0..h {
        goal_stack[2 * step] = cfg.goal.x;
        goal_stack[2 * step + 1] = cfg.goal.y;
    }
    let w = &phi * problem.initial_state - goal_stack;

    let hess_u = 2.0 * (gamma.transpose() * &q_bar * &gamma + &r_bar);
    let grad_u = 2.0 * gamma.transpose() * &q_bar * &w;
    let constant = (&q_bar * &w).dot(&w);

    // Split obstacle constraints into enforced (h ≥ 1) and initial-step.
    let mut enforced = Vec::new();
    let mut initial_step = Vec::new();
    for (i, c) in problem.constraints.iter().enumerate() {
        if c.horizon_step == 0 {
            initial_step.push(i);
        } else if c.horizon_step < h {
            enforced.push(i);
        } else {
            return Err(Error::invalid_input(format!(
                "constraint horizon step {} outside 0..{}",
                c.horizon_step, h
            )));
        }
    }
    let ns = enforced.len();
    let n_box = if cfg.input_bound.is_some() { 2 * nu } else { 0 };
    let dim = nu + ns;
    let rows = 2 * ns + n_box;

    let mut hess = DMatrix::zeros(dim, dim);
    hess.view_mut((0, 0), (nu, nu)).copy_from(&hess_u);
    let ws = 2.0 * cfg.slack_weight();
    for s in 0..ns {
        hess[(nu + s, nu + s)] = ws;
    }
    let mut grad = DVector::zeros(dim);
    grad.rows_mut(0, nu).copy_from(&grad_u);

    let mut gmat = DMatrix::zeros(rows, dim);
    let mut rhs = DVector::zeros(rows);
    for (row, &ci) in enforced.iter().enumerate() {
        let c = &problem.constraints[ci];
        let hstep = c.horizon_step;
        // Ω · z_h = Ω · (phi_h x + gamma_h u) ≥ ϱ + ε − slack.
        let gamma_rows = gamma.rows(2 * hstep, 2);
        let phi_rows = phi.rows(2 * hstep, 2);
        let coeff = c.normal.transpose() * gamma_rows;
        for j in 0..nu {
            gmat[(row, j)] = coeff[(0, j)];
        }
        gmat[(row, nu + row)] = 1.0;
        let fixed = (c.normal.transpose() * phi_rows * problem.initial_state)[(0, 0)];
        rhs[row] = c.offset + c.margin - fixed;
    }
    for s in 0..ns {
        gmat[(ns + s, nu + s)] = 1.0; // slack ≥ 0
    }
    if let Some(bound) = cfg.input_bound {
        for j in 0..nu {
            gmat[(2 * ns + 2 * j, j)] = 1.0;
            rhs[2 * ns + 2 * j] = -bound;
            gmat[(2 * ns + 2 * j + 1, j)] = -1.0;
            rhs[2 * ns + 2 * j + 1] = -bound;
        }
    }

    Ok(CondensedQp {
        hessian: hess,
        gradient: grad,
        constraint_matrix: gmat,
        constraint_rhs: rhs,
        n_inputs: nu,
        n_slacks: ns,
        constant,
        phi,
        gamma,
        enforced,
        initial_step,
    })
}

fn kron_identity(m: &Matrix2<f64>, count: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(2 * count, 2 * count);
    for k in 0..count {
        out.view_mut((2 * k, 2 * k), (2, 2)).copy_from(m);
    }
    out
}

/// Receding-horizon controller holding the warm-start cache.
#[derive(Debug)]
pub struct MpcController {
    config: MpcConfig,
    model: DiscreteModel,
    previous: Option<MpcSolution>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Result<Self> {
        config.validate()?;
        let model = discrete_model(config.tau)?;
        Ok(MpcController { config, model, previous: None })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn model(&self) -> &DiscreteModel {
        &self.model
    }

    /// Reference positions used to pick active facets: the previous
    /// solution shifted one step, or a straight-line interpolation to
    /// the goal before any solve exists.
    pub fn reference_trajectory(&self, position: Point2<f64>) -> Vec<Point2<f64>> {
        let h = self.config.horizon;
        match &self.previous {
            Some(prev) => {
                let mut out = Vec::with_capacity(h);
                for step in 0..h {
                    let idx = (step + 1).min(prev.outputs.len() - 1);
                    out.push(prev.outputs[idx]);
                }
                out
            }
            None => {
                let goal = self.config.goal;
                (0..h)
                    .map(|step| {
                        let frac = if h > 1 { step as f64 / (h - 1) as f64 } else { 0.0 };
                        Point2::new(
                            position.x + frac * (goal.x - position.x),
                            position.y + frac * (goal.y - position.y),
                        )
                    })
                    .collect()
            }
        }
    }

    /// Solve one receding-horizon problem and return the input to apply.
    /// On solver failure the previous solution is shifted one step
    /// (degraded mode); with no previous solution the input is zero.
    pub fn step(
        &mut self,
        state: &LinearState,
        polytopes: &[ObstaclePolytope],
    ) -> Result<(Vector2<f64>, MpcSolution)> {
        let reference = self.reference_trajectory(state.position());
        let constraints = generate_constraints(polytopes, &reference)?;
        let problem = MpcProblem {
            initial_state: state.0,
            model: &self.model,
            constraints: &constraints,
            config: &self.config,
        };
        let condensed = build_qp(&problem)?;
        let solved = qp::solve(
            &condensed.hessian,
            &condensed.gradient,
            &condensed.constraint_matrix,
            &condensed.constraint_rhs,
            self.config.solver_tol,
            self.config.solver_max_iter,
        );

        let solution = match solved {
            Ok(qp_sol) if qp_sol.status == qp::QpStatus::Optimal => {
                self.extract(&condensed, &constraints, state, qp_sol)
            }
            Ok(qp_sol) => {
                log::warn!(
                    "QP ended with {:?} after {} iterations",
                    qp_sol.status,
                    qp_sol.iterations
                );
                self.degraded(&constraints, state)
            }
            Err(err) => {
                log::warn!("QP solve failed: {err}");
                self.degraded(&constraints, state)
            }
        };

        let applied = solution.inputs.first().copied().unwrap_or_else(Vector2::zeros);
        self.previous = Some(solution.clone());
        Ok((applied, solution))
    }

    fn extract(
        &self,
        condensed: &CondensedQp,
        constraints: &[ActiveConstraint],
        state: &LinearState,
        qp_sol: qp::QpSolution,
    ) -> MpcSolution {
        let nu = condensed.n_inputs;
        let u = qp_sol.x.rows(0, nu).into_owned();
        let slacks: Vec<f64> = (0..condensed.n_slacks).map(|s| qp_sol.x[nu + s]).collect();
        let max_slack = slacks.iter().copied().fold(0.0, f64::max);

        let z = &condensed.phi * state.0 + &condensed.gamma * &u;
        let outputs: Vec<Point2<f64>> =
            (0..self.config.horizon).map(|h| Point2::new(z[2 * h], z[2 * h + 1])).collect();
        let inputs: Vec<Vector2<f64>> =
            (0..self.config.horizon).map(|h| Vector2::new(u[2 * h], u[2 * h + 1])).collect();

        // Tracking + effort objective, slack penalty excluded.
        let mut objective = 0.0;
        for h in 0..self.config.horizon {
            let dz = outputs[h] - self.config.goal;
            objective += (self.config.q * dz).dot(&dz);
            objective += (self.config.r * inputs[h]).dot(&inputs[h]);
        }

        let h0_violation = condensed
            .initial_step
            .iter()
            .any(|&i| constraints[i].activation(&state.position()) < 0.0);

        let status =
            if max_slack <= SLACK_TOL { MpcStatus::Optimal } else { MpcStatus::SoftFeasible };
        MpcSolution {
            inputs,
            outputs,
            objective,
            status,
            slacks,
            max_slack,
            solver_iterations: qp_sol.iterations,
            kkt_residual: qp_sol.kkt_residual,
            h0_violation,
        }
    }

    fn degraded(&self, constraints: &[ActiveConstraint], state: &LinearState) -> MpcSolution {
        let h = self.config.horizon;
        let inputs = match &self.previous {
            Some(prev) => {
                let mut shifted: Vec<Vector2<f64>> = prev.inputs.iter().skip(1).copied().collect();
                let last = shifted.last().copied().unwrap_or_else(Vector2::zeros);
                shifted.push(last);
                shifted
            }
            None => vec![Vector2::zeros(); h],
        };
        // Roll the model forward under the fallback inputs.
        let mut x = state.0;
        let mut outputs = Vec::with_capacity(h);
        for u in &inputs {
            outputs.push(Point2::new(x[0], x[2]));
            x = self.model.a * x + self.model.b * u;
        }
        let h0_violation = constraints
            .iter()
            .any(|c| c.horizon_step == 0 && c.activation(&state.position()) < 0.0);
        MpcSolution {
            inputs,
            outputs,
            objective: f64::NAN,
            status: MpcStatus::Failed,
            slacks: Vec::new(),
            max_slack: 0.0,
            solver_iterations: 0,
            kkt_residual: f64::NAN,
            h0_violation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{confidence_ellipse, ellipse_polytope, FacetNormals, GaussianComponent};
    use approx::assert_abs_diff_eq;

    fn square_polytope(center: (f64, f64), radius: f64, margin: f64) -> ObstaclePolytope {
        let c = GaussianComponent {
            mean: Vector2::new(center.0, center.1),
            covariance: Matrix2::identity() * radius * radius / chi2_unit(),
            weight: 1.0,
        };
        let e = confidence_ellipse(&c, 0.95).unwrap();
        ellipse_polytope(&e, 4, margin, FacetNormals::Radial).unwrap()
    }

    fn chi2_unit() -> f64 {
        crate::geometry::chi_squared_quantile_2dof(0.95)
    }

    #[test]
    fn constraints_require_reference_coverage() {
        let poly = square_polytope((1.0, 1.0), 0.5, 0.0).tagged(3, 0);
        let short_ref = vec![Point2::new(0.0, 0.0); 2];
        assert!(generate_constraints(&[poly.clone()], &short_ref).is_err());
        let full_ref = vec![Point2::new(0.0, 0.0); 4];
        let cs = generate_constraints(&[poly], &full_ref).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].horizon_step, 3);
    }

    #[test]
    fn constraint_count_matches_obstacle_grid() {
        // 12 obstacles over a 14-step window: one constraint per slot.
        let mut polys = Vec::new();
        for h in 0..14 {
            for l in 0..12 {
                polys.push(square_polytope((5.0 + l as f64, 5.0), 0.4, 0.2).tagged(h, l));
            }
        }
        let reference = vec![Point2::new(0.0, 0.0); 14];
        let cs = generate_constraints(&polys, &reference).unwrap();
        assert_eq!(cs.len(), 168);
    }

    #[test]
    fn east_reference_picks_east_facet() {
        let poly = square_polytope((0.0, 0.0), 0.5, 0.0).tagged(0, 0);
        let cs = generate_constraints(&[poly], &[Point2::new(5.0, 0.0)]).unwrap();
        assert_abs_diff_eq!((cs[0].normal - Vector2::new(1.0, 0.0)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn qp_at_goal_with_zero_velocity_is_zero_input() {
        let cfg = MpcConfig {
            horizon: 1,
            q: Matrix2::identity(),
            r: Matrix2::identity(),
            goal: Point2::new(2.0, -1.0),
            ..Default::default()
        };
        let model = discrete_model(cfg.tau).unwrap();
        let problem = MpcProblem {
            initial_state: Vector4::new(2.0, 0.0, -1.0, 0.0),
            model: &model,
            constraints: &[],
            config: &cfg,
        };
        let condensed = build_qp(&problem).unwrap();
        let sol = qp::solve(
            &condensed.hessian,
            &condensed.gradient,
            &condensed.constraint_matrix,
            &condensed.constraint_rhs,
            1e-10,
            100,
        )
        .unwrap();
        assert_abs_diff_eq!(sol.x.norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn condensed_hessian_matches_hand_expansion_for_h2() {
        // τ = 1, Q = R = I, H = 2: only z₁ depends on u₀ via CB = ½I,
        // so the Hessian is 2·diag(1.25, 1.25, 1, 1) on (u₀, u₁).
        let cfg = MpcConfig {
            horizon: 2,
            q: Matrix2::identity(),
            r: Matrix2::identity(),
            tau: 1.0,
            ..Default::default()
        };
        let model = discrete_model(1.0).unwrap();
        let problem = MpcProblem {
            initial_state: Vector4::zeros(),
            model: &model,
            constraints: &[],
            config: &cfg,
        };
        let condensed = build_qp(&problem).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[2.5, 2.5, 2.0, 2.0]));
        assert_abs_diff_eq!((&condensed.hessian - &expect).norm(), 0.0, epsilon = 1e-12);

        // Gradient on u₀ is 2 (CB)ᵀ Q (C A x − goal) = (CAx − goal).
        let x0 = Vector4::new(1.0, 0.5, -2.0, 0.0);
        let problem = MpcProblem {
            initial_state: x0,
            model: &model,
            constraints: &[],
            config: &cfg,
        };
        let condensed = build_qp(&problem).unwrap();
        let cax = model.c * model.a * x0;
        let expected_grad0 = cax - cfg.goal.coords;
        assert_abs_diff_eq!(condensed.gradient[0], expected_grad0[0], epsilon = 1e-12);
        assert_abs_diff_eq!(condensed.gradient[1], expected_grad0[1], epsilon = 1e-12);
        assert_abs_diff_eq!(condensed.gradient[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inactive_obstacle_constraint_leaves_solution_unchanged() {
        let cfg = MpcConfig { horizon: 3, ..Default::default() };
        let model = discrete_model(cfg.tau).unwrap();
        let state = Vector4::new(0.0, 0.5, 0.0, 0.5);

        let unconstrained =
            MpcProblem { initial_state: state, model: &model, constraints: &[], config: &cfg };
        let free = build_qp(&unconstrained).unwrap();
        let free_sol = qp::solve(
            &free.hessian,
            &free.gradient,
            &free.constraint_matrix,
            &free.constraint_rhs,
            1e-10,
            200,
        )
        .unwrap();

        // Obstacle far behind the robot: its most-active facet is
        // satisfied along the whole horizon.
        let poly = square_polytope((-8.0, -8.0), 0.5, 0.3).tagged(1, 0);
        let cs = generate_constraints(&[poly], &[Point2::origin(); 3]).unwrap();
        let constrained =
            MpcProblem { initial_state: state, model: &model, constraints: &cs, config: &cfg };
        let tied = build_qp(&constrained).unwrap();
        let tied_sol = qp::solve(
            &tied.hessian,
            &tied.gradient,
            &tied.constraint_matrix,
            &tied.constraint_rhs,
            1e-10,
            200,
        )
        .unwrap();

        let u_free = free_sol.x.rows(0, free.n_inputs).into_owned();
        let u_tied = tied_sol.x.rows(0, tied.n_inputs).into_owned();
        assert_abs_diff_eq!((u_free - u_tied).norm(), 0.0, epsilon = 1e-8);
        // The slack stays at zero.
        assert_abs_diff_eq!(tied_sol.x[tied.n_inputs], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn controller_moves_toward_goal_unconstrained() {
        let cfg = MpcConfig { goal: Point2::new(15.0, 15.0), ..Default::default() };
        let mut controller = MpcController::new(cfg).unwrap();
        let state = LinearState(Vector4::new(0.0, 0.0, 0.0, 0.0));
        let before = (state.position() - controller.config().goal).norm();
        let (u, sol) = controller.step(&state, &[]).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        assert!(u.norm() > 0.0);
        // One model step under the applied input moves strictly closer.
        let model = discrete_model(0.1).unwrap();
        let next = model.a * state.0 + model.b * u;
        let after = (Point2::new(next[0], next[2]) - controller.config().goal).norm();
        assert!(after < before);
    }

    fn octagon_polytope(center: (f64, f64), radius: f64, margin: f64) -> ObstaclePolytope {
        let c = GaussianComponent {
            mean: Vector2::new(center.0, center.1),
            covariance: Matrix2::identity() * radius * radius / chi2_unit(),
            weight: 1.0,
        };
        let e = confidence_ellipse(&c, 0.95).unwrap();
        ellipse_polytope(&e, 8, margin, FacetNormals::Radial).unwrap()
    }

    #[test]
    fn obstacle_on_path_bends_first_input() {
        let cfg = MpcConfig {
            goal: Point2::new(10.0, 0.0),
            margin: 0.5,
            robot_radius: 0.3,
            ..Default::default()
        };
        let mut free = MpcController::new(cfg.clone()).unwrap();
        let mut blocked = MpcController::new(cfg).unwrap();
        // Robot moving along +x toward the goal; an obstacle sits on the
        // path, its center a little north of the line, so the active
        // facets push the robot south as well as back.
        let state = LinearState(Vector4::new(0.0, 1.0, 0.0, 0.0));
        let (u_free, _) = free.step(&state, &[]).unwrap();

        let polys: Vec<ObstaclePolytope> =
            (1..14).map(|h| octagon_polytope((2.0, 0.3), 0.8, 0.5).tagged(h, 0)).collect();
        let (u_blocked, sol) = blocked.step(&state, &polys).unwrap();
        assert_ne!(sol.status, MpcStatus::Failed);
        // The applied input deviates from the unconstrained one and
        // picks up a lateral component.
        assert!((u_blocked - u_free).norm() > 1e-3);
        assert!(u_blocked[1].abs() > 1e-3, "lateral input {u_blocked:?}");
        assert!(u_free[1].abs() < 1e-9);
    }

    #[test]
    fn soft_constraints_flagged_when_inside_polytope() {
        let cfg = MpcConfig { goal: Point2::new(5.0, 0.0), ..Default::default() };
        let mut controller = MpcController::new(cfg).unwrap();
        // Start deep inside a polytope that covers the origin at every
        // horizon step: the hard problem is infeasible at h = 1 because
        // the robot cannot jump out in one step.
        let polys: Vec<ObstaclePolytope> =
            (1..14).map(|h| square_polytope((0.0, 0.0), 2.0, 0.5).tagged(h, 0)).collect();
        let state = LinearState(Vector4::zeros());
        let (_, sol) = controller.step(&state, &polys).unwrap();
        assert_eq!(sol.status, MpcStatus::SoftFeasible);
        assert!(sol.max_slack > 0.01);
    }

    #[test]
    fn h0_violation_is_reported_not_enforced() {
        let cfg = MpcConfig::default();
        let mut controller = MpcController::new(cfg).unwrap();
        let polys = vec![square_polytope((0.0, 0.0), 1.0, 0.5).tagged(0, 0)];
        let state = LinearState(Vector4::zeros());
        let (_, sol) = controller.step(&state, &polys).unwrap();
        assert!(sol.h0_violation);
        assert_eq!(sol.slacks.len(), 0);
        assert_eq!(sol.status, MpcStatus::Optimal);
    }

    #[test]
    fn warm_start_determinism() {
        let cfg = MpcConfig::default();
        let polys: Vec<ObstaclePolytope> =
            (1..5).map(|h| square_polytope((2.0, 2.0), 0.7, 0.5).tagged(h, 0)).collect();
        let state = LinearState(Vector4::new(0.0, 0.3, 0.0, 0.2));

        let run = || {
            let mut c = MpcController::new(cfg.clone()).unwrap();
            let (u1, _) = c.step(&state, &polys).unwrap();
            let (u2, _) = c.step(&state, &polys).unwrap();
            (u1, u2)
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn input_bounds_are_respected() {
        let cfg = MpcConfig {
            goal: Point2::new(50.0, 0.0),
            input_bound: Some(1.0),
            ..Default::default()
        };
        let mut controller = MpcController::new(cfg).unwrap();
        let state = LinearState(Vector4::zeros());
        let (u, sol) = controller.step(&state, &[]).unwrap();
        assert_eq!(sol.status, MpcStatus::Optimal);
        assert!(u[0] <= 1.0 + 1e-9);
        for input in &sol.inputs {
            assert!(input.amax() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn config_validation_rejects_bad_weights() {
        let mut cfg = MpcConfig::default();
        cfg.q[(0, 1)] = 0.5; // asymmetric
        assert!(cfg.validate().is_err());

        let cfg = MpcConfig { margin: 0.1, robot_radius: 0.3, ..Default::default() };
        assert!(cfg.validate().is_err());

        let cfg = MpcConfig { r: Matrix2::identity() * -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
