//! Unicycle plant, feedback linearization, and the discrete
//! double-integrator model the controller predicts with.
//!
//! The plant integrates the nonlinear kinematics with RK4; the
//! controller works in the transformed coordinates
//! `η = (x, ẋ, y, ẏ)` where the system splits into two double
//! integrators driven by `(a_x, a_y)`. Inverting the transform back to
//! `(ω, a)` requires `v ≠ 0`; below [`V_MIN`] the velocity is clamped
//! and the event flagged.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Point2, Vector2, Vector4};

use crate::error::{Error, Result};

/// Singularity guard for input recovery, in m/s.
pub const V_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnicycleState {
    pub x: f64,
    pub y: f64,
    /// Heading, wrapped to (−π, π].
    pub theta: f64,
    pub v: f64,
}

impl UnicycleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        UnicycleState { x, y, theta: wrap_angle(theta), v }
    }

    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }

    /// Transformed coordinates `η = (x, v cos θ, y, v sin θ)`.
    pub fn linear_state(&self) -> LinearState {
        LinearState(Vector4::new(
            self.x,
            self.v * self.theta.cos(),
            self.y,
            self.v * self.theta.sin(),
        ))
    }
}

/// Feedback-linearized state `η = (x, ẋ, y, ẏ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearState(pub Vector4<f64>);

impl LinearState {
    pub fn position(&self) -> Point2<f64> {
        Point2::new(self.0[0], self.0[2])
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.0[1], self.0[3])
    }
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = (theta + std::f64::consts::PI).rem_euclid(two_pi);
    if a == 0.0 {
        a = two_pi;
    }
    a - std::f64::consts::PI
}

/// Integrate the unicycle kinematics over `dt` with constant inputs
/// `(ω, a)` using classical fourth-order Runge-Kutta.
pub fn unicycle_step(
    state: &UnicycleState,
    omega: f64,
    accel: f64,
    dt: f64,
) -> Result<UnicycleState> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::invalid_input("dt must be positive"));
    }
    let f = |s: [f64; 4]| -> [f64; 4] {
        let [_, _, theta, v] = s;
        [v * theta.cos(), v * theta.sin(), omega, accel]
    };
    let s0 = [state.x, state.y, state.theta, state.v];
    let k1 = f(s0);
    let k2 = f(add(s0, scale(k1, dt / 2.0)));
    let k3 = f(add(s0, scale(k2, dt / 2.0)));
    let k4 = f(add(s0, scale(k3, dt)));
    let mut out = s0;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(UnicycleState::new(out[0], out[1], out[2], out[3]))
}

fn add(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

fn scale(a: [f64; 4], s: f64) -> [f64; 4] {
    [a[0] * s, a[1] * s, a[2] * s, a[3] * s]
}

/// Result of mapping auxiliary accelerations back to unicycle inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveredInputs {
    pub omega: f64,
    pub accel: f64,
    /// True when `|v|` was below [`V_MIN`] and had to be clamped.
    pub clamped: bool,
    /// Velocity actually inverted (clamped when flagged).
    pub v_used: f64,
}

/// Invert the feedback linearization:
/// `[ω; a] = (1/v) [[−sin θ, cos θ], [v cos θ, v sin θ]] [a_x; a_y]`.
///
/// Velocities below the guard are clamped to `sign(v) · V_MIN` (with
/// `sign(0) = +1`) and the event reported, since the transform is
/// singular at `v = 0`.
pub fn recover_inputs(ax: f64, ay: f64, theta: f64, v: f64) -> RecoveredInputs {
    let clamped = v.abs() < V_MIN;
    let v_safe = if clamped {
        if v < 0.0 {
            -V_MIN
        } else {
            V_MIN
        }
    } else {
        v
    };
    if clamped {
        log::debug!("input recovery clamped v={v} to {v_safe}");
    }
    let m = Matrix2::new(
        -theta.sin() / v_safe,
        theta.cos() / v_safe,
        theta.cos(),
        theta.sin(),
    );
    let u = m * Vector2::new(ax, ay);
    RecoveredInputs { omega: u[0], accel: u[1], clamped, v_used: v_safe }
}

/// Forward map from unicycle inputs to auxiliary accelerations:
/// `a_x = a cos θ − v ω sin θ`, `a_y = a sin θ + v ω cos θ`.
pub fn forward_inputs(omega: f64, accel: f64, theta: f64, v: f64) -> (f64, f64) {
    (
        accel * theta.cos() - v * omega * theta.sin(),
        accel * theta.sin() + v * omega * theta.cos(),
    )
}

/// Exact zero-order-hold discretization of the two decoupled double
/// integrators, with the position-selecting output map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub c: Matrix2x4<f64>,
    pub tau: f64,
}

pub fn discrete_model(tau: f64) -> Result<DiscreteModel> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::invalid_input("sampling interval must be nonnegative"));
    }
    let a = Matrix4::new(
        1.0, tau, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, tau, //
        0.0, 0.0, 0.0, 1.0,
    );
    let h = tau * tau / 2.0;
    let b = Matrix4x2::new(
        h, 0.0, //
        tau, 0.0, //
        0.0, h, //
        0.0, tau,
    );
    let c = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0,
    );
    Ok(DiscreteModel { a, b, c, tau })
}
