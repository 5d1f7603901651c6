//! Forward, inverse and Jacobian kernels for the bicycle and delta models.
//!
//! Both models act on the kinematic vector `[x, y, yaw, vx, vy]`. The
//! bicycle update is explicit Euler: position advances with the current
//! speed and heading, then heading and speed are updated from the action.
//! Speed is `sqrt(vx² + vy² + ε)` so that every partial derivative stays
//! finite at standstill, and yaw is wrapped with `atan2`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, yaw_diff, Action, AgentState, DynamicsModel, Scenario, SimState, STATE_DIM};

/// Added under the square root of the speed norm.
pub const SPEED_EPS: f64 = 1e-12;

pub const MAX_ACCEL: f64 = 6.0;
pub const MAX_STEER: f64 = 0.3;
pub const MAX_DELTA_XY: f64 = 3.0;
pub const MAX_DELTA_YAW: f64 = 0.3;

/// Symmetric per-component action bounds for a model.
pub fn action_bounds(model: DynamicsModel) -> &'static [f64] {
    match model {
        DynamicsModel::Bicycle => &[MAX_ACCEL, MAX_STEER],
        DynamicsModel::Delta => &[MAX_DELTA_XY, MAX_DELTA_XY, MAX_DELTA_YAW],
    }
}

/// Partial derivatives of one agent's next kinematic state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynJacobian {
    /// Rows: x, y, yaw, vx, vy. Only the first `action_dim` columns are used.
    pub d_state_d_action: [[f64; 3]; STATE_DIM],
    pub d_state_d_state: [[f64; STATE_DIM]; STATE_DIM],
    pub action_dim: usize,
}

impl DynJacobian {
    fn zeros(action_dim: usize) -> Self {
        Self {
            d_state_d_action: [[0.0; 3]; STATE_DIM],
            d_state_d_state: [[0.0; STATE_DIM]; STATE_DIM],
            action_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_state_d_action.iter().flatten().all(|v| v.is_finite()) && self.d_state_d_state.iter().flatten().all(|v| v.is_finite())
    }

    /// Vector-Jacobian products `(Jsᵀ g, Jaᵀ g)` for an upstream gradient `g`.
    pub fn vjp(&self, g: &[f64]) -> ([f64; STATE_DIM], [f64; 3]) {
        let mut gs = [0.0; STATE_DIM];
        let mut ga = [0.0; 3];
        for r in 0..STATE_DIM {
            let gr = g[r];
            if gr == 0.0 {
                continue;
            }
            for c in 0..STATE_DIM {
                gs[c] += self.d_state_d_state[r][c] * gr;
            }
            for c in 0..self.action_dim {
                ga[c] += self.d_state_d_action[r][c] * gr;
            }
        }
        (gs, ga)
    }
}

/// Epsilon-guarded speed norm.
pub fn safe_speed(vx: f64, vy: f64) -> f64 {
    (vx * vx + vy * vy + SPEED_EPS).sqrt()
}

fn check_state(op: &'static str, s: &AgentState) -> Result<()> {
    if !s.is_finite() {
        return Err(Error::domain(op, "non-finite state"));
    }
    Ok(())
}

fn check_dt(op: &'static str, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::domain(op, format!("dt must be positive and finite, got {dt}")));
    }
    Ok(())
}

fn check_action(op: &'static str, a: &Action, expected: DynamicsModel) -> Result<()> {
    if a.kind() != expected {
        return Err(Error::ActionKind { expected, found: a.kind() });
    }
    if !a.is_finite() {
        return Err(Error::domain(op, "non-finite action"));
    }
    Ok(())
}

pub fn step_bicycle(s: &AgentState, a: &Action, dt: f64) -> Result<AgentState> {
    check_state("step_bicycle", s)?;
    check_action("step_bicycle", a, DynamicsModel::Bicycle)?;
    check_dt("step_bicycle", dt)?;
    let Action::Bicycle { accel, steer } = *a else { unreachable!() };
    Ok(bicycle_forward(s, accel, steer, dt))
}

fn bicycle_forward(s: &AgentState, accel: f64, steer: f64, dt: f64) -> AgentState {
    let v = safe_speed(s.vx, s.vy);
    let new_yaw = wrap_angle(s.yaw + v * steer * dt);
    let new_v = v + accel * dt;
    let (sin_yaw, cos_yaw) = s.yaw.sin_cos();
    let (sin_new, cos_new) = new_yaw.sin_cos();
    s.with_kinematics([
        s.x + v * cos_yaw * dt,
        s.y + v * sin_yaw * dt,
        new_yaw,
        new_v * cos_new,
        new_v * sin_new,
    ])
}

pub fn step_delta(s: &AgentState, a: &Action, dt: f64) -> Result<AgentState> {
    check_state("step_delta", s)?;
    check_action("step_delta", a, DynamicsModel::Delta)?;
    check_dt("step_delta", dt)?;
    let Action::Delta { dx, dy, dyaw } = *a else { unreachable!() };
    Ok(delta_forward(s, dx, dy, dyaw, dt))
}

fn delta_forward(s: &AgentState, dx: f64, dy: f64, dyaw: f64, dt: f64) -> AgentState {
    s.with_kinematics([s.x + dx, s.y + dy, wrap_angle(s.yaw + dyaw), dx / dt, dy / dt])
}

/// Recovers the bicycle action mapping `s` to `s_next`.
pub fn inverse_bicycle(s: &AgentState, s_next: &AgentState, dt: f64) -> Result<Action> {
    check_dt("inverse_bicycle", dt)?;
    check_state("inverse_bicycle", s)?;
    check_state("inverse_bicycle", s_next)?;
    let v = safe_speed(s.vx, s.vy);
    let v_next = safe_speed(s_next.vx, s_next.vy);
    Ok(Action::Bicycle {
        accel: (v_next - v) / dt,
        steer: yaw_diff(s_next.yaw, s.yaw)? / (v * dt),
    })
}

pub fn inverse_delta(s: &AgentState, s_next: &AgentState) -> Result<Action> {
    check_state("inverse_delta", s)?;
    check_state("inverse_delta", s_next)?;
    Ok(Action::Delta {
        dx: s_next.x - s.x,
        dy: s_next.y - s.y,
        dyaw: yaw_diff(s_next.yaw, s.yaw)?,
    })
}

/// Inverse dynamics for either model.
pub fn inverse(model: DynamicsModel, s: &AgentState, s_next: &AgentState, dt: f64) -> Result<Action> {
    match model {
        DynamicsModel::Bicycle => inverse_bicycle(s, s_next, dt),
        DynamicsModel::Delta => inverse_delta(s, s_next),
    }
}

pub fn jacobian_bicycle(s: &AgentState, a: &Action, dt: f64) -> Result<DynJacobian> {
    check_state("jacobian_bicycle", s)?;
    check_action("jacobian_bicycle", a, DynamicsModel::Bicycle)?;
    check_dt("jacobian_bicycle", dt)?;
    let Action::Bicycle { accel, steer } = *a else { unreachable!() };
    Ok(bicycle_jacobian(s, accel, steer, dt))
}

fn bicycle_jacobian(s: &AgentState, accel: f64, steer: f64, dt: f64) -> DynJacobian {
    let v = safe_speed(s.vx, s.vy);
    let dv_dvx = s.vx / v;
    let dv_dvy = s.vy / v;
    let (sin_yaw, cos_yaw) = s.yaw.sin_cos();
    let psi = s.yaw + v * steer * dt;
    let (sin_psi, cos_psi) = psi.sin_cos();
    let new_v = v + accel * dt;

    let mut j = DynJacobian::zeros(2);
    let js = &mut j.d_state_d_state;
    let ja = &mut j.d_state_d_action;

    // x' = x + v cos(yaw) dt
    js[0][0] = 1.0;
    js[0][2] = -v * sin_yaw * dt;
    js[0][3] = cos_yaw * dt * dv_dvx;
    js[0][4] = cos_yaw * dt * dv_dvy;
    // y' = y + v sin(yaw) dt
    js[1][1] = 1.0;
    js[1][2] = v * cos_yaw * dt;
    js[1][3] = sin_yaw * dt * dv_dvx;
    js[1][4] = sin_yaw * dt * dv_dvy;
    // yaw' = wrap(yaw + v steer dt)
    let dpsi = [0.0, 0.0, 1.0, steer * dt * dv_dvx, steer * dt * dv_dvy];
    let dpsi_dsteer = v * dt;
    js[2] = dpsi;
    ja[2][1] = dpsi_dsteer;
    // v' = v + accel dt; vx' = v' cos(psi); vy' = v' sin(psi)
    let dnv = [0.0, 0.0, 0.0, dv_dvx, dv_dvy];
    for c in 0..STATE_DIM {
        js[3][c] = cos_psi * dnv[c] - new_v * sin_psi * dpsi[c];
        js[4][c] = sin_psi * dnv[c] + new_v * cos_psi * dpsi[c];
    }
    ja[3][0] = cos_psi * dt;
    ja[4][0] = sin_psi * dt;
    ja[3][1] = -new_v * sin_psi * dpsi_dsteer;
    ja[4][1] = new_v * cos_psi * dpsi_dsteer;
    j
}

pub fn jacobian_delta(s: &AgentState, a: &Action, dt: f64) -> Result<DynJacobian> {
    check_state("jacobian_delta", s)?;
    check_action("jacobian_delta", a, DynamicsModel::Delta)?;
    check_dt("jacobian_delta", dt)?;
    Ok(delta_jacobian(dt))
}

fn delta_jacobian(dt: f64) -> DynJacobian {
    let mut j = DynJacobian::zeros(3);
    j.d_state_d_state[0][0] = 1.0;
    j.d_state_d_state[1][1] = 1.0;
    j.d_state_d_state[2][2] = 1.0;
    j.d_state_d_action[0][0] = 1.0;
    j.d_state_d_action[1][1] = 1.0;
    j.d_state_d_action[2][2] = 1.0;
    j.d_state_d_action[3][0] = 1.0 / dt;
    j.d_state_d_action[4][1] = 1.0 / dt;
    j
}

/// Clamps an action vector to the model bounds. Returns, per component,
/// whether it was strictly inside the bounds (i.e. passes gradient).
pub fn clamp_action(model: DynamicsModel, a: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let bounds = action_bounds(model);
    a.iter().zip(bounds).map(|(&v, &b)| (v.clamp(-b, b), v.abs() <= b)).unzip()
}

/// One clamped dynamics step plus its Jacobian, for a raw action vector.
pub fn step_with_jacobian(model: DynamicsModel, s: &AgentState, action: &[f64], dt: f64) -> Result<(AgentState, DynJacobian)> {
    check_state("step_with_jacobian", s)?;
    check_dt("step_with_jacobian", dt)?;
    if action.len() != model.action_dim() || action.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("step_with_jacobian", "malformed action vector"));
    }
    let (a, pass) = clamp_action(model, action);
    let (next, mut jac) = match model {
        DynamicsModel::Bicycle => (bicycle_forward(s, a[0], a[1], dt), bicycle_jacobian(s, a[0], a[1], dt)),
        DynamicsModel::Delta => (delta_forward(s, a[0], a[1], a[2], dt), delta_jacobian(dt)),
    };
    for (c, &p) in pass.iter().enumerate() {
        if !p {
            for row in jac.d_state_d_action.iter_mut() {
                row[c] = 0.0;
            }
        }
    }
    Ok((next, jac))
}

/// Advances the simulator by one step.
///
/// Controlled, valid agents move under the scenario's dynamics model with
/// clamped actions; every other agent replays its log state at `t + 1`.
/// With `noise_sigma > 0`, i.i.d. Gaussian noise is added to the position
/// of each controlled agent after the dynamics step.
pub fn step_env<R: Rng + ?Sized>(
    s: &SimState,
    actions: &[Option<Action>],
    scenario: &Scenario,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<SimState> {
    let last = scenario.last_t();
    if s.t >= last {
        return Err(Error::OutOfRange { t: s.t, last });
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::domain("step_env", format!("invalid noise sigma {noise_sigma}")));
    }
    if actions.len() != s.num_agents() {
        return Err(Error::domain(
            "step_env",
            format!("{} actions for {} agents", actions.len(), s.num_agents()),
        ));
    }
    let log_next = &scenario.log.states[s.t + 1];
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut next = log_next.clone();
    for i in 0..s.num_agents() {
        if !(s.controlled[i] && s.valid[i]) {
            continue;
        }
        let a = actions[i].ok_or(Error::MissingAction(i))?;
        check_action("step_env", &a, scenario.dynamics)?;
        let (mut agent, _) = step_with_jacobian(scenario.dynamics, &s.agents[i], &a.to_vec(), scenario.dt)?;
        if let Some(dist) = &noise {
            agent.x += dist.sample(rng);
            agent.y += dist.sample(rng);
        }
        next.agents[i] = agent;
        next.valid[i] = true;
    }
    next.t = s.t + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn st(x: f64, y: f64, yaw: f64, vx: f64, vy: f64) -> AgentState {
        AgentState::new(x, y, yaw, vx, vy, 4.5, 2.0)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn safe_speed_examples() {
        assert!(close(safe_speed(3.0, 4.0), 5.0, 1e-9));
        assert!(close(safe_speed(0.0, 0.0), 1e-6, 1e-18));
        let h = 1e-6;
        let gx = (safe_speed(h, 0.0) - safe_speed(-h, 0.0)) / (2.0 * h);
        let gy = (safe_speed(0.0, h) - safe_speed(0.0, -h)) / (2.0 * h);
        assert_eq!((gx, gy), (0.0, 0.0));
    }

    #[test]
    fn bicycle_examples() {
        let s = st(0.0, 0.0, 0.0, 2.0, 0.0);
        let n = step_bicycle(&s, &Action::Bicycle { accel: 0.0, steer: 0.0 }, 0.1).unwrap();
        for (got, want) in n.kinematics().iter().zip([0.2, 0.0, 0.0, 2.0, 0.0]) {
            assert!(close(*got, want, 1e-9));
        }
        let n = step_bicycle(&s, &Action::Bicycle { accel: 1.0, steer: 0.0 }, 0.1).unwrap();
        for (got, want) in n.kinematics().iter().zip([0.2, 0.0, 0.0, 2.1, 0.0]) {
            assert!(close(*got, want, 1e-9));
        }
        let n = step_bicycle(&s, &Action::Bicycle { accel: 0.0, steer: 0.5 }, 0.1).unwrap();
        let want = [0.2, 0.0, 0.1, 2.0 * 0.1f64.cos(), 2.0 * 0.1f64.sin()];
        for (got, want) in n.kinematics().iter().zip(want) {
            assert!(close(*got, want, 1e-9));
        }
    }

    #[test]
    fn delta_examples() {
        let s = st(1.0, 1.0, 0.0, 5.0, 5.0);
        let n = step_delta(
            &s,
            &Action::Delta {
                dx: 0.0,
                dy: 0.0,
                dyaw: 0.0,
            },
            0.1,
        )
        .unwrap();
        assert_eq!(n.kinematics(), [1.0, 1.0, 0.0, 0.0, 0.0]);
        let s = st(0.0, 0.0, 0.0, 0.0, 0.0);
        let n = step_delta(
            &s,
            &Action::Delta {
                dx: 0.3,
                dy: 0.4,
                dyaw: 0.1,
            },
            0.1,
        )
        .unwrap();
        for (got, want) in n.kinematics().iter().zip([0.3, 0.4, 0.1, 3.0, 4.0]) {
            assert!(close(*got, want, 1e-12));
        }
        let s = st(0.0, 0.0, 3.1, 0.0, 0.0);
        let n = step_delta(
            &s,
            &Action::Delta {
                dx: 0.0,
                dy: 0.0,
                dyaw: 0.1,
            },
            0.1,
        )
        .unwrap();
        assert!(close(n.yaw, 3.2 - 2.0 * PI, 1e-12));
    }

    #[test]
    fn mismatched_or_bad_inputs_are_errors() {
        let s = st(0.0, 0.0, 0.0, 1.0, 0.0);
        let delta = Action::Delta {
            dx: 0.0,
            dy: 0.0,
            dyaw: 0.0,
        };
        assert!(matches!(step_bicycle(&s, &delta, 0.1), Err(Error::ActionKind { .. })));
        let bad = st(f64::NAN, 0.0, 0.0, 1.0, 0.0);
        let a = Action::Bicycle { accel: 0.0, steer: 0.0 };
        assert!(matches!(step_bicycle(&bad, &a, 0.1), Err(Error::Domain { .. })));
        assert!(step_bicycle(&s, &a, 0.0).is_err());
        assert!(jacobian_bicycle(&bad, &a, 0.1).is_err());
    }

    #[test]
    fn inverse_examples() {
        let s = st(0.0, 0.0, 0.0, 2.0, 0.0);
        let a = Action::Bicycle { accel: 1.0, steer: 0.5 };
        let n = step_bicycle(&s, &a, 0.1).unwrap();
        let Action::Bicycle { accel, steer } = inverse_bicycle(&s, &n, 0.1).unwrap() else {
            panic!()
        };
        assert!(close(accel, 1.0, 1e-8) && close(steer, 0.5, 1e-8));

        let Action::Bicycle { accel, steer } = inverse_bicycle(&s, &s, 0.1).unwrap() else {
            panic!()
        };
        assert!(close(accel, 0.0, 1e-12) && steer == 0.0);

        let Action::Delta { dx, dy, dyaw } = inverse_delta(&s, &s).unwrap() else {
            panic!()
        };
        assert_eq!((dx, dy, dyaw), (0.0, 0.0, 0.0));

        let a = st(0.0, 0.0, -3.0, 0.0, 0.0);
        let b = st(0.0, 0.0, 3.0, 0.0, 0.0);
        let Action::Delta { dyaw, .. } = inverse_delta(&a, &b).unwrap() else {
            panic!()
        };
        assert!(close(dyaw, -(2.0 * PI - 6.0), 1e-12));
    }

    #[test]
    fn jacobian_linear_terms() {
        let s = st(0.0, 0.0, 0.0, 2.0, 0.0);
        let a = Action::Bicycle { accel: 0.3, steer: 0.1 };
        let j = jacobian_bicycle(&s, &a, 0.1).unwrap();
        assert!(close(j.d_state_d_action[2][1], 0.2, 1e-6));
        // speed row in the heading frame: d|v'|/d accel = dt
        let dspeed = j.d_state_d_action[3][0] * (0.0f64 + 0.2 * 0.1).cos() + j.d_state_d_action[4][0] * (0.2f64 * 0.1).sin();
        assert!(close(dspeed, 0.1, 1e-12));
        let jd = jacobian_delta(
            &s,
            &Action::Delta {
                dx: 0.1,
                dy: 0.0,
                dyaw: 0.0,
            },
            0.1,
        )
        .unwrap();
        assert_eq!(jd.d_state_d_action[0][0], 1.0);
        assert!(close(jd.d_state_d_action[3][0], 10.0, 1e-12));
        let zero = jacobian_bicycle(&st(0.0, 0.0, 0.3, 0.0, 0.0), &a, 0.1).unwrap();
        assert!(zero.is_finite());
    }

    #[test]
    fn clamping_masks_gradient() {
        let s = st(0.0, 0.0, 0.0, 2.0, 0.0);
        let (n, j) = step_with_jacobian(DynamicsModel::Bicycle, &s, &[10.0, 0.1], 0.1).unwrap();
        let ref_n = step_bicycle(
            &s,
            &Action::Bicycle {
                accel: MAX_ACCEL,
                steer: 0.1,
            },
            0.1,
        )
        .unwrap();
        assert_eq!(n, ref_n);
        assert!(j.d_state_d_action.iter().all(|r| r[0] == 0.0));
        assert!(j.d_state_d_action[2][1] != 0.0);
    }

    #[test]
    fn yaw_seam_is_continuous() {
        let a = Action::Bicycle { accel: 0.0, steer: 0.05 };
        for delta in [1e-3, 1e-6, 1e-9] {
            let l = step_bicycle(&st(0.0, 0.0, PI - delta, 3.0, 0.0), &a, 0.1).unwrap();
            let r = step_bicycle(&st(0.0, 0.0, -PI + delta, 3.0, 0.0), &a, 0.1).unwrap();
            let gap = (l.yaw.cos() - r.yaw.cos()).hypot(l.yaw.sin() - r.yaw.sin());
            assert!(gap < 3.0 * delta);
        }
    }
}
