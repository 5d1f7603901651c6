//! Shared domain types: agent kinematics, actions, simulator snapshots,
//! trajectories and scenarios.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of supervised kinematic components per agent: x, y, yaw, vx, vy.
pub const STATE_DIM: usize = 5;

/// Wraps an angle into `[-π, π)` using `atan2(sin, cos)`.
///
/// The derivative of the wrapped angle with respect to its input is 1
/// everywhere except on the seam, which keeps gradients continuous where
/// a modulo-based wrap would not be.
pub fn wrap_yaw(angle: f64) -> Result<f64> {
    if !angle.is_finite() {
        return Err(Error::domain("wrap_yaw", format!("non-finite angle {angle}")));
    }
    Ok(wrap_angle(angle))
}

/// Signed smallest difference `a - b`, wrapped into `[-π, π)`.
pub fn yaw_diff(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::domain("yaw_diff", format!("non-finite input ({a}, {b})")));
    }
    Ok(wrap_angle(a - b))
}

/// Unchecked variant of [`wrap_yaw`] for callers that validated inputs.
#[inline]
pub(crate) fn wrap_angle(angle: f64) -> f64 {
    let w = angle.sin().atan2(angle.cos());
    // sin/cos of a large angle carry an error of a few ulps of the angle,
    // so anything that close to π is treated as the seam itself.
    let seam = PI - 4.0 * f64::EPSILON * angle.abs().max(1.0);
    if w >= seam {
        -PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, yaw: f64, vx: f64, vy: f64, length: f64, width: f64) -> Self {
        Self {
            x,
            y,
            yaw,
            vx,
            vy,
            length,
            width,
        }
    }

    /// Kinematic vector `[x, y, yaw, vx, vy]`.
    pub fn kinematics(&self) -> [f64; STATE_DIM] {
        [self.x, self.y, self.yaw, self.vx, self.vy]
    }

    /// Copy of `self` with the kinematic components replaced.
    pub fn with_kinematics(&self, k: [f64; STATE_DIM]) -> Self {
        Self {
            x: k[0],
            y: k[1],
            yaw: k[2],
            vx: k[3],
            vy: k[4],
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.kinematics().iter().all(|v| v.is_finite()) && self.length.is_finite() && self.width.is_finite()
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsModel {
    Bicycle,
    Delta,
}

impl DynamicsModel {
    pub fn action_dim(self) -> usize {
        match self {
            DynamicsModel::Bicycle => 2,
            DynamicsModel::Delta => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Longitudinal acceleration (m/s²) and path curvature (1/m).
    Bicycle { accel: f64, steer: f64 },
    /// Displacement (m) and heading change (rad) over one step.
    Delta { dx: f64, dy: f64, dyaw: f64 },
}

impl Action {
    pub fn kind(&self) -> DynamicsModel {
        match self {
            Action::Bicycle { .. } => DynamicsModel::Bicycle,
            Action::Delta { .. } => DynamicsModel::Delta,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Action::Bicycle { accel, steer } => vec![accel, steer],
            Action::Delta { dx, dy, dyaw } => vec![dx, dy, dyaw],
        }
    }

    pub fn from_slice(kind: DynamicsModel, v: &[f64]) -> Result<Self> {
        if v.len() != kind.action_dim() {
            return Err(Error::domain(
                "Action::from_slice",
                format!("{kind:?} needs {} components, got {}", kind.action_dim(), v.len()),
            ));
        }
        Ok(match kind {
            DynamicsModel::Bicycle => Action::Bicycle { accel: v[0], steer: v[1] },
            DynamicsModel::Delta => Action::Delta {
                dx: v[0],
                dy: v[1],
                dyaw: v[2],
            },
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|c| c.is_finite())
    }
}

/// Full simulator snapshot at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: usize,
    pub agents: Vec<AgentState>,
    pub valid: Vec<bool>,
    pub controlled: Vec<bool>,
}

impl SimState {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agents.len();
        if n == 0 {
            return Err(Error::invariant("agents", "a state needs at least one agent"));
        }
        if self.valid.len() != n || self.controlled.len() != n {
            return Err(Error::invariant(
                "valid/controlled",
                format!("lengths {}/{} do not match {n} agents", self.valid.len(), self.controlled.len()),
            ));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.length > 0.0 && a.width > 0.0) {
                return Err(Error::invariant(format!("agents[{i}].length/width"), "extents must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<SimState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invariant("dt", "must be positive"));
        }
        for w in self.states.windows(2) {
            if w[1].t != w[0].t + 1 {
                return Err(Error::invariant(
                    "log.states.t",
                    format!("timestep {} followed by {}", w[0].t, w[1].t),
                ));
            }
        }
        for s in &self.states {
            s.validate()?;
        }
        Ok(())
    }
}

/// A roadgraph polyline: a lane centerline with a drivable half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub roadgraph: Vec<Polyline>,
    /// Expert states; index `history_len` is the initial simulator state.
    pub log: Trajectory,
    pub is_modeled: Vec<bool>,
    pub dynamics: DynamicsModel,
    pub dt: f64,
    pub history_len: usize,
    pub horizon: usize,
}

impl Scenario {
    pub fn init(&self) -> &SimState {
        &self.log.states[self.history_len]
    }

    pub fn num_agents(&self) -> usize {
        self.log.states.first().map_or(0, |s| s.agents.len())
    }

    /// Indices of agents driven by the policy.
    pub fn controlled_indices(&self) -> Vec<usize> {
        self.init()
            .controlled
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    /// Index of the last log state.
    pub fn last_t(&self) -> usize {
        self.history_len + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invariant("dt", "must be positive"));
        }
        if self.log.dt != self.dt {
            return Err(Error::invariant("log.dt", "differs from scenario dt"));
        }
        let expected = self.history_len + self.horizon + 1;
        if self.log.states.len() != expected {
            return Err(Error::invariant(
                "log",
                format!("length {} != history_len + horizon + 1 = {expected}", self.log.states.len()),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::invariant("horizon", "must be at least 1"));
        }
        self.log.validate()?;
        let n = self.num_agents();
        for (t, s) in self.log.states.iter().enumerate() {
            if s.t != t {
                return Err(Error::invariant(format!("log[{t}].t"), format!("expected {t}, found {}", s.t)));
            }
            if s.agents.len() != n {
                return Err(Error::invariant(
                    format!("log[{t}].agents"),
                    format!("expected {n} agents, found {}", s.agents.len()),
                ));
            }
            if s.controlled != self.init().controlled {
                return Err(Error::invariant(
                    format!("log[{t}].controlled"),
                    "controlled flags must be constant over time",
                ));
            }
            for (i, a) in s.agents.iter().enumerate() {
                if !a.is_finite() {
                    return Err(Error::invariant(format!("agents[{i}].log[{t}]"), "non-finite value"));
                }
                if !(-PI..PI).contains(&a.yaw) {
                    return Err(Error::invariant(
                        format!("agents[{i}].log[{t}].yaw"),
                        format!("{} outside [-pi, pi)", a.yaw),
                    ));
                }
            }
        }
        if self.is_modeled.len() != n {
            return Err(Error::invariant(
                "is_modeled",
                format!("length {} != {n} agents", self.is_modeled.len()),
            ));
        }
        for (k, p) in self.roadgraph.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(Error::invariant(
                    format!("roadgraph[{k}].points"),
                    "a polyline needs at least 2 points",
                ));
            }
            if !(p.half_width > 0.0) {
                return Err(Error::invariant(format!("roadgraph[{k}].half_width"), "must be positive"));
            }
            if p.points.iter().flatten().any(|c| !c.is_finite()) {
                return Err(Error::invariant(format!("roadgraph[{k}].points"), "non-finite coordinate"));
            }
        }
        Ok(())
    }
}
