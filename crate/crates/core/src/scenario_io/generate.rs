//! Synthetic scenarios: parallel lanes along a straight, circular or
//! S-shaped reference path, with expert logs integrated under the bicycle
//! model.
//!
//! Each agent follows its lane with pure-pursuit steering and a sinusoidal
//! acceleration profile. Every log transition is a bicycle step, so expert
//! actions exist exactly. Generated scenarios are checked for overlaps,
//! offroad states and running off the road end; failed draws are retried.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Split;
use crate::dynamics::{step_bicycle, MAX_ACCEL, MAX_STEER};
use crate::error::{Error, Result};
use crate::metrics::{obb_overlap, offroad};
use crate::trainer::mix_seed;
use crate::types::{wrap_angle, Action, AgentState, DynamicsModel, Polyline, Scenario, SimState, Trajectory};

/// Reference path of the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RoadShape {
    Straight,
    /// Constant left turn with the given radius (m).
    Arc {
        radius: f64,
    },
    /// Curvature `sin(2π s / period) / radius` along arc length `s`.
    SCurve {
        radius: f64,
        period: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub n_scenarios: usize,
    /// The last `n_val` scenarios are tagged as validation.
    pub n_val: usize,
    pub n_agents: usize,
    pub lanes: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub dt: f64,
    pub road: RoadShape,
    /// Road length along the reference path; 0 sizes it from the speeds.
    pub road_length: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Upper bound of the sinusoidal acceleration amplitude (m/s²).
    pub accel_amplitude: f64,
    /// Dynamics model the scenarios are trained under.
    pub dynamics: DynamicsModel,
    pub seed: u64,
    pub id_prefix: String,
    /// Attempts per scenario before giving up.
    pub max_attempts: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_scenarios: 10,
            n_val: 0,
            n_agents: 2,
            lanes: 2,
            history_len: 10,
            horizon: 80,
            dt: 0.1,
            road: RoadShape::Straight,
            road_length: 0.0,
            speed_min: 4.0,
            speed_max: 8.0,
            accel_amplitude: 1.0,
            dynamics: DynamicsModel::Bicycle,
            seed: 0,
            id_prefix: "s".into(),
            max_attempts: 50,
        }
    }
}

pub const LANE_SPACING: f64 = 4.0;
pub const LANE_HALF_WIDTH: f64 = 2.0;
/// Sampling step of the dense reference path (m).
const PATH_STEP: f64 = 0.25;
/// Spacing of the stored polyline points (m).
const POLYLINE_STEP: f64 = 1.0;
/// Free road kept behind the first and beyond the last position (m).
const END_MARGIN: f64 = 10.0;
const MIN_SPEED: f64 = 0.5;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 || self.lanes == 0 {
            return bad("n_agents and lanes must be ≥ 1".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be ≥ 1".into());
        }
        if self.n_val > self.n_scenarios {
            return bad(format!("n_val {} exceeds n_scenarios {}", self.n_val, self.n_scenarios));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.speed_min >= MIN_SPEED && self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return bad(format!(
                "speeds must satisfy {MIN_SPEED} ≤ speed_min ≤ speed_max, got {}..{}",
                self.speed_min, self.speed_max
            ));
        }
        if !(0.0..=2.0).contains(&self.accel_amplitude) {
            return bad(format!("accel_amplitude must be in [0, 2], got {}", self.accel_amplitude));
        }
        if !(self.road_length >= 0.0 && self.road_length.is_finite()) {
            return bad(format!("road_length must be ≥ 0, got {}", self.road_length));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be ≥ 1".into());
        }
        match self.road {
            RoadShape::Arc { radius } if !(radius > 0.0 && radius.is_finite()) => bad(format!("arc radius must be positive, got {radius}")),
            RoadShape::SCurve { radius, period } if !(radius > 0.0 && period > 0.0 && radius.is_finite() && period.is_finite()) => {
                bad(format!("scurve radius and period must be positive, got {radius}, {period}"))
            }
            _ => Ok(()),
        }
    }

    fn curvature(&self, s: f64) -> f64 {
        match self.road {
            RoadShape::Straight => 0.0,
            RoadShape::Arc { radius } => 1.0 / radius,
            RoadShape::SCurve { radius, period } => (2.0 * PI * s / period).sin() / radius,
        }
    }

    fn max_curvature(&self) -> f64 {
        match self.road {
            RoadShape::Straight => 0.0,
            RoadShape::Arc { radius } | RoadShape::SCurve { radius, .. } => 1.0 / radius,
        }
    }

    /// Lateral offset of lane `j`, lanes centered on the reference path.
    fn lane_offset(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.lanes as f64 - 1.0)) * LANE_SPACING
    }

    fn travel(&self) -> f64 {
        let t = (self.history_len + self.horizon) as f64 * self.dt;
        self.speed_max * t + 0.5 * self.accel_amplitude * t * t
    }

    /// Agents per lane and the longitudinal slot length.
    fn slots(&self) -> (usize, f64) {
        let per_lane = self.n_agents.div_ceil(self.lanes);
        // room for a car plus what a speed difference can close up
        let t = (self.history_len + self.horizon) as f64 * self.dt;
        let slot = 8.0 + (self.speed_max - self.speed_min) * t + self.accel_amplitude * t * t;
        (per_lane, slot)
    }

    fn length(&self) -> f64 {
        let (per_lane, slot) = self.slots();
        let needed = 2.0 * END_MARGIN + per_lane as f64 * slot + self.travel();
        if self.road_length > 0.0 {
            self.road_length
        } else {
            needed
        }
    }

    fn check_feasible(&self) -> Result<()> {
        let edge = self.lane_offset(self.lanes - 1).abs() + LANE_HALF_WIDTH;
        if edge * self.max_curvature() >= 0.8 {
            return Err(Error::Infeasible(format!(
                "lanes reach {edge} m from the reference path, too far for its minimum radius {}",
                1.0 / self.max_curvature()
            )));
        }
        let (per_lane, slot) = self.slots();
        let needed = 2.0 * END_MARGIN + per_lane as f64 * slot + self.travel();
        if self.length() < needed {
            return Err(Error::Infeasible(format!(
                "{} agents in {} lanes need a {needed:.1} m road, spec gives {}",
                self.n_agents,
                self.lanes,
                self.length()
            )));
        }
        Ok(())
    }
}

/// A lane sampled densely along arc length.
struct Lane {
    points: Vec<[f64; 2]>,
    headings: Vec<f64>,
}

impl Lane {
    fn at(&self, s: f64) -> ([f64; 2], f64) {
        let k = ((s / PATH_STEP).round().max(0.0) as usize).min(self.points.len() - 1);
        (self.points[k], self.headings[k])
    }

    fn polyline(&self) -> Polyline {
        let stride = (POLYLINE_STEP / PATH_STEP).round() as usize;
        let mut points: Vec<[f64; 2]> = self.points.iter().step_by(stride).copied().collect();
        let last = *self.points.last().expect("lanes are non-empty");
        if points.last() != Some(&last) {
            points.push(last);
        }
        Polyline {
            points,
            half_width: LANE_HALF_WIDTH,
        }
    }

    /// Index of the point closest to `p`, searched near `hint`.
    fn closest(&self, p: [f64; 2], hint: usize) -> usize {
        let lo = hint.saturating_sub(40);
        let hi = (hint + 400).min(self.points.len());
        (lo..hi)
            .min_by(|&a, &b| {
                let d = |k: usize| (self.points[k][0] - p[0]).powi(2) + (self.points[k][1] - p[1]).powi(2);
                d(a).total_cmp(&d(b))
            })
            .expect("non-empty search window")
    }
}

/// Reference path by midpoint integration of the curvature profile; lanes
/// are offset along its normal.
fn build_lanes(spec: &GenSpec) -> Vec<Lane> {
    let n = (spec.length() / PATH_STEP).ceil() as usize + 1;
    let mut refp = Vec::with_capacity(n);
    let mut heads = Vec::with_capacity(n);
    let (mut p, mut h) = ([-END_MARGIN, 0.0], 0.0f64);
    for k in 0..n {
        refp.push(p);
        heads.push(h);
        let s = k as f64 * PATH_STEP;
        let mid = h + 0.5 * PATH_STEP * spec.curvature(s);
        p = [p[0] + PATH_STEP * mid.cos(), p[1] + PATH_STEP * mid.sin()];
        h += PATH_STEP * spec.curvature(s + 0.5 * PATH_STEP);
    }
    (0..spec.lanes)
        .map(|j| {
            let o = spec.lane_offset(j);
            Lane {
                points: refp
                    .iter()
                    .zip(&heads)
                    .map(|(q, h)| [q[0] - o * h.sin(), q[1] + o * h.cos()])
                    .collect(),
                headings: heads.clone(),
            }
        })
        .collect()
}

struct Driver {
    lane: usize,
    hint: usize,
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl Driver {
    fn action(&mut self, lanes: &[Lane], a: &AgentState, t: usize, dt: f64) -> Action {
        let lane = &lanes[self.lane];
        self.hint = lane.closest([a.x, a.y], self.hint);
        let v = a.speed();
        let lookahead = (0.8 * v).max(4.0);
        let target = lane.points[(self.hint + (lookahead / PATH_STEP).round() as usize).min(lane.points.len() - 1)];
        let alpha = wrap_angle((target[1] - a.y).atan2(target[0] - a.x) - a.yaw);
        let dist = (target[0] - a.x).hypot(target[1] - a.y).max(1e-6);
        let steer = (2.0 * alpha.sin() / dist).clamp(-MAX_STEER, MAX_STEER);
        let mut accel = self.amplitude * (self.omega * t as f64 * dt + self.phase).sin();
        if v + accel * dt < MIN_SPEED {
            accel = 0.0;
        }
        Action::Bicycle {
            accel: accel.clamp(-MAX_ACCEL, MAX_ACCEL),
            steer,
        }
    }
}

fn attempt(spec: &GenSpec, lanes: &[Lane], id: &str, rng: &mut ChaCha8Rng) -> Result<Option<Scenario>> {
    let (per_lane, slot) = spec.slots();
    let steps = spec.history_len + spec.horizon;
    let mut drivers = Vec::with_capacity(spec.n_agents);
    let mut agents = Vec::with_capacity(spec.n_agents);
    for i in 0..spec.n_agents {
        let (lane, rank) = (i % spec.lanes, i / spec.lanes);
        // staggered slots, later agents further ahead, jittered within the slot
        let s0 = END_MARGIN + (per_lane - 1 - rank) as f64 * slot + rng.gen_range(0.0..0.25 * slot);
        let (p, h) = lanes[lane].at(s0);
        let v = rng.gen_range(spec.speed_min..=spec.speed_max);
        agents.push(AgentState::new(
            p[0],
            p[1],
            wrap_angle(h),
            v * h.cos(),
            v * h.sin(),
            rng.gen_range(4.0..5.0),
            rng.gen_range(1.8..2.1),
        ));
        drivers.push(Driver {
            lane,
            hint: (s0 / PATH_STEP) as usize,
            amplitude: rng.gen_range(0.0..=spec.accel_amplitude),
            omega: 2.0 * PI / rng.gen_range(2.0..8.0),
            phase: rng.gen_range(0.0..2.0 * PI),
        });
    }
    let n = spec.n_agents;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(SimState {
        t: 0,
        agents,
        valid: vec![true; n],
        controlled: vec![true; n],
    });
    for t in 0..steps {
        let cur = &states[t];
        let mut next = cur.clone();
        next.t = t + 1;
        for (i, d) in drivers.iter_mut().enumerate() {
            let a = d.action(lanes, &cur.agents[i], t, spec.dt);
            next.agents[i] = step_bicycle(&cur.agents[i], &a, spec.dt)?;
        }
        states.push(next);
    }
    let roadgraph: Vec<Polyline> = lanes.iter().map(Lane::polyline).collect();
    let end_zone = lanes[0].points.len().saturating_sub((END_MARGIN / PATH_STEP) as usize);
    for s in &states {
        for (i, a) in s.agents.iter().enumerate() {
            if offroad(a, &roadgraph) || (0..i).any(|j| obb_overlap(a, &s.agents[j])) {
                return Ok(None);
            }
        }
    }
    if drivers.iter().any(|d| d.hint >= end_zone) {
        return Ok(None);
    }
    let s = Scenario {
        id: id.to_string(),
        roadgraph,
        log: Trajectory { states, dt: spec.dt },
        is_modeled: vec![true; n],
        dynamics: spec.dynamics,
        dt: spec.dt,
        history_len: spec.history_len,
        horizon: spec.horizon,
    };
    s.validate()?;
    Ok(Some(s))
}

/// Generates `spec.n_scenarios` scenarios with their split tags. Scenario
/// `i` depends only on `(spec, i)`.
pub fn generate(spec: &GenSpec) -> Result<Vec<(Scenario, Split)>> {
    spec.validate()?;
    spec.check_feasible()?;
    let lanes = build_lanes(spec);
    (0..spec.n_scenarios)
        .into_par_iter()
        .map(|i| {
            let id = format!("{}{i:05}", spec.id_prefix);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i as u64, 0));
            for _ in 0..spec.max_attempts {
                if let Some(s) = attempt(spec, &lanes, &id, &mut rng)? {
                    let split = if i + spec.n_val >= spec.n_scenarios {
                        Split::Val
                    } else {
                        Split::Train
                    };
                    return Ok((s, split));
                }
            }
            Err(Error::Infeasible(format!(
                "scenario {id}: no valid draw in {} attempts",
                spec.max_attempts
            )))
        })
        .collect()
}
