use crate::error::{Error, Result};
use crate::types::{wrap_angle, Scenario, SimState};

use super::PolicyConfig;

/// Per-point road features in the observing agent's frame.
pub const ROAD_FEATURES: usize = 4;
/// Per-neighbour features in the observing agent's frame.
pub const AGENT_FEATURES: usize = 9;

const POS_SCALE: f64 = 0.1;
const VEL_SCALE: f64 = 0.1;
const SIZE_SCALE: f64 = 0.2;
const HALF_WIDTH_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoadPoint {
    pub x: f64,
    pub y: f64,
    pub half_width: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Neighbor {
    /// Index of the neighbour in the scene.
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub cos_yaw: f64,
    pub sin_yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
    pub valid: bool,
}

/// Ego-frame view of the scene for one agent. Built from plain values, so
/// it never carries gradient ancestry.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub road: Vec<RoadPoint>,
    pub agents: Vec<Neighbor>,
    pub speed: f64,
}

/// Width of [`Observation::features`] for a config.
pub fn feature_width(cfg: &PolicyConfig) -> usize {
    cfg.k_road * ROAD_FEATURES + cfg.k_agent * AGENT_FEATURES + 1
}

impl Observation {
    /// Flat, scaled feature vector; padding entries are zero.
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.road.len() * ROAD_FEATURES + self.agents.len() * AGENT_FEATURES + 1);
        self.write_features(&mut f);
        f
    }

    pub(crate) fn write_features(&self, f: &mut Vec<f64>) {
        for p in &self.road {
            if p.valid {
                f.extend_from_slice(&[p.x * POS_SCALE, p.y * POS_SCALE, p.half_width * HALF_WIDTH_SCALE, 1.0]);
            } else {
                f.extend_from_slice(&[0.0; ROAD_FEATURES]);
            }
        }
        for a in &self.agents {
            if a.valid {
                f.extend_from_slice(&[
                    a.x * POS_SCALE,
                    a.y * POS_SCALE,
                    a.cos_yaw,
                    a.sin_yaw,
                    a.vx * VEL_SCALE,
                    a.vy * VEL_SCALE,
                    a.length * SIZE_SCALE,
                    a.width * SIZE_SCALE,
                    1.0,
                ]);
            } else {
                f.extend_from_slice(&[0.0; AGENT_FEATURES]);
            }
        }
        f.push(self.speed * VEL_SCALE);
    }
}

/// Keeps the `k` smallest `(distance², index)` keys in ascending order.
fn nearest<T>(mut cands: Vec<(f64, usize, T)>, k: usize) -> Vec<(f64, usize, T)> {
    let cmp = |a: &(f64, usize, T), b: &(f64, usize, T)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cands.len() > k && k > 0 {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(cmp);
    cands.truncate(k);
    cands
}

/// Builds the observation of agent `agent_idx` in state `s`.
///
/// Road points and neighbours are rotated into the agent's heading frame,
/// limited to `cfg.r_obs`, and the `k` nearest are kept (ties go to the
/// lower index). Missing entries are zero-padded and marked invalid.
pub fn build_observation(s: &SimState, scenario: &Scenario, agent_idx: usize, cfg: &PolicyConfig) -> Result<Observation> {
    if agent_idx >= s.num_agents() || !s.valid[agent_idx] || !s.controlled[agent_idx] {
        return Err(Error::domain(
            "build_observation",
            format!("agent {agent_idx} is not a valid controlled agent"),
        ));
    }
    let ego = &s.agents[agent_idx];
    let (sin_yaw, cos_yaw) = ego.yaw.sin_cos();
    let to_ego = |dx: f64, dy: f64| (cos_yaw * dx + sin_yaw * dy, -sin_yaw * dx + cos_yaw * dy);
    let r2 = cfg.r_obs * cfg.r_obs;

    let mut road_cands = Vec::new();
    let mut flat = 0usize;
    for line in &scenario.roadgraph {
        for p in &line.points {
            let (dx, dy) = (p[0] - ego.x, p[1] - ego.y);
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                road_cands.push((d2, flat, (dx, dy, line.half_width)));
            }
            flat += 1;
        }
    }
    let mut road: Vec<RoadPoint> = nearest(road_cands, cfg.k_road)
        .into_iter()
        .map(|(_, _, (dx, dy, hw))| {
            let (x, y) = to_ego(dx, dy);
            RoadPoint {
                x,
                y,
                half_width: hw,
                valid: true,
            }
        })
        .collect();
    road.resize(cfg.k_road, RoadPoint::default());

    let mut agent_cands = Vec::new();
    for (j, other) in s.agents.iter().enumerate() {
        if j == agent_idx || !s.valid[j] {
            continue;
        }
        let (dx, dy) = (other.x - ego.x, other.y - ego.y);
        let d2 = dx * dx + dy * dy;
        if d2 <= r2 {
            agent_cands.push((d2, j, ()));
        }
    }
    let mut agents: Vec<Neighbor> = nearest(agent_cands, cfg.k_agent)
        .into_iter()
        .map(|(_, j, ())| {
            let other = &s.agents[j];
            let (x, y) = to_ego(other.x - ego.x, other.y - ego.y);
            let rel_yaw = wrap_angle(other.yaw - ego.yaw);
            let (vx, vy) = to_ego(other.vx - ego.vx, other.vy - ego.vy);
            Neighbor {
                index: j,
                x,
                y,
                cos_yaw: rel_yaw.cos(),
                sin_yaw: rel_yaw.sin(),
                vx,
                vy,
                length: other.length,
                width: other.width,
                valid: true,
            }
        })
        .collect();
    agents.resize(cfg.k_agent, Neighbor::default());

    Ok(Observation {
        road,
        agents,
        speed: ego.speed(),
    })
}
