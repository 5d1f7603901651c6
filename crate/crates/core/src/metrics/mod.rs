//! Evaluation metrics: displacement error, box overlap and offroad checks,
//! and the multi-mode evaluator.

pub mod eval;
pub mod oracle;

pub use eval::{evaluate, EvalConfig, EvalReport, ModeLabel, ModeRow, ScenarioSummary, Summary};

use crate::error::{Error, Result};
use crate::types::{AgentState, Polyline, Scenario, SimState, Trajectory};

/// Mean Euclidean `(x, y)` distance over the `(t, agent)` pairs marked in
/// `mask` (`mask[t][agent]`).
pub fn ade(sim: &Trajectory, log: &Trajectory, mask: &[Vec<bool>]) -> Result<f64> {
    if sim.len() != log.len() || mask.len() != sim.len() {
        return Err(Error::domain(
            "ade",
            format!("lengths differ: sim {}, log {}, mask {}", sim.len(), log.len(), mask.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((s, l), m) in sim.states.iter().zip(&log.states).zip(mask) {
        if m.len() != s.num_agents() || m.len() != l.num_agents() {
            return Err(Error::domain(
                "ade",
                format!("mask row has {} entries for {} agents", m.len(), s.num_agents()),
            ));
        }
        for (i, _) in m.iter().enumerate().filter(|(_, &on)| on) {
            let (a, b) = (&s.agents[i], &l.agents[i]);
            total += (a.x - b.x).hypot(a.y - b.y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// ADE mask over the horizon steps after `history_len`: controlled agents
/// valid in both trajectories.
pub fn horizon_mask(sim: &Trajectory, log: &Trajectory, history_len: usize) -> Vec<Vec<bool>> {
    sim.states
        .iter()
        .zip(&log.states)
        .enumerate()
        .map(|(t, (s, l))| {
            (0..s.num_agents())
                .map(|i| t > history_len && s.controlled[i] && s.valid[i] && l.valid[i])
                .collect()
        })
        .collect()
}

/// Unit heading and normal of a box.
fn axes(a: &AgentState) -> ([f64; 2], [f64; 2]) {
    let (s, c) = a.yaw.sin_cos();
    ([c, s], [-s, c])
}

/// Half-extent of `a` projected onto the unit axis `u`.
fn radius(a: &AgentState, u: [f64; 2]) -> f64 {
    let (f, n) = axes(a);
    0.5 * a.length * (f[0] * u[0] + f[1] * u[1]).abs() + 0.5 * a.width * (n[0] * u[0] + n[1] * u[1]).abs()
}

/// Largest separating gap over the four box axes; `≤ 0` means overlap.
pub fn obb_gap(a: &AgentState, b: &AgentState) -> f64 {
    let d = [b.x - a.x, b.y - a.y];
    let (fa, na) = axes(a);
    let (fb, nb) = axes(b);
    [fa, na, fb, nb]
        .into_iter()
        .map(|u| (d[0] * u[0] + d[1] * u[1]).abs() - radius(a, u) - radius(b, u))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Whether the oriented footprints of `a` and `b` intersect (separating
/// axis test); touching boxes overlap.
pub fn obb_overlap(a: &AgentState, b: &AgentState) -> bool {
    obb_gap(a, b) <= 0.0
}

/// Distance from `p` to the segment `a`–`b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let s = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - s * ab[0]).hypot(ap[1] - s * ab[1])
}

/// Distance from `p` to a polyline; a single point is treated as a
/// degenerate segment.
pub fn polyline_distance(p: [f64; 2], line: &Polyline) -> f64 {
    match line.points.as_slice() {
        [] => f64::INFINITY,
        [q] => point_segment_distance(p, *q, *q),
        pts => pts
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Whether the agent's center lies outside every lane corridor. A center
/// exactly on a corridor edge is on-road; an empty roadgraph is all
/// offroad.
pub fn offroad(a: &AgentState, roadgraph: &[Polyline]) -> bool {
    !roadgraph.iter().any(|line| polyline_distance([a.x, a.y], line) <= line.half_width)
}

/// Overlap and offroad flags of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryFlags {
    /// Some controlled agent overlaps another valid agent at some step.
    pub overlap: bool,
    /// Some controlled agent is offroad at some step.
    pub offroad: bool,
    /// Fraction of (controlled agent, step) pairs that overlap.
    pub overlap_perc: f64,
    /// Fraction of (controlled agent, step) pairs that are offroad.
    pub offroad_perc: f64,
}

fn state_flags(s: &SimState, i: usize, roadgraph: &[Polyline]) -> (bool, bool) {
    let a = &s.agents[i];
    let hit = (0..s.num_agents()).any(|j| j != i && s.valid[j] && obb_overlap(a, &s.agents[j]));
    (hit, offroad(a, roadgraph))
}

/// Flags over the horizon steps (after `scenario.history_len`) of `traj`.
/// Each agent of a colliding pair counts as one flagged pair if it is
/// controlled.
pub fn trajectory_flags(traj: &Trajectory, scenario: &Scenario) -> TrajectoryFlags {
    let mut pairs = 0usize;
    let (mut hits, mut offs) = (0usize, 0usize);
    for s in traj.states.iter().skip(scenario.history_len + 1) {
        for i in 0..s.num_agents() {
            if !(s.controlled[i] && s.valid[i]) {
                continue;
            }
            pairs += 1;
            let (hit, off) = state_flags(s, i, &scenario.roadgraph);
            hits += usize::from(hit);
            offs += usize::from(off);
        }
    }
    let frac = |k: usize| if pairs == 0 { 0.0 } else { k as f64 / pairs as f64 };
    TrajectoryFlags {
        overlap: hits > 0,
        offroad: offs > 0,
        overlap_perc: frac(hits),
        offroad_perc: frac(offs),
    }
}
