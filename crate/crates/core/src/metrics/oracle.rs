//! Brute-force reference versions of the geometric metrics, used to
//! cross-check the exact implementations.

use super::point_segment_distance;
use crate::types::{AgentState, Polyline};

fn corners(a: &AgentState) -> [[f64; 2]; 4] {
    let (s, c) = a.yaw.sin_cos();
    let (hl, hw) = (0.5 * a.length, 0.5 * a.width);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [a.x + u * c - v * s, a.y + u * s + v * c])
}

fn contains(a: &AgentState, p: [f64; 2]) -> bool {
    let (s, c) = a.yaw.sin_cos();
    let (dx, dy) = (p[0] - a.x, p[1] - a.y);
    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
    u.abs() <= 0.5 * a.length && v.abs() <= 0.5 * a.width
}

/// Corners plus `samples` evenly spaced points on the outline of `a`.
pub fn outline_points(a: &AgentState, samples: usize) -> Vec<[f64; 2]> {
    let k = corners(a);
    let per_edge = samples.div_ceil(4).max(1);
    let mut out = k.to_vec();
    for e in 0..4 {
        let (p, q) = (k[e], k[(e + 1) % 4]);
        for j in 1..per_edge {
            let s = j as f64 / per_edge as f64;
            out.push([p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]);
        }
    }
    out
}

/// Overlap by sampling: some outline point of one box lies in the other.
pub fn overlap_by_sampling(a: &AgentState, b: &AgentState, samples: usize) -> bool {
    outline_points(a, samples / 2).into_iter().any(|p| contains(b, p)) || outline_points(b, samples / 2).into_iter().any(|p| contains(a, p))
}

/// Distance to a polyline measured against points spaced at most `step`
/// apart along it.
pub fn densified_distance(p: [f64; 2], line: &Polyline, step: f64) -> f64 {
    let mut best = f64::INFINITY;
    let pts = &line.points;
    if pts.len() == 1 {
        return point_segment_distance(p, pts[0], pts[0]);
    }
    for w in pts.windows(2) {
        let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        let n = (len / step).ceil().max(1.0) as usize;
        for j in 0..=n {
            let s = j as f64 / n as f64;
            let q = [w[0][0] + s * (w[1][0] - w[0][0]), w[0][1] + s * (w[1][1] - w[0][1])];
            best = best.min((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    best
}

/// Offroad by densified distance.
pub fn offroad_by_densification(a: &AgentState, roadgraph: &[Polyline], step: f64) -> bool {
    !roadgraph.iter().any(|l| densified_distance([a.x, a.y], l, step) <= l.half_width)
}

/// Signed distance of the agent center to the nearest corridor edge
/// (negative inside), for excluding boundary cases.
pub fn corridor_margin(a: &AgentState, roadgraph: &[Polyline]) -> f64 {
    roadgraph
        .iter()
        .map(|l| super::polyline_distance([a.x, a.y], l) - l.half_width)
        .fold(f64::INFINITY, f64::min)
}
