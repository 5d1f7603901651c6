//! Small hand-built scenarios for unit tests.

use crate::types::{AgentState, DynamicsModel, Polyline, Scenario, SimState, Trajectory};

/// Agents coasting along their heading at constant speed, all controlled,
/// on a straight road along the x axis.
pub(crate) fn coasting_scenario(agents: &[AgentState], history_len: usize, horizon: usize, model: DynamicsModel) -> Scenario {
    let dt = 0.1;
    let n = agents.len();
    let states = (0..=history_len + horizon)
        .map(|t| {
            let k = t as f64 * dt;
            SimState {
                t,
                agents: agents
                    .iter()
                    .map(|a| AgentState {
                        x: a.x + a.vx * k,
                        y: a.y + a.vy * k,
                        ..*a
                    })
                    .collect(),
                valid: vec![true; n],
                controlled: vec![true; n],
            }
        })
        .collect();
    Scenario {
        id: "coast".into(),
        roadgraph: vec![Polyline {
            points: (0..=50).map(|i| [-50.0 + 4.0 * i as f64, 0.0]).collect(),
            half_width: 6.0,
        }],
        log: Trajectory { states, dt },
        is_modeled: vec![true; n],
        dynamics: model,
        dt,
        history_len,
        horizon,
    }
}
