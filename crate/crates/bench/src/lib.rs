//! Fixtures shared by the benchmarks.

use apg_core::scenario_io::generate;
use apg_core::{GenSpec, PolicyConfig, PolicyParams, RoadShape, Scenario};

/// One generated scenario with `n_agents` agents and `horizon` steps.
pub fn scenario(n_agents: usize, horizon: usize) -> Scenario {
    let spec = GenSpec {
        n_scenarios: 1,
        n_agents,
        lanes: 2,
        horizon,
        road: RoadShape::SCurve {
            radius: 40.0,
            period: 100.0,
        },
        seed: 3,
        ..GenSpec::default()
    };
    generate(&spec).expect("feasible spec").remove(0).0
}

pub fn policy(hidden: usize, s: &Scenario) -> PolicyParams {
    let cfg = PolicyConfig {
        hidden,
        ..PolicyConfig::default()
    };
    PolicyParams::init(cfg, s.dynamics, 0).expect("policy init")
}
