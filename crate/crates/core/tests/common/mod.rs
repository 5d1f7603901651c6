//! Shared fixtures for the integration tests and the acceptance target.
#![allow(dead_code)]

use apg_core::autodiff::Tensor;
use apg_core::metrics::eval::EvalReport;
use apg_core::scenario_io::generate;
use apg_core::trainer::{rollout_apg, HiddenReset, PolicyNoise, RolloutOptions};
use apg_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The toy task: one SCurve scenario with a single agent at constant speed.
pub fn toy_scenario() -> Scenario {
    let spec = GenSpec {
        n_scenarios: 1,
        n_agents: 1,
        lanes: 1,
        horizon: 40,
        road: RoadShape::SCurve {
            radius: 30.0,
            period: 80.0,
        },
        accel_amplitude: 0.0,
        seed: 1,
        ..GenSpec::default()
    };
    generate(&spec).expect("toy spec is feasible").remove(0).0
}

pub fn toy_policy() -> PolicyConfig {
    PolicyConfig {
        hidden: 64,
        k_road: 8,
        k_agent: 2,
        ..PolicyConfig::default()
    }
}

/// APG toy settings; BC reuses them with `mode = Bc`.
pub fn toy_train(mode: Mode, reset: ResetPolicy, seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        lr: 5e-3,
        lr_decay: 0.5,
        lr_decay_every: 300,
        batch_size: 1,
        epochs,
        reset,
        hidden_reset: HiddenReset::Detach,
        seed,
        ..TrainConfig::default()
    }
}

/// Deterministic-rollout ADE over `data`.
pub fn det_ade(params: &PolicyParams, data: &[Scenario]) -> f64 {
    let cfg = EvalConfig {
        modes: 1,
        noise_sigma: 0.0,
        seed: 0,
    };
    evaluate(params, data, &cfg).expect("evaluation").summary.deterministic_ade
}

/// First multiple of `every` epochs at which the deterministic ADE drops
/// below `threshold`, or `None` within `max_epochs`.
pub fn epochs_to_reach(
    data: &[Scenario],
    cfg: TrainConfig,
    policy: PolicyConfig,
    threshold: f64,
    every: usize,
    max_epochs: usize,
) -> Option<usize> {
    let params = PolicyParams::init(policy, data[0].dynamics, cfg.seed).expect("policy init");
    let mut t = Trainer::new(data, TrainConfig { epochs: max_epochs, ..cfg }, params).expect("trainer");
    loop {
        if t.epoch() % every == 0 && det_ade(t.params(), data) < threshold {
            return Some(t.epoch());
        }
        if t.is_done() {
            return None;
        }
        t.run_epoch().expect("epoch");
    }
}

/// Trains until the epoch-mean BC loss is below `target` or `max_epochs`
/// run out. Returns the parameters and the last epoch loss.
pub fn train_bc_to(data: &[Scenario], cfg: TrainConfig, policy: PolicyConfig, target: f64, max_epochs: usize) -> (PolicyParams, f64) {
    let params = PolicyParams::init(policy, data[0].dynamics, cfg.seed).expect("policy init");
    let mut t = Trainer::new(data, TrainConfig { epochs: max_epochs, ..cfg }, params).expect("trainer");
    let mut last = f64::INFINITY;
    while !t.is_done() {
        last = t.run_epoch().expect("epoch").mean_loss;
        if last < target {
            break;
        }
    }
    (t.into_params(), last)
}

/// Transition `k` of `s` as a standalone one-step scenario. Transition 0
/// keeps the history warm-up; later ones start from a zero hidden state.
pub fn transition_scenario(s: &Scenario, k: usize) -> Scenario {
    let hl = s.history_len;
    let (start, history_len) = if k == 0 { (0, hl) } else { (hl + k, 0) };
    let mut states: Vec<SimState> = s.log.states[start..=hl + k + 1].to_vec();
    for (t, st) in states.iter_mut().enumerate() {
        st.t = t;
    }
    Scenario {
        id: format!("{}-t{k}", s.id),
        log: Trajectory { states, dt: s.dt },
        history_len,
        horizon: 1,
        ..s.clone()
    }
}

/// Generated dataset for the scaled-down benchmark experiments.
pub fn bench_spec(n_scenarios: usize, seed: u64) -> GenSpec {
    GenSpec {
        n_scenarios,
        n_agents: 2,
        lanes: 2,
        horizon: 30,
        road: RoadShape::SCurve {
            radius: 40.0,
            period: 100.0,
        },
        seed,
        ..GenSpec::default()
    }
}

pub fn bench_data(n_scenarios: usize, seed: u64) -> Vec<Scenario> {
    generate(&bench_spec(n_scenarios, seed))
        .expect("bench spec is feasible")
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

pub fn bench_policy() -> PolicyConfig {
    PolicyConfig {
        hidden: 32,
        k_road: 8,
        k_agent: 2,
        ..PolicyConfig::default()
    }
}

pub fn bench_train(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        lr: 5e-3,
        lr_decay: 0.5,
        lr_decay_every: 20,
        batch_size: 4,
        epochs: 60,
        hidden_reset: HiddenReset::Detach,
        seed,
        ..TrainConfig::default()
    }
}

pub fn train_on(data: &[Scenario], cfg: &TrainConfig, policy: PolicyConfig) -> PolicyParams {
    let params = PolicyParams::init(policy, data[0].dynamics, cfg.seed).expect("policy init");
    train(data, cfg, params).expect("training").params
}

pub fn eval_at(params: &PolicyParams, data: &[Scenario], modes: usize, noise_sigma: f64, seed: u64) -> EvalReport {
    evaluate(params, data, &EvalConfig { modes, noise_sigma, seed }).expect("evaluation")
}

/// Smallest σ on the grid (linearly interpolated) at which `ades` reaches
/// twice its σ = 0 value; infinity when it never does.
pub fn doubling_sigma(sigmas: &[f64], ades: &[f64]) -> f64 {
    let target = 2.0 * ades[0];
    for i in 1..sigmas.len() {
        if ades[i] >= target {
            let (s0, s1, a0, a1) = (sigmas[i - 1], sigmas[i], ades[i - 1], ades[i]);
            return s0 + (s1 - s0) * (target - a0) / (a1 - a0);
        }
    }
    f64::INFINITY
}

pub fn frozen_noise(n: usize, a: usize, steps: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps).map(|_| apg_core::policy::draw_noise(&mut rng, n, a)).collect()
}

/// Largest absolute difference between the full Time(1) rollout gradient
/// and the mean of per-transition gradients computed on separate tapes.
pub fn detachment_gap(s: &Scenario, params: &PolicyParams, seed: u64) -> f64 {
    let n = s.controlled_indices().len();
    let steps = s.horizon;
    let eps = frozen_noise(n, s.dynamics.action_dim(), steps, seed);
    let opts = RolloutOptions {
        reset: ResetPolicy::Time { period: 1 },
        hidden_reset: HiddenReset::Zero,
        ..RolloutOptions::default()
    };
    let (_, full) = rollout_apg(s, params, &opts, PolicyNoise::Frozen(&eps)).unwrap();

    let mut sum: Vec<Tensor> = full.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for (k, e) in eps.iter().enumerate() {
        let sub = transition_scenario(s, k);
        let one = RolloutOptions {
            reset: ResetPolicy::None,
            ..opts
        };
        let (_, g) = rollout_apg(&sub, params, &one, PolicyNoise::Frozen(std::slice::from_ref(e))).unwrap();
        for (acc, gi) in sum.iter_mut().zip(&g) {
            for (x, y) in acc.data_mut().iter_mut().zip(gi.data()) {
                *x += y;
            }
        }
    }
    let mut gap: f64 = 0.0;
    for (f, s) in full.iter().zip(&sum) {
        for (a, b) in f.data().iter().zip(s.data()) {
            gap = gap.max((a - b / steps as f64).abs());
        }
    }
    gap
}
