use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, grad_check4};
use crate::testutil::coasting_scenario;
use crate::types::{AgentState, Polyline, SimState};

fn small() -> PolicyConfig {
    PolicyConfig {
        hidden: 6,
        queries: 2,
        k_road: 3,
        k_agent: 2,
        r_obs: 50.0,
    }
}

fn car(x: f64, y: f64, yaw: f64) -> AgentState {
    AgentState::new(x, y, yaw, 2.0 * yaw.cos(), 2.0 * yaw.sin(), 4.0, 2.0)
}

fn one_point_scene(yaw: f64) -> (SimState, crate::types::Scenario) {
    let mut sc = coasting_scenario(&[car(0.0, 0.0, yaw)], 0, 1, DynamicsModel::Bicycle);
    sc.roadgraph = vec![Polyline {
        points: vec![[5.0, 0.0], [500.0, 0.0]],
        half_width: 2.0,
    }];
    (sc.init().clone(), sc)
}

#[test]
fn observation_is_in_the_ego_frame() {
    let cfg = PolicyConfig::default();
    let (s, sc) = one_point_scene(0.0);
    let o = build_observation(&s, &sc, 0, &cfg).unwrap();
    assert_eq!((o.road[0].x, o.road[0].y), (5.0, 0.0));
    assert!(o.road[0].valid && !o.road[1].valid);

    let (s, sc) = one_point_scene(FRAC_PI_2);
    let o = build_observation(&s, &sc, 0, &cfg).unwrap();
    assert!(o.road[0].x.abs() < 1e-12);
    assert!((o.road[0].y + 5.0).abs() < 1e-12);
    assert_eq!(o.features().len(), feature_width(&cfg));
}

#[test]
fn empty_neighbourhood_is_masked_not_an_error() {
    let cfg = PolicyConfig::default();
    let (mut s, sc) = one_point_scene(0.0);
    s.agents[0].x = 1000.0;
    let o = build_observation(&s, &sc, 0, &cfg).unwrap();
    assert!(o.road.iter().all(|p| !p.valid));
    assert!(o.agents.iter().all(|a| !a.valid));
    let f = o.features();
    assert!(f[..f.len() - 1].iter().all(|&v| v == 0.0));
}

#[test]
fn nearest_agents_match_a_brute_force_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = PolicyConfig {
        k_agent: 4,
        ..PolicyConfig::default()
    };
    for _ in 0..200 {
        let mut agents = vec![car(0.0, 0.0, rng.gen_range(-3.0..3.0))];
        for _ in 0..6 {
            // a coarse grid makes distance ties common
            let x = rng.gen_range(-4..=4) as f64 * 5.0;
            let y = rng.gen_range(-4..=4) as f64 * 5.0;
            agents.push(car(x, y, 0.3));
        }
        let sc = coasting_scenario(&agents, 0, 1, DynamicsModel::Bicycle);
        let s = sc.init();
        let o = build_observation(s, &sc, 0, &cfg).unwrap();
        let mut brute: Vec<(f64, usize)> = (1..agents.len()).map(|j| (agents[j].x.powi(2) + agents[j].y.powi(2), j)).collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let chosen: Vec<usize> = o.agents.iter().map(|n| n.index).collect();
        let want: Vec<usize> = brute.iter().take(4).map(|b| b.1).collect();
        assert_eq!(chosen, want);
    }
}

#[test]
fn observation_rejects_uncontrolled_agents() {
    let (mut s, sc) = one_point_scene(0.0);
    s.controlled[0] = false;
    assert!(build_observation(&s, &sc, 0, &PolicyConfig::default()).is_err());
}

#[test]
fn parameter_layout_and_init() {
    let cfg = PolicyConfig::default();
    let p = PolicyParams::init(cfg, DynamicsModel::Bicycle, 0).unwrap();
    assert_eq!(p.tensors().len(), PARAM_NAMES.len());
    assert_eq!(p.get("enc.w1").unwrap().shape(), (feature_width(&cfg), 64));
    assert_eq!(p.get("mix.cross.queries").unwrap().shape(), (4, 64));
    assert_eq!(p.get("head.w_mu").unwrap().shape(), (64, 2));
    assert!(p.get("head.log_std").unwrap().data().iter().all(|&v| v == LOG_STD_INIT));
    assert!(p.get("gru.bz").unwrap().data().iter().all(|&v| v == 0.0));
    let bound = 1.0 / (feature_width(&cfg) as f64).sqrt();
    assert!(p.get("enc.w1").unwrap().max_abs() <= bound);
    assert_eq!(p, PolicyParams::init(cfg, DynamicsModel::Bicycle, 0).unwrap());
    assert_ne!(p, PolicyParams::init(cfg, DynamicsModel::Bicycle, 1).unwrap());
    let d = PolicyParams::init(cfg, DynamicsModel::Delta, 0).unwrap();
    assert_eq!(d.get("head.w_mu").unwrap().shape(), (64, 3));
}

#[test]
fn zero_weights_give_zero_encoding() {
    let cfg = PolicyConfig::default();
    let p = PolicyParams::zeros(cfg, DynamicsModel::Bicycle);
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let x = t.constant(Tensor::zeros(3, feature_width(&cfg)));
    let e = encode(&mut t, &pv, x).unwrap();
    assert_eq!(t.shape(e), (3, 64));
    assert!(t.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_weight_gru_halves_the_state() {
    let p = PolicyParams::zeros(small(), DynamicsModel::Bicycle);
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let h0 = Tensor::row(vec![0.8, -0.4, 0.2, 0.0, 1.0, -1.0]);
    let h = t.constant(h0.clone());
    let x = t.constant(Tensor::full(1, 6, 0.7));
    let h1 = gru_step(&mut t, &pv, h, x).unwrap();
    for (a, b) in t.value(h1).data().iter().zip(h0.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gru_state_stays_bounded() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 8).unwrap();
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let mut h = t.constant(Tensor::full(2, 6, 0.9));
    let x = t.constant(Tensor::zeros(2, 6));
    for _ in 0..200 {
        h = gru_step(&mut t, &pv, h, x).unwrap();
        assert!(t.value(h).data().iter().all(|v| v.abs() < 1.0));
    }
}

fn mix_values(p: &PolicyParams, x: &Tensor, valid: &[bool]) -> Tensor {
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let xv = t.constant(x.clone());
    let y = mix_agents(&mut t, &pv, xv, valid).unwrap();
    t.value(y).clone()
}

#[test]
fn single_agent_self_attention_is_identity_weighted() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 2).unwrap();
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let x = t.constant(Tensor::row(vec![0.1, -0.2, 0.3, 0.5, -0.7, 0.9]));
    let q = t.matmul(x, pv.p(P::SelfWq)).unwrap();
    let k = t.matmul(x, pv.p(P::SelfWk)).unwrap();
    let kt = t.transpose(k).unwrap();
    let s = t.matmul(q, kt).unwrap();
    let w = t.softmax(s).unwrap();
    assert_eq!(t.value(w).data(), &[1.0]);
    assert!(mix_values(&p, t.value(x), &[true]).is_finite());
}

#[test]
fn mixer_is_permutation_equivariant_and_ignores_masked_agents() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let base = mix_values(&p, &Tensor::from_rows(&rows), &[true; 4]);

    let perm = [2, 0, 3, 1];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let out = mix_values(&p, &Tensor::from_rows(&permuted), &[true; 4]);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out.row_slice(k).iter().zip(base.row_slice(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let mut extra = rows.clone();
    extra.insert(1, vec![5.0; 6]);
    let out = mix_values(&p, &Tensor::from_rows(&extra), &[true, false, true, true, true]);
    for (k, i) in [(0, 0), (2, 1), (3, 2), (4, 3)] {
        for (a, b) in out.row_slice(k).iter().zip(base.row_slice(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mixer_rejects_an_all_masked_scene() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 5).unwrap();
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let x = t.constant(Tensor::zeros(2, 6));
    assert!(matches!(mix_agents(&mut t, &pv, x, &[false, false]), Err(Error::AllMasked)));
}

#[test]
fn agent_count_does_not_change_parameters() {
    let cfg = PolicyConfig::default();
    let p = PolicyParams::init(cfg, DynamicsModel::Bicycle, 1).unwrap();
    let count = p.num_params();
    for n in [8, 32] {
        let mut t = Tape::new();
        let pv = p.register(&mut t, false);
        let f = t.constant(Tensor::full(n, feature_width(&cfg), 0.1));
        let x = encode(&mut t, &pv, f).unwrap();
        let m = mix_agents(&mut t, &pv, x, &vec![true; n]).unwrap();
        let h0 = zero_hidden(&mut t, &cfg, n);
        let h = gru_step(&mut t, &pv, h0, m).unwrap();
        let out = act(&mut t, &pv, h, ActMode::Deterministic).unwrap();
        assert_eq!(t.shape(out.action), (n, 2));
        assert_eq!(out.log_prob.len(), n);
    }
    assert_eq!(p.num_params(), count);
}

fn sample_actions(p: &PolicyParams, seed: u64) -> Tensor {
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let h = t.constant(Tensor::full(3, 6, 0.3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = act(&mut t, &pv, h, ActMode::Sample(&mut rng)).unwrap();
    t.value(out.action).clone()
}

#[test]
fn sampling_is_seeded_and_bounded() {
    let p = PolicyParams::init(small(), DynamicsModel::Delta, 1).unwrap();
    assert_eq!(sample_actions(&p, 9), sample_actions(&p, 9));
    assert_ne!(sample_actions(&p, 9), sample_actions(&p, 10));
    let a = sample_actions(&p, 9);
    for i in 0..3 {
        for (j, &b) in action_bounds(DynamicsModel::Delta).iter().enumerate() {
            assert!(a.get(i, j).abs() <= b);
        }
    }
}

#[test]
fn small_sigma_sample_approaches_deterministic() {
    let mut p = PolicyParams::init(small(), DynamicsModel::Bicycle, 1).unwrap();
    let mut gap = |log_std: f64| {
        p.get_mut("head.log_std").unwrap().data_mut().fill(log_std);
        let mut t = Tape::new();
        let pv = p.register(&mut t, false);
        let h = t.constant(Tensor::full(1, 6, 0.3));
        let eps = Tensor::row(vec![1.0, -1.0]);
        let s = act(&mut t, &pv, h, ActMode::Noise(&eps)).unwrap();
        let d = act(&mut t, &pv, h, ActMode::Deterministic).unwrap();
        let (sv, dv) = (t.value(s.action).clone(), t.value(d.action).clone());
        sv.data().iter().zip(dv.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (g1, g2, g3) = (gap(0.0), gap(-3.0), gap(-5.0));
    assert!(g1 > g2 && g2 > g3);
    assert!(g3 <= MAX_ACCEL_BOUND * (-5.0f64).exp());
}

const MAX_ACCEL_BOUND: f64 = crate::dynamics::MAX_ACCEL;

#[test]
fn monte_carlo_mean_matches_mu() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 12).unwrap();
    let n = 100_000;
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let h = t.constant(Tensor::from_rows(&vec![vec![0.2, -0.1, 0.4, 0.0, 0.3, -0.5]; n]));
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let out = act(&mut t, &pv, h, ActMode::Sample(&mut rng)).unwrap();
    let raw = t.value(out.raw);
    let mu = t.value(out.mean);
    let sigma = t.value(out.std);
    for j in 0..2 {
        let mean = (0..n).map(|i| raw.get(i, j)).sum::<f64>() / n as f64;
        let tol = 3.0 * sigma.get(0, j) / (n as f64).sqrt();
        assert!((mean - mu.get(0, j)).abs() < tol, "component {j}: {mean} vs {}", mu.get(0, j));
    }
}

#[test]
fn log_prob_matches_change_of_variables() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 3).unwrap();
    let mut t = Tape::new();
    let pv = p.register(&mut t, false);
    let h = t.constant(Tensor::full(1, 6, 0.2));
    let eps = Tensor::row(vec![0.5, -1.5]);
    let out = act(&mut t, &pv, h, ActMode::Noise(&eps)).unwrap();
    let sigma = t.value(out.std).clone();
    let raw = t.value(out.raw).clone();
    let mut want = 0.0;
    for (j, &b) in action_bounds(DynamicsModel::Bicycle).iter().enumerate() {
        let s = sigma.get(0, j);
        let e = eps.get(0, j);
        want += -0.5 * e * e - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        want -= (b * (1.0 - raw.get(0, j).tanh().powi(2))).ln();
    }
    assert!((out.log_prob[0] - want).abs() < 1e-12);
}

#[test]
fn delta_frame_adapter_round_trips() {
    let a = [0.4, -0.3, 0.1];
    for yaw in [-3.0, -0.5, 0.0, 1.2, 3.1] {
        let w = action_to_world(DynamicsModel::Delta, yaw, &a);
        let back = action_to_ego(DynamicsModel::Delta, yaw, &w);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() < 1e-15);
        }
    }
    let w = action_to_world(DynamicsModel::Delta, FRAC_PI_2, &[1.0, 0.0, 0.0]);
    assert!(w[0].abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
    assert_eq!(action_to_world(DynamicsModel::Bicycle, 1.0, &[1.0, 0.1]), vec![1.0, 0.1]);
}

/// Grad-checks `net` with respect to the parameter slot `slot`.
fn check_param(p: &PolicyParams, slot: P, h: f64, net: impl Fn(&mut Tape, &PolicyVars) -> Result<Var>) -> f64 {
    let f = |t: &mut Tape, x: Var| {
        let mut vars = p.register(t, false);
        vars.vars[slot as usize] = x;
        let y = net(t, &vars)?;
        let (r, c) = t.shape(y);
        let w = t.constant(Tensor::new(r, c, (0..r * c).map(|k| 0.3 + (k % 7) as f64 * 0.1).collect()));
        let y = t.mul(y, w)?;
        t.sum(y)
    };
    let x0 = &p.tensors()[slot as usize];
    if h > 1e-6 { grad_check4(f, x0, h) } else { grad_check(f, x0, h) }.unwrap()
}

#[test]
fn gru_matches_finite_differences() {
    let p = PolicyParams::init(small(), DynamicsModel::Bicycle, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h0 = Tensor::new(2, 6, (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect());
    let x0 = Tensor::new(2, 6, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let net = |t: &mut Tape, pv: &PolicyVars| {
        let h = t.constant(h0.clone());
        let x = t.constant(x0.clone());
        gru_step(t, pv, h, x)
    };
    for slot in [
        P::GruWzX,
        P::GruWzH,
        P::GruBz,
        P::GruWrX,
        P::GruWrH,
        P::GruBr,
        P::GruWhX,
        P::GruWhH,
        P::GruBh,
    ] {
        let err = check_param(&p, slot, 1e-6, net);
        assert!(err < 1e-5, "{slot:?}: {err}");
    }
    let pv_err = grad_check(
        |t, h| {
            let pv = p.register(t, false);
            let x = t.constant(x0.clone());
            let y = gru_step(t, &pv, h, x)?;
            t.sum(y)
        },
        &h0,
        1e-6,
    )
    .unwrap();
    assert!(pv_err < 1e-5, "h: {pv_err}");
}

#[test]
fn encoder_mixer_and_head_match_finite_differences() {
    let cfg = small();
    let p = PolicyParams::init(cfg, DynamicsModel::Delta, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let f = feature_width(&cfg);
    let feats = Tensor::new(3, f, (0..3 * f).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let eps = Tensor::new(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let valid = [true, false, true];
    let net = |t: &mut Tape, pv: &PolicyVars| {
        let x = t.constant(feats.clone());
        let e = encode(t, pv, x)?;
        let m = mix_agents(t, pv, e, &valid)?;
        let h = t.constant(Tensor::full(3, cfg.hidden, 0.1));
        let h = gru_step(t, pv, h, m)?;
        Ok(act(t, pv, h, ActMode::Noise(&eps))?.action)
    };
    for slot in [
        P::EncW1,
        P::EncB1,
        P::EncW2,
        P::EncB2,
        P::SelfWq,
        P::SelfWk,
        P::SelfWv,
        P::CrossQueries,
        P::CrossWk,
        P::CrossWv,
        P::OutWAgent,
        P::OutWScene,
        P::OutB,
        P::HeadWMu,
        P::HeadBMu,
        P::HeadLogStd,
    ] {
        // second-order paths give entries near 1e-5; the wider fourth-order
        // stencil keeps roundoff below the tolerance
        let err = check_param(&p, slot, 1e-4, net);
        assert!(err < 1e-5, "{slot:?}: {err}");
    }
}

#[test]
fn log_std_is_clamped() {
    let mut p = PolicyParams::init(small(), DynamicsModel::Bicycle, 0).unwrap();
    p.get_mut("head.log_std").unwrap().data_mut().copy_from_slice(&[-9.0, 4.0]);
    p.clamp_log_std();
    assert_eq!(p.get("head.log_std").unwrap().data(), &[LOG_STD_MIN, LOG_STD_MAX]);
}
