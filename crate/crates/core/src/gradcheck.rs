//! Gradient-check suite: every tape primitive, both dynamics Jacobians and
//! end-to-end rollouts against central finite differences.
//!
//! A kernel can be named as a fault: one entry of its analytic derivative
//! is then perturbed before comparison, which must make that kernel fail.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{central_difference, relative_error, Tape, Tensor, Var};
use crate::dynamics::{action_bounds, jacobian_bicycle, jacobian_delta, step_bicycle, step_delta, DynJacobian};
use crate::error::{Error, Result};
use crate::policy::{draw_noise, PolicyConfig, PolicyParams};
use crate::scenario_io::{generate, GenSpec, RoadShape};
use crate::trainer::{bc_loss, detached_loss, mix_seed, rollout_apg, rollout_bc_train, PolicyNoise, RolloutOptions};
use crate::types::{yaw_diff, Action, AgentState, DynamicsModel, Scenario, STATE_DIM};

/// Relative-error threshold for primitives and Jacobians.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Jacobian entries below this magnitude are compared by absolute error.
pub const JACOBIAN_SMALL: f64 = 1e-3;
pub const JACOBIAN_ABS_TOL: f64 = 1e-7;
/// Relative-error threshold for end-to-end rollout gradients.
pub const ROLLOUT_TOL: f64 = 1e-4;
/// Rollout gradient entries agreeing to this absolute error pass.
pub const ROLLOUT_ABS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Kernel whose analytic derivative is deliberately corrupted.
    pub fault: Option<String>,
    /// Random inputs per primitive.
    pub primitive_points: usize,
    /// Random (state, action, dt) samples per dynamics model.
    pub dynamics_samples: usize,
    /// Sampled parameter coordinates for the full-size policy check.
    pub full_size_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: None,
            primitive_points: 100,
            dynamics_samples: 1000,
            full_size_coords: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheck {
    pub kernel: String,
    pub max_error: f64,
    pub threshold: f64,
    /// Derivative entries compared.
    pub entries: usize,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub checks: Vec<KernelCheck>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(KernelCheck::passed)
    }

    pub fn failures(&self) -> Vec<&KernelCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// One line per kernel.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<24} max_err {:.3e} (threshold {:.0e}, {} entries)\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.kernel,
                c.max_error,
                c.threshold,
                c.entries
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Kernel {
    Primitive(usize),
    Jacobian(DynamicsModel),
    Apg(DynamicsModel),
    ApgFullSize,
    Bc,
}

fn kernels() -> Vec<(String, Kernel)> {
    let mut out: Vec<(String, Kernel)> = primitives()
        .iter()
        .enumerate()
        .map(|(k, (name, _, _))| (format!("tape.{name}"), Kernel::Primitive(k)))
        .collect();
    out.push(("jacobian_bicycle".into(), Kernel::Jacobian(DynamicsModel::Bicycle)));
    out.push(("jacobian_delta".into(), Kernel::Jacobian(DynamicsModel::Delta)));
    out.push(("rollout_apg.bicycle".into(), Kernel::Apg(DynamicsModel::Bicycle)));
    out.push(("rollout_apg.delta".into(), Kernel::Apg(DynamicsModel::Delta)));
    out.push(("rollout_apg.full_size".into(), Kernel::ApgFullSize));
    out.push(("rollout_bc".into(), Kernel::Bc));
    out
}

/// Names accepted as faults.
pub fn kernel_names() -> Vec<String> {
    kernels().into_iter().map(|(n, _)| n).collect()
}

/// Runs every check.
pub fn run_suite(opts: &SuiteOptions) -> Result<Report> {
    let all = kernels();
    if let Some(f) = &opts.fault {
        if !all.iter().any(|(n, _)| n == f) {
            return Err(Error::Config(format!("unknown kernel `{f}`; known: {}", kernel_names().join(", "))));
        }
    }
    let checks = all
        .par_iter()
        .enumerate()
        .map(|(i, (name, kernel))| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, i as u64, 1));
            let fault = opts.fault.as_deref() == Some(name.as_str());
            let (max_error, threshold, entries) = match *kernel {
                Kernel::Primitive(k) => primitive_check(k, &mut rng, opts.primitive_points, fault)?,
                Kernel::Jacobian(m) => jacobian_check(m, &mut rng, opts.dynamics_samples, fault)?,
                Kernel::Apg(m) => apg_check(m, small_policy(), None, opts.seed, &mut rng, fault)?,
                Kernel::ApgFullSize => apg_check(
                    DynamicsModel::Bicycle,
                    PolicyConfig::default(),
                    Some(opts.full_size_coords),
                    opts.seed,
                    &mut rng,
                    fault,
                )?,
                Kernel::Bc => bc_check(opts.seed, fault)?,
            };
            Ok(KernelCheck {
                kernel: name.clone(),
                max_error,
                threshold,
                entries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { seed: opts.seed, checks })
}

/// Perturbation applied to an analytic entry under fault injection.
fn corrupt(v: &mut f64) {
    *v += 1e-3 * v.abs().max(1.0);
}

fn primitive_check(k: usize, rng: &mut ChaCha8Rng, points: usize, fault: bool) -> Result<(f64, f64, usize)> {
    let (_, (r, c), f) = primitives()[k];
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for p in 0..points {
        let mut data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        // keep away from the kinks of abs and clamp
        for v in &mut data {
            if v.abs() < 0.05 || (v.abs() - 0.5).abs() < 0.05 {
                *v += 0.11;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(r, c, data.clone()));
        let y = f(&mut tape, x)?;
        let mut analytic = tape.backward(y)?.get_or_zeros(x, (r, c));
        if fault && p == 0 {
            corrupt(&mut analytic.data_mut()[0]);
        }
        let eval = |v: &[f64]| -> Result<f64> {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::new(r, c, v.to_vec()));
            let y = f(&mut t, x)?;
            Ok(t.value(y).item())
        };
        for (j, a) in analytic.data().iter().enumerate() {
            let n = central_difference(eval, &data, j, 1e-6, 2)?;
            worst = worst.max(relative_error(*a, n));
            entries += 1;
        }
    }
    Ok((worst, PRIMITIVE_TOL, entries))
}

fn step(model: DynamicsModel, s: &AgentState, a: &[f64], dt: f64) -> Result<AgentState> {
    let act = Action::from_slice(model, a)?;
    match model {
        DynamicsModel::Bicycle => step_bicycle(s, &act, dt),
        DynamicsModel::Delta => step_delta(s, &act, dt),
    }
}

/// Central difference of the next state; yaw differences are wrapped.
fn state_difference(plus: &AgentState, minus: &AgentState, h: f64) -> Result<[f64; STATE_DIM]> {
    let (p, m) = (plus.kinematics(), minus.kinematics());
    let mut out = [0.0; STATE_DIM];
    for r in 0..STATE_DIM {
        let d = if r == 2 { yaw_diff(p[r], m[r])? } else { p[r] - m[r] };
        out[r] = d / (2.0 * h);
    }
    Ok(out)
}

fn jacobian_score(a: f64, n: f64) -> f64 {
    if a.abs() < JACOBIAN_SMALL && (a - n).abs() < JACOBIAN_ABS_TOL {
        0.0
    } else {
        relative_error(a, n)
    }
}

fn jacobian_check(model: DynamicsModel, rng: &mut ChaCha8Rng, samples: usize, fault: bool) -> Result<(f64, f64, usize)> {
    let h = 1e-6;
    let bounds = action_bounds(model);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for i in 0..samples {
        let mut s = AgentState::new(
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-3.1..3.1),
            rng.gen_range(-15.0..15.0),
            rng.gen_range(-15.0..15.0),
            4.5,
            2.0,
        );
        if i % 10 == 0 {
            (s.vx, s.vy) = (0.0, 0.0);
        }
        let a: Vec<f64> = bounds.iter().map(|b| rng.gen_range(-0.9 * b..0.9 * b)).collect();
        let dt = rng.gen_range(0.02..0.2);
        let act = Action::from_slice(model, &a)?;
        let mut jac: DynJacobian = match model {
            DynamicsModel::Bicycle => jacobian_bicycle(&s, &act, dt)?,
            DynamicsModel::Delta => jacobian_delta(&s, &act, dt)?,
        };
        if fault && i == 0 {
            corrupt(&mut jac.d_state_d_action[0][0]);
        }
        for c in 0..STATE_DIM {
            let shifted = |d: f64| {
                let mut k = s.kinematics();
                k[c] += d;
                s.with_kinematics(k)
            };
            let col = state_difference(&step(model, &shifted(h), &a, dt)?, &step(model, &shifted(-h), &a, dt)?, h)?;
            for r in 0..STATE_DIM {
                worst = worst.max(jacobian_score(jac.d_state_d_state[r][c], col[r]));
                entries += 1;
            }
        }
        for c in 0..model.action_dim() {
            let shifted = |d: f64| {
                let mut v = a.clone();
                v[c] += d;
                v
            };
            let col = state_difference(&step(model, &s, &shifted(h), dt)?, &step(model, &s, &shifted(-h), dt)?, h)?;
            for r in 0..STATE_DIM {
                worst = worst.max(jacobian_score(jac.d_state_d_action[r][c], col[r]));
                entries += 1;
            }
        }
    }
    Ok((worst, PRIMITIVE_TOL, entries))
}

/// Policy size used for full-parameter rollout checks.
pub fn small_policy() -> PolicyConfig {
    PolicyConfig {
        hidden: 8,
        queries: 2,
        k_road: 4,
        k_agent: 2,
        r_obs: 50.0,
    }
}

/// One-agent scenario with 2 history and 3 horizon steps on an S-curve.
pub fn check_scenario(model: DynamicsModel, seed: u64) -> Result<Scenario> {
    let spec = GenSpec {
        n_scenarios: 1,
        n_agents: 1,
        lanes: 1,
        history_len: 2,
        horizon: 3,
        road: RoadShape::SCurve {
            radius: 30.0,
            period: 60.0,
        },
        accel_amplitude: 2.0,
        dynamics: model,
        seed,
        ..GenSpec::default()
    };
    Ok(generate(&spec)?.remove(0).0)
}

/// `|a - n| / max(|a|, |n|, ROLLOUT_ABS_TOL / ROLLOUT_TOL)`: passes iff the
/// relative error is within `ROLLOUT_TOL` or the absolute error within
/// `ROLLOUT_ABS_TOL`.
fn rollout_score(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ROLLOUT_ABS_TOL / ROLLOUT_TOL)
}

fn apg_check(
    model: DynamicsModel,
    cfg: PolicyConfig,
    coords: Option<usize>,
    seed: u64,
    rng: &mut ChaCha8Rng,
    fault: bool,
) -> Result<(f64, f64, usize)> {
    let scenario = check_scenario(model, seed)?;
    let params = PolicyParams::init(cfg, model, seed)?;
    let eps: Vec<Tensor> = (0..scenario.horizon)
        .map(|_| draw_noise(&mut *rng, 1, model.action_dim()))
        .collect();
    let opts = RolloutOptions::default();
    let (rec, grads) = rollout_apg(&scenario, &params, &opts, PolicyNoise::Frozen(&eps))?;
    let mut analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let x0 = params.flatten();
    let idx: Vec<usize> = match coords {
        Some(k) if k < x0.len() => {
            let mut v = sample(rng, x0.len(), k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..x0.len()).collect(),
    };
    if fault {
        corrupt(&mut analytic[idx[0]]);
    }
    let mut q = params.clone();
    let mut worst: f64 = 0.0;
    for &k in &idx {
        let n = central_difference(
            |x| {
                q.unflatten(x);
                detached_loss(&scenario, &q, &opts, PolicyNoise::Frozen(&eps), &rec)
            },
            &x0,
            k,
            1e-4,
            4,
        )?;
        worst = worst.max(rollout_score(analytic[k], n));
    }
    Ok((worst, ROLLOUT_TOL, idx.len()))
}

fn bc_check(seed: u64, fault: bool) -> Result<(f64, f64, usize)> {
    let scenario = check_scenario(DynamicsModel::Bicycle, seed)?;
    let params = PolicyParams::init(small_policy(), DynamicsModel::Bicycle, seed)?;
    let steps = scenario.horizon;
    let (_, grads) = rollout_bc_train(&scenario, &params, steps)?;
    let mut analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    if fault {
        corrupt(&mut analytic[0]);
    }
    let x0 = params.flatten();
    let mut q = params.clone();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let n = central_difference(
            |x| {
                q.unflatten(x);
                Ok(bc_loss(&scenario, &q, steps)?.loss)
            },
            &x0,
            k,
            1e-4,
            4,
        )?;
        worst = worst.max(rollout_score(*a, n));
    }
    Ok((worst, ROLLOUT_TOL, analytic.len()))
}

type Primitive = fn(&mut Tape, Var) -> Result<Var>;

/// Every tape primitive, reduced to a scalar through a fixed random
/// projection so each output entry carries a distinct weight.
fn primitives() -> Vec<(&'static str, (usize, usize), Primitive)> {
    fn project(t: &mut Tape, y: Var) -> Result<Var> {
        let (r, c) = t.shape(y);
        let w = Tensor::new(r, c, (0..r * c).map(|k| 0.5 + ((k * 7919) % 13) as f64 / 13.0).collect());
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    }
    fn other(t: &mut Tape, x: Var, seed: f64) -> Var {
        let (r, c) = t.shape(x);
        t.constant(Tensor::new(r, c, (0..r * c).map(|k| (k as f64 * seed).sin()).collect()))
    }
    vec![
        ("add", (3, 4), |t, x| {
            let b = t.slice_rows(x, 0, 1)?;
            let y = t.add(x, b)?;
            project(t, y)
        }),
        ("sub", (3, 4), |t, x| {
            let o = other(t, x, 1.3);
            let y = t.sub(o, x)?;
            project(t, y)
        }),
        ("mul", (3, 4), |t, x| {
            let c = t.slice(x, 1, 1)?;
            let y = t.mul(x, c)?;
            project(t, y)
        }),
        ("div", (3, 4), |t, x| {
            let o = other(t, x, 0.7);
            let d = t.add_scalar(o, 3.0)?;
            let y = t.div(x, d)?;
            project(t, y)
        }),
        ("matmul", (3, 4), |t, x| {
            let xt = t.transpose(x)?;
            let y = t.matmul(x, xt)?;
            project(t, y)
        }),
        ("tanh", (3, 4), |t, x| {
            let y = t.tanh(x)?;
            project(t, y)
        }),
        ("sigmoid", (3, 4), |t, x| {
            let y = t.sigmoid(x)?;
            project(t, y)
        }),
        ("exp", (3, 4), |t, x| {
            let y = t.exp(x)?;
            project(t, y)
        }),
        ("log", (3, 4), |t, x| {
            let sq = t.mul(x, x)?;
            let p = t.add_scalar(sq, 0.5)?;
            let y = t.log(p)?;
            project(t, y)
        }),
        ("softmax", (3, 4), |t, x| {
            let y = t.softmax(x)?;
            project(t, y)
        }),
        ("concat", (3, 4), |t, x| {
            let o = other(t, x, 0.3);
            let s = t.sin(x)?;
            let y = t.concat(&[x, o, s])?;
            project(t, y)
        }),
        ("slice", (3, 4), |t, x| {
            let y = t.slice(x, 1, 2)?;
            let z = t.mul(y, y)?;
            project(t, z)
        }),
        ("sum", (3, 4), |t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }),
        ("mean", (3, 4), |t, x| {
            let y = t.sin(x)?;
            t.mean(y)
        }),
        ("mean_rows", (3, 4), |t, x| {
            let y = t.mean_rows(x)?;
            let z = t.tanh(y)?;
            project(t, z)
        }),
        ("sum_cols", (3, 4), |t, x| {
            let y = t.sum_cols(x)?;
            let z = t.tanh(y)?;
            project(t, z)
        }),
        ("l2_norm", (3, 4), |t, x| {
            let y = t.l2_norm(x)?;
            project(t, y)
        }),
        ("atan2", (3, 4), |t, x| {
            let o = other(t, x, 2.1);
            let o = t.add_scalar(o, 1.2)?;
            let y = t.atan2(x, o)?;
            let z = t.atan2(o, x)?;
            let z = t.scale(z, 0.5)?;
            let s = t.add(y, z)?;
            project(t, s)
        }),
        ("sqrt_eps", (3, 4), |t, x| {
            let sq = t.mul(x, x)?;
            let y = t.sqrt_eps(sq)?;
            project(t, y)
        }),
        ("sin_cos", (3, 4), |t, x| {
            let s = t.sin(x)?;
            let c = t.cos(x)?;
            let y = t.mul(s, c)?;
            project(t, y)
        }),
        ("abs", (3, 4), |t, x| {
            let y = t.abs(x)?;
            project(t, y)
        }),
        ("clamp", (3, 4), |t, x| {
            let y = t.clamp(x, -0.5, 0.5)?;
            project(t, y)
        }),
    ]
}
