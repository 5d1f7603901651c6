//! Closed-loop APG rollouts, teacher-forced BC passes and plain
//! simulation for evaluation.
//!
//! Every step builds observations from plain state values, so the policy
//! input never carries gradient ancestry. The dynamics step is a custom
//! tape primitive whose only differentiable input is the action; the
//! state it starts from is a constant. Gradients therefore reach earlier
//! steps only through the GRU hidden state.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::config::{HiddenReset, ResetPolicy, TrainConfig};
use super::loss::{state_loss_tape, LossWeights};
use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::dynamics::{inverse, step_with_jacobian, DynJacobian};
use crate::error::{Error, Result};
use crate::policy::{
    act, action_to_ego, action_to_world, build_observation, encode, feature_width, gru_step, mix_agents, zero_hidden, ActMode, Observation,
    PolicyParams, PolicyVars,
};
use crate::types::{AgentState, DynamicsModel, Scenario, SimState, Trajectory, STATE_DIM};

/// Per-rollout settings derived from a [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub weights: LossWeights,
    pub reset: ResetPolicy,
    pub hidden_reset: HiddenReset,
    /// Horizon steps to simulate; `None` means the full horizon.
    pub steps: Option<usize>,
    pub final_state_only: bool,
    /// Std-dev of Gaussian noise added to controlled agents' positions.
    pub noise_sigma: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            reset: ResetPolicy::None,
            hidden_reset: HiddenReset::Zero,
            steps: None,
            final_state_only: false,
            noise_sigma: 0.0,
        }
    }
}

impl RolloutOptions {
    /// Training options for `scenario` under `reset` (the curriculum's
    /// current policy).
    pub fn for_training(cfg: &TrainConfig, reset: ResetPolicy, scenario: &Scenario) -> Self {
        Self {
            weights: cfg.weights,
            reset,
            hidden_reset: cfg.hidden_reset,
            steps: Some(training_steps(cfg, scenario)),
            final_state_only: cfg.final_state_only,
            noise_sigma: 0.0,
        }
    }

    /// Full-horizon evaluation options.
    pub fn eval(noise_sigma: f64) -> Self {
        Self {
            noise_sigma,
            ..Self::default()
        }
    }

    fn steps_for(&self, scenario: &Scenario) -> usize {
        self.steps.unwrap_or(scenario.horizon).min(scenario.horizon)
    }
}

/// Horizon steps a training rollout covers.
pub fn training_steps(cfg: &TrainConfig, scenario: &Scenario) -> usize {
    if cfg.half_sequence {
        scenario.horizon / 2
    } else {
        scenario.horizon
    }
}

/// Source of the policy's exploration noise.
pub enum PolicyNoise<'a> {
    Sample(&'a mut dyn RngCore),
    /// One `N×A` standard-normal tensor per simulated step.
    Frozen(&'a [Tensor]),
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetCause {
    Distance,
    Time,
}

/// Controlled agents snapped to the log at timestep `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResetEvent {
    pub t: usize,
    pub agents: Vec<usize>,
    pub cause: ResetCause,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Log states up to `history_len`, then the simulated states (before
    /// any reset snap of the following step).
    pub trajectory: Trajectory,
    /// Indices of the policy-controlled agents; the row order of
    /// `actions`, `log_probs` and `deviations`.
    pub controlled: Vec<usize>,
    pub step_losses: Vec<f64>,
    /// Training objective: mean of `step_losses` (or the last one when
    /// supervising the final state only).
    pub loss: f64,
    pub resets: Vec<ResetEvent>,
    /// Per step and controlled agent, the position error against the log
    /// before any reset was applied.
    pub deviations: Vec<Vec<Option<f64>>>,
    /// World-frame actions per step and controlled agent.
    pub actions: Vec<Vec<Vec<f64>>>,
    pub log_probs: Vec<Vec<f64>>,
    /// Steps where no agent could be supervised.
    pub unsupervised_steps: usize,
    /// State each step starts from, after any reset snap.
    pub inputs: Vec<SimState>,
}

impl RolloutRecord {
    pub fn reset_count(&self) -> usize {
        self.resets.iter().map(|e| e.agents.len()).sum()
    }
}

/// Dynamics step as a tape primitive: input `N×A` policy actions, output
/// `N×5` next kinematic states; the VJP applies the closed-form Jacobians.
struct DynamicsOp {
    model: DynamicsModel,
    /// Per row: the step Jacobian and the yaw used for the action frame.
    rows: Vec<Option<(DynJacobian, f64)>>,
}

impl CustomOp for DynamicsOp {
    fn name(&self) -> &'static str {
        "dynamics"
    }

    fn vjp(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let a_dim = self.model.action_dim();
        let mut g = Tensor::zeros(inputs[0].rows(), a_dim);
        for (r, row) in self.rows.iter().enumerate() {
            if let Some((jac, yaw)) = row {
                let (_, ga) = jac.vjp(grad_out.row_slice(r));
                let ga = action_to_ego(self.model, *yaw, &ga[..a_dim]);
                for (c, v) in ga.into_iter().enumerate() {
                    g.set(r, c, v);
                }
            }
        }
        vec![g]
    }
}

struct Ctx<'s> {
    scenario: &'s Scenario,
    ctrl: Vec<usize>,
    feat_width: usize,
}

impl<'s> Ctx<'s> {
    fn new(scenario: &'s Scenario, params: &PolicyParams) -> Result<Self> {
        if scenario.dynamics != params.model {
            return Err(Error::ActionKind {
                expected: scenario.dynamics,
                found: params.model,
            });
        }
        let ctrl = scenario.controlled_indices();
        if ctrl.is_empty() {
            return Err(Error::domain(
                "rollout",
                format!("scenario {} has no controlled agents", scenario.id),
            ));
        }
        Ok(Self {
            scenario,
            ctrl,
            feat_width: feature_width(&params.config),
        })
    }

    /// Features and validity of every controlled agent in `s`.
    fn observe(&self, s: &SimState, pv: &PolicyVars) -> Result<(Tensor, Vec<bool>)> {
        let mut obs: Vec<Observation> = Vec::with_capacity(self.ctrl.len());
        let mut valid = Vec::with_capacity(self.ctrl.len());
        for &i in &self.ctrl {
            if s.valid[i] {
                obs.push(build_observation(s, self.scenario, i, &pv.config)?);
                valid.push(true);
            } else {
                valid.push(false);
            }
        }
        let mut data = Vec::with_capacity(self.ctrl.len() * self.feat_width);
        let mut it = obs.iter();
        for &v in &valid {
            if v {
                it.next().expect("one observation per valid agent").write_features(&mut data);
            } else {
                data.extend(std::iter::repeat_n(0.0, self.feat_width));
            }
        }
        Ok((Tensor::new(self.ctrl.len(), self.feat_width, data), valid))
    }

    /// Advances the hidden state with an observation of `s`. Rows of
    /// agents invalid in `s` keep their state.
    fn hidden_step(&self, tape: &mut Tape, pv: &PolicyVars, s: &SimState, h: Var) -> Result<Var> {
        let (feats, valid) = self.observe(s, pv)?;
        if !valid.iter().any(|&v| v) {
            return Ok(h);
        }
        let f = tape.constant(feats);
        let x = encode(tape, pv, f)?;
        let m = mix_agents(tape, pv, x, &valid)?;
        let h_new = gru_step(tape, pv, h, m)?;
        if valid.iter().all(|&v| v) {
            return Ok(h_new);
        }
        blend_rows(tape, h_new, h, &valid)
    }

    fn warm_up(&self, tape: &mut Tape, pv: &PolicyVars) -> Result<Var> {
        let mut h = zero_hidden(tape, &pv.config, self.ctrl.len());
        for t in 0..self.scenario.history_len {
            h = self.hidden_step(tape, pv, &self.scenario.log.states[t], h)?;
        }
        Ok(h)
    }
}

/// `take ? a : b` per row.
fn blend_rows(tape: &mut Tape, a: Var, b: Var, take: &[bool]) -> Result<Var> {
    let m = Tensor::column(take.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect());
    let inv = m.map(|v| 1.0 - v);
    let m = tape.constant(m);
    let inv = tape.constant(inv);
    let a = tape.mul(a, m)?;
    let b = tape.mul(b, inv)?;
    tape.add(a, b)
}

fn reset_hidden(tape: &mut Tape, h: Var, snapped: &[bool], mode: HiddenReset) -> Result<Var> {
    let keep: Vec<bool> = snapped.iter().map(|&s| !s).collect();
    match mode {
        HiddenReset::Zero => {
            let zeros = tape.constant(Tensor::zeros(tape.shape(h).0, tape.shape(h).1));
            blend_rows(tape, h, zeros, &keep)
        }
        HiddenReset::Detach => {
            let d = tape.detach(h)?;
            blend_rows(tape, h, d, &keep)
        }
    }
}

fn kinematic_rows(s: &SimState, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * STATE_DIM);
    for &i in idx {
        data.extend_from_slice(&s.agents[i].kinematics());
    }
    Tensor::new(idx.len(), STATE_DIM, data)
}

struct Outcome {
    record: RolloutRecord,
    grads: Option<Vec<Tensor>>,
}

fn run(
    scenario: &Scenario,
    params: &PolicyParams,
    opts: &RolloutOptions,
    trainable: bool,
    mut noise: PolicyNoise<'_>,
    mut env_rng: Option<&mut dyn RngCore>,
    replay: Option<&RolloutRecord>,
) -> Result<Outcome> {
    let ctx = Ctx::new(scenario, params)?;
    let n = ctx.ctrl.len();
    let steps = opts.steps_for(scenario);
    if let PolicyNoise::Frozen(eps) = &noise {
        if eps.len() < steps {
            return Err(Error::domain(
                "rollout",
                format!("{} frozen noise tensors for {steps} steps", eps.len()),
            ));
        }
    }
    if let Some(r) = replay {
        if r.inputs.len() < steps || r.controlled != ctx.ctrl {
            return Err(Error::domain("rollout", "replay record does not match the scenario"));
        }
    }
    let env_noise = if opts.noise_sigma > 0.0 {
        if env_rng.is_none() {
            return Err(Error::domain("rollout", "environment noise requested without an RNG"));
        }
        Some(Normal::new(0.0, opts.noise_sigma).map_err(|e| Error::domain("rollout", e.to_string()))?)
    } else {
        None
    };

    let mut tape = Tape::new();
    let pv = params.register(&mut tape, trainable);
    let mut h = ctx.warm_up(&mut tape, &pv)?;

    let log = &scenario.log.states;
    let hl = scenario.history_len;
    let mut sim = log[hl].clone();
    let mut states: Vec<SimState> = log[..=hl].to_vec();
    let mut rec = RolloutRecord {
        trajectory: Trajectory {
            states: Vec::new(),
            dt: scenario.dt,
        },
        controlled: ctx.ctrl.clone(),
        step_losses: Vec::with_capacity(steps),
        loss: 0.0,
        resets: Vec::new(),
        deviations: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        unsupervised_steps: 0,
        inputs: Vec::with_capacity(steps),
    };
    let mut loss_vars: Vec<Option<Var>> = Vec::with_capacity(steps);

    for k in 0..steps {
        let t = hl + k;
        let log_t = &log[t];

        let dev: Vec<Option<f64>> = ctx
            .ctrl
            .iter()
            .map(|&i| {
                (sim.valid[i] && log_t.valid[i]).then(|| {
                    let (a, b) = (&sim.agents[i], &log_t.agents[i]);
                    (a.x - b.x).hypot(a.y - b.y)
                })
            })
            .collect();
        let snapped: Vec<bool> = match (replay, opts.reset) {
            (Some(r), _) => {
                let event = r.resets.iter().find(|e| e.t == t);
                ctx.ctrl.iter().map(|i| event.is_some_and(|e| e.agents.contains(i))).collect()
            }
            _ if k == 0 => vec![false; n],
            (_, ResetPolicy::Distance { xi }) => dev.iter().map(|d| d.is_some_and(|d| d > xi)).collect(),
            (_, ResetPolicy::Time { period }) => dev.iter().map(|d| d.is_some() && k % period == 0).collect(),
            (_, ResetPolicy::None) => vec![false; n],
        };
        rec.deviations.push(dev);
        if snapped.iter().any(|&s| s) {
            let mut agents = Vec::new();
            for (r, &i) in ctx.ctrl.iter().enumerate() {
                if snapped[r] {
                    sim.agents[i] = log_t.agents[i];
                    agents.push(i);
                }
            }
            rec.resets.push(ResetEvent {
                t,
                agents,
                cause: match opts.reset {
                    ResetPolicy::Time { .. } => ResetCause::Time,
                    _ => ResetCause::Distance,
                },
            });
            h = reset_hidden(&mut tape, h, &snapped, opts.hidden_reset)?;
        }
        if let Some(r) = replay {
            sim = r.inputs[k].clone();
        }
        rec.inputs.push(sim.clone());

        h = ctx.hidden_step(&mut tape, &pv, &sim, h)?;
        let mode = match &mut noise {
            PolicyNoise::Sample(rng) => ActMode::Sample(&mut **rng),
            PolicyNoise::Frozen(eps) => ActMode::Noise(&eps[k]),
            PolicyNoise::Deterministic => ActMode::Deterministic,
        };
        let out = act(&mut tape, &pv, h, mode)?;
        let a_val = tape.value(out.action).clone();

        let log_next = &log[t + 1];
        let mut next = log_next.clone();
        next.t = t + 1;
        let mut rows = Vec::with_capacity(n);
        let mut step_actions = Vec::with_capacity(n);
        let mut value = Vec::with_capacity(n * STATE_DIM);
        let mut mask = Vec::with_capacity(n);
        for (r, &i) in ctx.ctrl.iter().enumerate() {
            if sim.valid[i] {
                let agent = &sim.agents[i];
                let world = action_to_world(scenario.dynamics, agent.yaw, a_val.row_slice(r));
                let (mut moved, jac): (AgentState, DynJacobian) = step_with_jacobian(scenario.dynamics, agent, &world, scenario.dt)?;
                if let (Some(dist), Some(rng)) = (&env_noise, env_rng.as_mut()) {
                    moved.x += dist.sample(&mut **rng);
                    moved.y += dist.sample(&mut **rng);
                }
                value.extend_from_slice(&moved.kinematics());
                next.agents[i] = moved;
                next.valid[i] = true;
                rows.push(Some((jac, agent.yaw)));
                step_actions.push(world);
                mask.push(log_next.valid[i]);
            } else {
                value.extend_from_slice(&log_next.agents[i].kinematics());
                rows.push(None);
                step_actions.push(vec![0.0; scenario.dynamics.action_dim()]);
                mask.push(false);
            }
        }
        let next_var = tape.custom(
            &[out.action],
            Tensor::new(n, STATE_DIM, value),
            Box::new(DynamicsOp {
                model: scenario.dynamics,
                rows,
            }),
        )?;
        let target = kinematic_rows(log_next, &ctx.ctrl);
        let lv = state_loss_tape(&mut tape, next_var, &target, &mask, &opts.weights)?;
        let lval = lv.map_or(0.0, |v| tape.value(v).item());
        if !lval.is_finite() {
            return Err(Error::NanLoss { t: t + 1 });
        }
        if lv.is_none() {
            rec.unsupervised_steps += 1;
        }
        rec.step_losses.push(lval);
        loss_vars.push(lv);
        rec.actions.push(step_actions);
        rec.log_probs.push(out.log_prob);
        states.push(next.clone());
        sim = next;
    }

    let objective: Vec<Var> = if opts.final_state_only {
        loss_vars.last().copied().flatten().into_iter().collect()
    } else {
        loss_vars.iter().copied().flatten().collect()
    };
    let denom = if opts.final_state_only { 1 } else { steps.max(1) };
    rec.loss = if opts.final_state_only {
        rec.step_losses.last().copied().unwrap_or(0.0)
    } else {
        rec.step_losses.iter().sum::<f64>() / denom as f64
    };
    rec.trajectory.states = states;

    let grads = if trainable {
        Some(if objective.is_empty() {
            params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
        } else {
            let parts: Vec<Var> = objective;
            let stacked = tape.concat(&parts)?;
            let total = tape.sum(stacked)?;
            let total = tape.scale(total, 1.0 / denom as f64)?;
            let g = tape.backward(total)?;
            pv.grads(&tape, &g)
        })
    } else {
        None
    };
    Ok(Outcome { record: rec, grads })
}

/// One APG rollout with gradients of the rollout loss with respect to
/// every policy parameter (in [`PolicyParams::tensors`] order).
pub fn rollout_apg(
    scenario: &Scenario,
    params: &PolicyParams,
    opts: &RolloutOptions,
    noise: PolicyNoise<'_>,
) -> Result<(RolloutRecord, Vec<Tensor>)> {
    let out = run(scenario, params, opts, true, noise, None, None)?;
    Ok((out.record, out.grads.expect("trainable rollout returns gradients")))
}

/// Closed-loop simulation without gradients.
pub fn simulate(
    scenario: &Scenario,
    params: &PolicyParams,
    opts: &RolloutOptions,
    noise: PolicyNoise<'_>,
    env_rng: Option<&mut dyn RngCore>,
) -> Result<RolloutRecord> {
    Ok(run(scenario, params, opts, false, noise, env_rng, None)?.record)
}

/// Loss of a rollout whose observations, dynamics inputs and resets are
/// frozen at the values recorded in `replay`; only the policy outputs
/// depend on `params`. This is the function whose exact gradient
/// [`rollout_apg`] returns, so it serves as the finite-difference oracle.
pub fn detached_loss(
    scenario: &Scenario,
    params: &PolicyParams,
    opts: &RolloutOptions,
    noise: PolicyNoise<'_>,
    replay: &RolloutRecord,
) -> Result<f64> {
    Ok(run(scenario, params, opts, false, noise, None, Some(replay))?.record.loss)
}

/// Result of a teacher-forced behaviour-cloning pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BcRecord {
    /// Mean over valid transitions of `‖â − a‖₂`.
    pub loss: f64,
    pub transitions: usize,
    /// Transitions skipped because an endpoint was invalid.
    pub skipped: usize,
}

/// Expert action (in the policy's action frame) for agent `i` between
/// log steps `t` and `t + 1`, or `None` if either state is invalid.
pub fn expert_action(scenario: &Scenario, i: usize, t: usize) -> Result<Option<Vec<f64>>> {
    let (a, b) = (&scenario.log.states[t], &scenario.log.states[t + 1]);
    if !(a.valid[i] && b.valid[i]) {
        return Ok(None);
    }
    let world = inverse(scenario.dynamics, &a.agents[i], &b.agents[i], scenario.dt)?.to_vec();
    Ok(Some(action_to_ego(scenario.dynamics, a.agents[i].yaw, &world)))
}

fn bc_pass(scenario: &Scenario, params: &PolicyParams, steps: usize, trainable: bool) -> Result<(BcRecord, Option<Vec<Tensor>>)> {
    let ctx = Ctx::new(scenario, params)?;
    let n = ctx.ctrl.len();
    let a_dim = scenario.dynamics.action_dim();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, trainable);
    let mut h = ctx.warm_up(&mut tape, &pv)?;
    let hl = scenario.history_len;
    let steps = steps.min(scenario.horizon);
    let mut parts = Vec::with_capacity(steps);
    let mut rec = BcRecord {
        loss: 0.0,
        transitions: 0,
        skipped: 0,
    };
    for k in 0..steps {
        let t = hl + k;
        h = ctx.hidden_step(&mut tape, &pv, &scenario.log.states[t], h)?;
        let out = act(&mut tape, &pv, h, ActMode::Deterministic)?;
        let mut target = Vec::with_capacity(n * a_dim);
        let mut mask = Vec::with_capacity(n);
        for &i in &ctx.ctrl {
            match expert_action(scenario, i, t)? {
                Some(a) => {
                    target.extend(a);
                    mask.push(1.0);
                    rec.transitions += 1;
                }
                None => {
                    target.extend(std::iter::repeat_n(0.0, a_dim));
                    mask.push(0.0);
                    rec.skipped += 1;
                }
            }
        }
        if mask.iter().all(|&m| m == 0.0) {
            continue;
        }
        let tgt = tape.constant(Tensor::new(n, a_dim, target));
        let diff = tape.sub(out.action, tgt)?;
        let norm = tape.l2_norm(diff)?;
        let m = tape.constant(Tensor::column(mask));
        let norm = tape.mul(norm, m)?;
        parts.push(tape.sum(norm)?);
    }
    let zeros = || {
        params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect::<Vec<_>>()
    };
    if rec.transitions == 0 {
        return Ok((rec, trainable.then(zeros)));
    }
    let stacked = tape.concat(&parts)?;
    let total = tape.sum(stacked)?;
    let loss = tape.scale(total, 1.0 / rec.transitions as f64)?;
    rec.loss = tape.value(loss).item();
    if !rec.loss.is_finite() {
        return Err(Error::NanLoss { t: hl });
    }
    let grads = if trainable {
        let g = tape.backward(loss)?;
        Some(pv.grads(&tape, &g))
    } else {
        None
    };
    Ok((rec, grads))
}

/// Teacher-forced BC loss over the first `steps` horizon transitions and
/// its parameter gradients.
pub fn rollout_bc_train(scenario: &Scenario, params: &PolicyParams, steps: usize) -> Result<(BcRecord, Vec<Tensor>)> {
    let (rec, g) = bc_pass(scenario, params, steps, true)?;
    Ok((rec, g.expect("trainable pass returns gradients")))
}

/// BC loss without gradients.
pub fn bc_loss(scenario: &Scenario, params: &PolicyParams, steps: usize) -> Result<BcRecord> {
    Ok(bc_pass(scenario, params, steps, false)?.0)
}
