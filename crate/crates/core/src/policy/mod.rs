//! Recurrent stochastic policy: observation builder, per-agent encoder,
//! learned-query agent mixer, GRU cell and a tanh-squashed Gaussian head.
//!
//! All network functions record onto a [`Tape`]. Parameters enter the tape
//! through [`PolicyParams::register`], either as leaves (training) or as
//! constants (evaluation).

pub mod checkpoint;
pub mod observation;

pub use observation::{build_observation, feature_width, Neighbor, Observation, RoadPoint};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::dynamics::action_bounds;
use crate::error::{Error, Result};
use crate::types::DynamicsModel;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
pub const LOG_STD_INIT: f64 = -1.0;

/// Additive score for masked-out keys.
const MASK_NEG: f64 = -1e30;

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Number of learned queries in the mixer.
    pub queries: usize,
    pub k_road: usize,
    pub k_agent: usize,
    /// Observation radius in meters.
    pub r_obs: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            queries: 4,
            k_road: 32,
            k_agent: 8,
            r_obs: 50.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.queries == 0 {
            return Err(Error::Config("policy hidden and queries must be ≥ 1".into()));
        }
        if !(self.r_obs > 0.0 && self.r_obs.is_finite()) {
            return Err(Error::Config(format!("r_obs must be positive, got {}", self.r_obs)));
        }
        Ok(())
    }
}

/// Parameter slots, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
enum P {
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    SelfWq,
    SelfWk,
    SelfWv,
    CrossQueries,
    CrossWk,
    CrossWv,
    OutWAgent,
    OutWScene,
    OutB,
    GruWzX,
    GruWzH,
    GruBz,
    GruWrX,
    GruWrH,
    GruBr,
    GruWhX,
    GruWhH,
    GruBh,
    HeadWMu,
    HeadBMu,
    HeadLogStd,
}

pub const PARAM_NAMES: [&str; 25] = [
    "enc.w1",
    "enc.b1",
    "enc.w2",
    "enc.b2",
    "mix.self.wq",
    "mix.self.wk",
    "mix.self.wv",
    "mix.cross.queries",
    "mix.cross.wk",
    "mix.cross.wv",
    "mix.out.w_agent",
    "mix.out.w_scene",
    "mix.out.b",
    "gru.wz_x",
    "gru.wz_h",
    "gru.bz",
    "gru.wr_x",
    "gru.wr_h",
    "gru.br",
    "gru.wh_x",
    "gru.wh_h",
    "gru.bh",
    "head.w_mu",
    "head.b_mu",
    "head.log_std",
];

/// `(shape, fan_in)` of every slot; `fan_in = 0` marks a bias (zero init).
fn layout(cfg: &PolicyConfig, model: DynamicsModel) -> Vec<((usize, usize), usize)> {
    let (f, h, m, a) = (feature_width(cfg), cfg.hidden, cfg.queries, model.action_dim());
    let w = |r, c, fan| ((r, c), fan);
    vec![
        w(f, h, f),
        w(1, h, 0),
        w(h, h, h),
        w(1, h, 0),
        w(h, h, h),
        w(h, h, h),
        w(h, h, h),
        w(m, h, h),
        w(h, h, h),
        w(h, h, h),
        w(h, h, 2 * h),
        w(h, h, 2 * h),
        w(1, h, 0),
        w(h, h, 2 * h),
        w(h, h, 2 * h),
        w(1, h, 0),
        w(h, h, 2 * h),
        w(h, h, 2 * h),
        w(1, h, 0),
        w(h, h, 2 * h),
        w(h, h, 2 * h),
        w(1, h, 0),
        w(h, a, h),
        w(1, a, 0),
        w(1, a, 0),
    ]
}

/// Policy weights θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub model: DynamicsModel,
    tensors: Vec<Tensor>,
}

impl PolicyParams {
    /// Uniform(±1/√fan_in) weights, zero biases, `log_std = −1`.
    pub fn init(config: PolicyConfig, model: DynamicsModel, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(&config, model)
            .into_iter()
            .enumerate()
            .map(|(k, ((r, c), fan))| {
                if k == P::HeadLogStd as usize {
                    Tensor::full(r, c, LOG_STD_INIT)
                } else if fan == 0 {
                    Tensor::zeros(r, c)
                } else {
                    let b = 1.0 / (fan as f64).sqrt();
                    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-b..b)).collect())
                }
            })
            .collect();
        Ok(Self { config, model, tensors })
    }

    /// Every tensor zero, including `log_std`.
    pub fn zeros(config: PolicyConfig, model: DynamicsModel) -> Self {
        let tensors = layout(&config, model).into_iter().map(|((r, c), _)| Tensor::zeros(r, c)).collect();
        Self { config, model, tensors }
    }

    /// Builds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: PolicyConfig, model: DynamicsModel, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config, model);
        if tensors.len() != lay.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                lay.len(),
                tensors.len()
            )));
        }
        for ((t, (shape, _)), name) in tensors.iter().zip(&lay).zip(PARAM_NAMES) {
            if t.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, model, tensors })
    }

    pub fn names() -> &'static [&'static str] {
        &PARAM_NAMES
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        PARAM_NAMES.iter().position(|n| *n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Restores the `log_std` invariant.
    pub fn clamp_log_std(&mut self) {
        for v in self.tensors[P::HeadLogStd as usize].data_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Flattened copy of every parameter, in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites every parameter from a flat vector.
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> PolicyVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        PolicyVars {
            config: self.config,
            model: self.model,
            vars,
        }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub config: PolicyConfig,
    pub model: DynamicsModel,
    vars: Vec<Var>,
}

impl PolicyVars {
    fn p(&self, slot: P) -> Var {
        self.vars[slot as usize]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in checkpoint order; zeros where a
    /// parameter does not influence the loss.
    pub fn grads(&self, tape: &Tape, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get_or_zeros(v, tape.shape(v))).collect()
    }
}

/// Stacks per-agent observation features into an `N×F` tensor.
pub fn features_tensor(obs: &[Observation]) -> Tensor {
    let mut data = Vec::new();
    for o in obs {
        o.write_features(&mut data);
    }
    let rows = obs.len();
    let cols = if rows == 0 { 0 } else { data.len() / rows };
    Tensor::new(rows, cols, data)
}

/// Two-layer tanh MLP over per-agent features: `N×F → N×H`.
pub fn encode(tape: &mut Tape, p: &PolicyVars, features: Var) -> Result<Var> {
    let h = tape.matmul(features, p.p(P::EncW1))?;
    let h = tape.add(h, p.p(P::EncB1))?;
    let h = tape.tanh(h)?;
    let h = tape.matmul(h, p.p(P::EncW2))?;
    let h = tape.add(h, p.p(P::EncB2))?;
    tape.tanh(h)
}

fn key_mask(valid: &[bool]) -> Tensor {
    Tensor::row(valid.iter().map(|&v| if v { 0.0 } else { MASK_NEG }).collect())
}

/// Masked scaled dot-product attention of `q` over `k`/`v`.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Var, scale: f64) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale)?;
    let scores = tape.add(scores, mask)?;
    let w = tape.softmax(scores)?;
    tape.matmul(w, v)
}

/// Agent mixer: residual self-attention over valid agents, then `M`
/// learned queries attend over the result; their mean is a scene summary
/// that is projected back into every agent's feature. `N×H → N×H`.
pub fn mix_agents(tape: &mut Tape, p: &PolicyVars, x: Var, valid: &[bool]) -> Result<Var> {
    let (n, hdim) = tape.shape(x);
    if valid.len() != n {
        return Err(Error::domain("mix_agents", format!("{} mask entries for {n} agents", valid.len())));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllMasked);
    }
    let scale = 1.0 / (hdim as f64).sqrt();
    let mask = tape.constant(key_mask(valid));

    let q = tape.matmul(x, p.p(P::SelfWq))?;
    let k = tape.matmul(x, p.p(P::SelfWk))?;
    let v = tape.matmul(x, p.p(P::SelfWv))?;
    let att = attend(tape, q, k, v, mask, scale)?;
    let y1 = tape.add(x, att)?;

    let k2 = tape.matmul(y1, p.p(P::CrossWk))?;
    let v2 = tape.matmul(y1, p.p(P::CrossWv))?;
    let pooled = attend(tape, p.p(P::CrossQueries), k2, v2, mask, scale)?;
    let summary = tape.mean_rows(pooled)?;

    let own = tape.matmul(y1, p.p(P::OutWAgent))?;
    let scene = tape.matmul(summary, p.p(P::OutWScene))?;
    let out = tape.add(own, scene)?;
    let out = tape.add(out, p.p(P::OutB))?;
    tape.tanh(out)
}

/// GRU cell: `h' = (1 − z)⊙h + z⊙h̃`.
pub fn gru_step(tape: &mut Tape, p: &PolicyVars, h: Var, x: Var) -> Result<Var> {
    if tape.shape(h) != tape.shape(x) {
        return Err(Error::Shape {
            op: "gru_step",
            lhs: tape.shape(h),
            rhs: tape.shape(x),
        });
    }
    let gate = |tape: &mut Tape, wx: P, wh: P, b: P, hin: Var| -> Result<Var> {
        let a = tape.matmul(x, p.p(wx))?;
        let c = tape.matmul(hin, p.p(wh))?;
        let s = tape.add(a, c)?;
        tape.add(s, p.p(b))
    };
    let z = gate(tape, P::GruWzX, P::GruWzH, P::GruBz, h)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, P::GruWrX, P::GruWrH, P::GruBr, h)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let cand = gate(tape, P::GruWhX, P::GruWhH, P::GruBh, rh)?;
    let cand = tape.tanh(cand)?;
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Zero hidden state for `n` agents.
pub fn zero_hidden(tape: &mut Tape, cfg: &PolicyConfig, n: usize) -> Var {
    tape.constant(Tensor::zeros(n, cfg.hidden))
}

/// Where the head's noise comes from.
pub enum ActMode<'a> {
    /// Fresh standard-normal draws from the supplied RNG.
    Sample(&'a mut dyn RngCore),
    /// Pre-drawn standard-normal noise (`N×A`).
    Noise(&'a Tensor),
    /// No noise: the squashed mean.
    Deterministic,
}

/// Head outputs for `N` agents.
#[derive(Debug, Clone)]
pub struct ActOutput {
    /// Squashed actions `bound ⊙ tanh(μ + σ⊙ε)`, `N×A`.
    pub action: Var,
    /// Pre-squash Gaussian sample `μ + σ⊙ε`.
    pub raw: Var,
    pub mean: Var,
    /// `σ = exp(clamp(log_std))`, `1×A`.
    pub std: Var,
    /// Noise used (zeros when deterministic).
    pub noise: Tensor,
    /// Log-density of each agent's squashed action.
    pub log_prob: Vec<f64>,
}

/// Standard-normal noise of shape `rows×cols`.
pub fn draw_noise<R: RngCore + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Gaussian head with reparametrized sampling and tanh squashing into
/// the dynamics action bounds.
pub fn act(tape: &mut Tape, p: &PolicyVars, h: Var, mode: ActMode<'_>) -> Result<ActOutput> {
    let n = tape.shape(h).0;
    let a_dim = p.model.action_dim();
    let mean = tape.matmul(h, p.p(P::HeadWMu))?;
    let mean = tape.add(mean, p.p(P::HeadBMu))?;
    let log_std = tape.clamp(p.p(P::HeadLogStd), LOG_STD_MIN, LOG_STD_MAX)?;
    let std = tape.exp(log_std)?;
    let noise = match mode {
        ActMode::Sample(rng) => draw_noise(rng, n, a_dim),
        ActMode::Noise(eps) => {
            if eps.shape() != (n, a_dim) {
                return Err(Error::Shape {
                    op: "act",
                    lhs: eps.shape(),
                    rhs: (n, a_dim),
                });
            }
            eps.clone()
        }
        ActMode::Deterministic => Tensor::zeros(n, a_dim),
    };
    let raw = if noise.data().iter().all(|&e| e == 0.0) {
        mean
    } else {
        let eps = tape.constant(noise.clone());
        let jitter = tape.mul(std, eps)?;
        tape.add(mean, jitter)?
    };
    let bounds = Tensor::row(action_bounds(p.model).to_vec());
    let squashed = tape.tanh(raw)?;
    let bound_var = tape.constant(bounds.clone());
    let action = tape.mul(squashed, bound_var)?;

    let sigma = tape.value(std).data().to_vec();
    let raw_v = tape.value(raw);
    let log_prob = (0..n)
        .map(|i| {
            (0..a_dim)
                .map(|j| {
                    let e = noise.get(i, j);
                    let u = raw_v.get(i, j);
                    let gauss = -0.5 * e * e - sigma[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                    let t = u.tanh();
                    gauss - (bounds.get(0, j) * (1.0 - t * t)).max(f64::MIN_POSITIVE).ln()
                })
                .sum()
        })
        .collect();
    Ok(ActOutput {
        action,
        raw,
        mean,
        std,
        noise,
        log_prob,
    })
}

/// Maps a policy action to the world frame. Delta displacements are
/// emitted in the agent's heading frame; bicycle actions are frame-free.
pub fn action_to_world(model: DynamicsModel, yaw: f64, a: &[f64]) -> Vec<f64> {
    match model {
        DynamicsModel::Bicycle => a.to_vec(),
        DynamicsModel::Delta => {
            let (s, c) = yaw.sin_cos();
            vec![c * a[0] - s * a[1], s * a[0] + c * a[1], a[2]]
        }
    }
}

/// Inverse of [`action_to_world`].
pub fn action_to_ego(model: DynamicsModel, yaw: f64, a: &[f64]) -> Vec<f64> {
    match model {
        DynamicsModel::Bicycle => a.to_vec(),
        DynamicsModel::Delta => {
            let (s, c) = yaw.sin_cos();
            vec![c * a[0] + s * a[1], -s * a[0] + c * a[1], a[2]]
        }
    }
}

#[cfg(test)]
mod tests;
